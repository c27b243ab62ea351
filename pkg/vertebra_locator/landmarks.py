"""Vertebra labels, anatomical regions and ordered landmark sets."""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArtifactError, ConfigError, MissingArtifactError

logger = logging.getLogger(__name__)

CERVICAL = tuple(f"C{i}" for i in range(1, 8))
THORACIC = tuple(f"T{i}" for i in range(1, 13))
LUMBAR = tuple(f"L{i}" for i in range(1, 6))
SACRAL = ("S1", "S2")

# Head-to-foot chain order.
DEFAULT_LABELS = CERVICAL + THORACIC + LUMBAR + SACRAL
DESK_LABELS = ("T8", "T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5", "S1", "S2")

REGIONS = {
    **{label: "Cervical" for label in CERVICAL},
    **{label: "Thoracic" for label in THORACIC},
    **{label: "Lumbar" for label in LUMBAR},
}
REGION_NAMES = ("All", "Cervical", "Thoracic", "Lumbar")

LANDMARK_COLUMNS = ["label", "x_mm", "y_mm", "z_mm", "present"]


def parse_labels(value):
    """Resolve a label spec: 'all', 'desk' or a comma separated list in chain order."""
    if isinstance(value, (list, tuple)):
        labels = tuple(value)
    else:
        text = str(value).strip()
        if text.lower() == "all":
            return DEFAULT_LABELS
        if text.lower() == "desk":
            return DESK_LABELS
        labels = tuple(part.strip() for part in text.split(",") if part.strip())
    unknown = [label for label in labels if label not in DEFAULT_LABELS]
    if unknown:
        raise ConfigError(f"unknown vertebra labels: {', '.join(unknown)}")
    if len(set(labels)) != len(labels):
        raise ConfigError("vertebra labels must be unique")
    order = [DEFAULT_LABELS.index(label) for label in labels]
    if order != sorted(order):
        raise ConfigError("vertebra labels must follow head-to-foot chain order")
    if not labels:
        raise ConfigError("at least one vertebra label is required")
    return labels


@dataclass(frozen=True)
class Landmark:
    label: str
    position: tuple
    present: bool = True


@dataclass(frozen=True)
class LandmarkSet:
    """Centroids in chain order; positions in mm. Absent entries keep a position."""

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(
            e if isinstance(e, Landmark) else Landmark(e[0], tuple(e[1]), bool(e[2]) if len(e) > 2 else True)
            for e in self.entries
        )
        entries = tuple(replace(e, position=tuple(float(c) for c in e.position), present=bool(e.present)) for e in entries)
        object.__setattr__(self, "entries", entries)
        if entries:
            parse_labels([e.label for e in entries])
        for e in entries:
            if len(e.position) != 3:
                raise ValueError(f"{e.label}: position must have 3 coordinates")

    @classmethod
    def from_arrays(cls, labels, positions, present=None):
        positions = np.asarray(positions, dtype=float).reshape(len(labels), 3)
        if present is None:
            present = np.ones(len(labels), dtype=bool)
        return cls(tuple(Landmark(l, tuple(p), bool(f)) for l, p, f in zip(labels, positions, present)))

    @property
    def labels(self):
        return tuple(e.label for e in self.entries)

    @property
    def positions(self):
        return np.array([e.position for e in self.entries], dtype=float).reshape(-1, 3)

    @property
    def present(self):
        return np.array([e.present for e in self.entries], dtype=bool)

    @property
    def present_labels(self):
        return tuple(e.label for e in self.entries if e.present)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, label):
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)

    def with_positions(self, positions):
        positions = np.asarray(positions, dtype=float).reshape(len(self.entries), 3)
        return LandmarkSet(tuple(replace(e, position=tuple(p)) for e, p in zip(self.entries, positions)))

    def with_present(self, present):
        return LandmarkSet(tuple(replace(e, present=bool(f)) for e, f in zip(self.entries, present)))

    def translated(self, offset):
        return self.with_positions(self.positions + np.asarray(offset, dtype=float))


def write_landmarks(landmarks, path):
    df = pd.DataFrame(
        {
            "label": list(landmarks.labels),
            "x_mm": landmarks.positions[:, 0],
            "y_mm": landmarks.positions[:, 1],
            "z_mm": landmarks.positions[:, 2],
            "present": landmarks.present.astype(int),
        },
        columns=LANDMARK_COLUMNS,
    )
    df.to_csv(path, index=False, float_format="%.17g")


def _parse_present(value):
    text = str(value).strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ArtifactError(f"present flag {value!r} is not 0/1 or true/false")


def read_landmarks(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"landmark file not found: {path}")
    try:
        df = pd.read_csv(path, dtype={"label": str, "present": str}, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ArtifactError(f"cannot parse landmark file {path}: {e}") from e
    missing = [c for c in LANDMARK_COLUMNS if c not in df.columns]
    if missing:
        raise ArtifactError(f"{path}: missing columns {', '.join(missing)}")
    try:
        return LandmarkSet.from_arrays(
            list(df["label"]),
            df[["x_mm", "y_mm", "z_mm"]].to_numpy(dtype=float),
            [_parse_present(v) for v in df["present"]],
        )
    except (ConfigError, ValueError) as e:
        raise ArtifactError(f"{path}: {e}") from e
