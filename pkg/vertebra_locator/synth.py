"""Synthetic spines, rendered volumes, corrupted heatmap stacks and dataset manifests."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArtifactError, MissingArtifactError
from .landmarks import DESK_LABELS, LandmarkSet, read_landmarks, write_landmarks
from .volume import Volume3D, gaussian_peak, make_gaussian_heatmap, read_volume, write_volume

logger = logging.getLogger(__name__)

NOISE_SEED_OFFSET = 10_000
MANIFEST_COLUMNS = ["volume", "landmarks"]


@dataclass(frozen=True)
class SpineModel:
    """Generative model of a spine: a cubic curve running along z, with per-sample perturbations.

    `curvature` holds the (u, u^2, u^3) coefficients in mm of the x (lateral) and
    y (sagittal) offsets, u running from 0 at the first label to 1 at the last.
    """

    labels: tuple = DESK_LABELS
    dims: tuple = (16, 16, 48)
    spacing: tuple = (4.0, 4.0, 4.0)
    origin: tuple = (0.0, 0.0, 0.0)
    start: tuple = (30.0, 30.0, 176.0)
    nominal_spacing: object = 15.0
    curvature: tuple = ((0.0, 0.0, 0.0), (0.0, -6.0, 4.0))
    jitter: float = 1.0
    spacing_jitter: float = 0.03
    curvature_jitter: float = 1.0
    shift_sigma: float = 4.0
    fov: tuple = None
    descending: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        steps = self.edge_spacings()
        if (steps <= 0).any():
            raise ValueError("nominal inter-vertebra spacings must be positive")
        if min(self.jitter, self.spacing_jitter, self.curvature_jitter, self.shift_sigma) < 0:
            raise ValueError("perturbation scales must be nonnegative")
        if np.asarray(self.curvature, dtype=float).shape != (2, 3):
            raise ValueError("curvature needs 3 coefficients for each of x and y")
        if self.fov is not None and self.fov[0] > self.fov[1]:
            raise ValueError(f"empty field of view {self.fov}")

    def edge_spacings(self):
        m = max(len(self.labels) - 1, 0)
        s = np.asarray(self.nominal_spacing, dtype=float)
        return np.full(m, float(s)) if s.ndim == 0 else s.reshape(m)

    def template(self):
        return Volume3D.zeros(self.dims, self.spacing, self.origin)

    def fov_window(self):
        if self.fov is not None:
            return tuple(float(v) for v in self.fov)
        lo = float(self.origin[2])
        return lo, lo + self.spacing[2] * (self.dims[2] - 1)


def sample_spine(model, seed=None):
    rng = np.random.default_rng(model.seed if seed is None else seed)
    nominal = model.edge_spacings()
    steps = nominal * (1.0 + model.spacing_jitter * rng.standard_normal(nominal.size))
    steps = np.maximum(steps, 0.2 * nominal)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    u = s / s[-1] if s[-1] > 0 else np.zeros_like(s)
    basis = np.stack([u, u**2, u**3])
    coeffs = np.asarray(model.curvature, dtype=float) + model.curvature_jitter * rng.standard_normal((2, 3))
    shift = model.shift_sigma * rng.standard_normal(3)
    noise = model.jitter * rng.standard_normal((2, s.size))
    start = np.asarray(model.start, dtype=float) + shift
    x = start[0] + coeffs[0] @ basis + noise[0]
    y = start[1] + coeffs[1] @ basis + noise[1]
    z = start[2] - s if model.descending else start[2] + s
    lo, hi = model.fov_window()
    present = (z >= lo) & (z <= hi)
    return LandmarkSet.from_arrays(model.labels, np.stack([x, y, z], axis=1), present)


def sample_spines(model, count, offset=0):
    """`count` spines drawn with seeds seed + offset, seed + offset + 1, ..."""
    return [sample_spine(model, model.seed + offset + k) for k in range(count)]


def render_volume(landmarks, template, blob_sigma, noise_sigma, seed=0):
    """Gaussian intensity blobs at present centroids plus seeded noise, clamped to [0, 1].

    Blobs grow in width and brightness along the chain.
    """
    gx, gy, gz = template.world_grid()
    data = np.zeros(template.dims)
    m = len(landmarks)
    for i, entry in enumerate(landmarks):
        if not entry.present:
            continue
        frac = i / (m - 1) if m > 1 else 1.0
        sigma = blob_sigma * (0.8 + 0.4 * frac)
        amplitude = 0.35 + 0.65 * frac
        px, py, pz = entry.position
        r2 = (gx - px) ** 2 + (gy - py) ** 2 + (gz - pz) ** 2
        data += amplitude * np.exp(-r2 / (2.0 * sigma**2))
    if noise_sigma > 0:
        data += noise_sigma * np.random.default_rng(seed).standard_normal(template.dims)
    return template.like(np.clip(data, 0.0, 1.0))


def generate_dataset(model, count, blob_sigma, noise_sigma, offset=0):
    samples = []
    template = model.template()
    for k in range(count):
        seed = model.seed + offset + k
        landmarks = sample_spine(model, seed)
        volume = render_volume(landmarks, template, blob_sigma, noise_sigma, seed + NOISE_SEED_OFFSET)
        samples.append((volume, landmarks))
    logger.info("generated %d synthetic spines", count)
    return samples


def _peak_profile(position, sigma, template):
    """Gaussian bump whose largest sampled value is exactly 1."""
    data = make_gaussian_heatmap(position, sigma, template).data
    top = data.max()
    return data / top if top > 0 else data


def corrupt_stack(stack, drop=(), inject=(), sigma=12.0):
    """Zero the `drop` channels, then add peaks (label, position_mm, amplitude) scaled by the channel's true peak."""
    for label in list(drop) + [item[0] for item in inject]:
        if label not in stack.labels:
            raise ValueError(f"unknown label {label!r}")
    original_peaks = stack.data.max(axis=(1, 2, 3))
    data = stack.data.copy()
    for label in drop:
        data[stack.index(label)] = 0.0
    template = stack.template()
    for label, position, amplitude in inject:
        c = stack.index(label)
        peak = original_peaks[c] if original_peaks[c] > 0 else gaussian_peak(sigma)
        data[c] += amplitude * peak * _peak_profile(position, sigma, template)
    return stack.with_data(data)


@dataclass
class Corruption:
    dropped: str = None
    weak: tuple = None
    pair: tuple = ()
    notes: list = field(default_factory=list)

    def describe(self):
        parts = []
        if self.dropped:
            parts.append(f"drop {self.dropped}")
        if self.weak:
            parts.append(f"weak {self.weak[0]}")
        if self.pair:
            parts.append("shift " + "+".join(label for label, _ in self.pair))
        return "; ".join(parts) or "none"


def _inside_z(z, stack):
    lo = stack.origin[2]
    return lo <= z <= lo + stack.spacing[2] * (stack.dims[2] - 1)


def standard_corruption(
    stack,
    truth,
    rng,
    sigma,
    nominal_spacing=15.0,
    weak_amplitude=1.2,
    strong_amplitude=1.0,
    descending=True,
):
    """The evaluation corruption suite.

    * one interior channel loses its response;
    * one channel gets a remote false positive at `weak_amplitude` x its true peak;
    * two adjacent interior channels lose their response and fire together 2.5 spacings
      toward the head, at `strong_amplitude` x their true peaks.

    Channels are picked so the three corruptions do not touch each other's chain
    neighbours; a corruption with no valid channel is skipped.
    """
    labels = stack.labels
    m = len(labels)
    present = [truth.get(label).present and _inside_z(truth.get(label).position[2], stack) for label in labels]
    head = 1.0 if descending else -1.0
    record = Corruption()
    used = set()
    drop, inject = [], []

    pair_starts = [
        i for i in range(3, m - 2)
        if all(present[i - 1:i + 3])
        and all(_inside_z(truth.get(labels[c]).position[2] + head * 2.5 * nominal_spacing, stack) for c in (i, i + 1))
    ]
    if pair_starts:
        i = int(rng.choice(pair_starts))
        shifted = []
        for c in (i, i + 1):
            position = np.asarray(truth.get(labels[c]).position) + np.array([0.0, 0.0, head * 2.5 * nominal_spacing])
            shifted.append((labels[c], tuple(position)))
            drop.append(labels[c])
            inject.append((labels[c], tuple(position), strong_amplitude))
        record.pair = tuple(shifted)
        used |= set(range(i - 1, i + 3))
    else:
        record.notes.append("no room for a shifted pair")

    drop_candidates = [j for j in range(1, m - 1) if all(present[j - 1:j + 2]) and j not in used]
    if drop_candidates:
        j = int(rng.choice(drop_candidates))
        drop.append(labels[j])
        record.dropped = labels[j]
        used |= {j - 1, j, j + 1}
    else:
        record.notes.append("no interior channel to drop")

    weak_candidates = []
    for k in range(m):
        if not present[k] or k in used:
            continue
        z = truth.get(labels[k]).position[2]
        offsets = [d * nominal_spacing for d in (4, -4, 3, -3) if _inside_z(z + d * nominal_spacing, stack)]
        if offsets:
            weak_candidates.append((k, offsets))
    if weak_candidates:
        k, offsets = weak_candidates[int(rng.integers(len(weak_candidates)))]
        position = np.asarray(truth.get(labels[k]).position) + np.array([0.0, 0.0, offsets[0]])
        inject.append((labels[k], tuple(position), weak_amplitude))
        record.weak = (labels[k], tuple(position))
    else:
        record.notes.append("no channel for a remote false positive")

    for note in record.notes:
        logger.warning("standard corruption: %s", note)
    return corrupt_stack(stack, drop, inject, sigma), record


def write_dataset(samples, manifest, prefix="case"):
    """Cases are written next to the manifest, which lists them by relative path."""
    manifest = Path(manifest)
    directory = manifest.parent
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, (volume, landmarks) in enumerate(samples):
        name = f"{prefix}_{n:03d}"
        write_volume(volume, directory / f"{name}.svh")
        write_landmarks(landmarks, directory / f"{name}_landmarks.csv")
        rows.append({"volume": f"{name}.svh", "landmarks": f"{name}_landmarks.csv"})
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False)
    return manifest


def read_manifest(path):
    """(volume path, landmark path) pairs; relative entries resolve against the manifest's folder."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"dataset manifest not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactError(f"cannot parse manifest {path}: {e}") from e
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ArtifactError(f"{path}: missing columns {', '.join(missing)}")
    return [(path.parent / v, path.parent / l) for v, l in zip(df["volume"], df["landmarks"])]


def load_dataset(path):
    return [(read_volume(v), read_landmarks(l)) for v, l in read_manifest(path)]
