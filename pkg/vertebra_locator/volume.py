"""Dense 3D grids, world/voxel transforms, Gaussian targets and `.svh/.raw` volume files."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ArtifactError, MalformedHeaderError, MissingArtifactError, ShapeError
from .headers import (
    format_numbers,
    parse_numbers,
    read_float32_payload,
    read_header,
    write_float32_payload,
    write_header,
)

logger = logging.getLogger(__name__)

SVH_VERSION = 1
# Heatmaps are zero beyond this many sigmas.
TRUNCATE_SIGMAS = 4.0


def _triple(values, name):
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ShapeError(f"{name} needs 3 components, got {len(values)}")
    return values


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar grid indexed data[i, j, k] with i along x; linear order is x-fastest."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ShapeError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def from_flat(cls, dims, spacing, origin, values):
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values)
        if values.size != math.prod(dims):
            raise ShapeError(f"{values.size} values do not fill a {dims} grid")
        return cls(values.reshape(dims, order="F"), spacing, origin)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return cls(np.zeros(tuple(int(d) for d in dims)), spacing, origin)

    @property
    def dims(self):
        return self.data.shape

    def flat(self):
        return self.data.ravel(order="F")

    def same_grid(self, other):
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def like(self, data):
        return Volume3D(data, self.spacing, self.origin)

    def world_grid(self):
        """World coordinates (mm) of every voxel centre, one array per axis."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.meshgrid(*axes, indexing="ij")


def world_to_voxel(position, volume):
    p = np.asarray(position, dtype=float)
    return (p - np.asarray(volume.origin)) / np.asarray(volume.spacing)


def voxel_to_world(index, volume):
    idx = np.asarray(index, dtype=float)
    return np.asarray(volume.origin) + idx * np.asarray(volume.spacing)


def nearest_voxel(position, volume):
    return tuple(int(i) for i in np.rint(world_to_voxel(position, volume)))


def inside(index, volume):
    return all(0 <= i < n for i, n in zip(index, volume.dims))


def gaussian_peak(sigma):
    return 1.0 / (sigma * math.sqrt(2.0 * math.pi))


def make_gaussian_heatmap(mu, sigma, template):
    """Ground-truth target: (1 / (sigma sqrt(2 pi))) exp(-|x - mu|^2 / (2 sigma^2)), zero past 4 sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gx, gy, gz = template.world_grid()
    mu = np.asarray(mu, dtype=float)
    r2 = (gx - mu[0]) ** 2 + (gy - mu[1]) ** 2 + (gz - mu[2]) ** 2
    values = gaussian_peak(sigma) * np.exp(-r2 / (2.0 * sigma**2))
    values[r2 > (TRUNCATE_SIGMAS * sigma) ** 2] = 0.0
    return template.like(values)


def argmax_location(volume):
    """Index of the maximum; ties go to the lowest x-fastest linear index."""
    flat = volume.flat()
    linear = int(np.argmax(flat))
    index = tuple(int(i) for i in np.unravel_index(linear, volume.dims, order="F"))
    return index, float(flat[linear])


def write_volume(volume, path):
    """Write `<name>.svh` plus the `<name>.raw` payload next to it."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    write_header(
        path,
        {
            "FORMAT": "svh",
            "VERSION": SVH_VERSION,
            "DIMS": format_numbers(volume.dims),
            "SPACING": format_numbers(volume.spacing),
            "ORIGIN": format_numbers(volume.origin),
            "DTYPE": "float32",
            "BYTE_ORDER": "little",
            "DATA_FILE": raw_path.name,
        },
    )
    write_float32_payload(raw_path, volume.flat())
    return path


def read_volume(path):
    path = Path(path)
    fields = read_header(path, required=("DIMS", "SPACING", "ORIGIN", "DTYPE", "DATA_FILE"))
    if fields.get("FORMAT", "svh") != "svh":
        raise MalformedHeaderError(f"{path}: not an svh header")
    if fields["DTYPE"] != "float32" or fields.get("BYTE_ORDER", "little") != "little":
        raise MalformedHeaderError(f"{path}: only little-endian float32 payloads are supported")
    dims = parse_numbers(fields, "DIMS", 3, int, path)
    if min(dims) < 1:
        raise MalformedHeaderError(f"{path}: dims must be positive, got {dims}")
    spacing = parse_numbers(fields, "SPACING", 3, float, path)
    if min(spacing) <= 0:
        raise MalformedHeaderError(f"{path}: spacing must be positive, got {spacing}")
    origin = parse_numbers(fields, "ORIGIN", 3, float, path)
    payload = read_float32_payload(path.parent / fields["DATA_FILE"], math.prod(dims))
    return Volume3D.from_flat(dims, spacing, origin, payload)


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    """M probability maps on one grid, channel c belonging to labels[c]."""

    labels: tuple
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        labels = tuple(self.labels)
        if data.ndim != 4:
            raise ShapeError(f"heatmap data must be (M, nx, ny, nz), got shape {data.shape}")
        if data.shape[0] != len(labels):
            raise ShapeError(f"{data.shape[0]} channels but {len(labels)} labels")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def from_volumes(cls, volumes, labels):
        volumes = list(volumes)
        if len(volumes) != len(labels):
            raise ShapeError(f"{len(volumes)} channels but {len(labels)} labels")
        if not volumes:
            raise ShapeError("a heatmap stack needs at least one channel")
        first = volumes[0]
        for v in volumes[1:]:
            if not first.same_grid(v):
                raise ShapeError("all channels must share dims, spacing and origin")
        return cls(tuple(labels), np.stack([v.data for v in volumes]), first.spacing, first.origin)

    @classmethod
    def zeros_like_grid(cls, labels, template):
        return cls(tuple(labels), np.zeros((len(labels),) + template.dims), template.spacing, template.origin)

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def channels(self):
        return [Volume3D(c, self.spacing, self.origin) for c in self.data]

    def index(self, label):
        return self.labels.index(label)

    def channel(self, label):
        return Volume3D(self.data[self.index(label)], self.spacing, self.origin)

    def template(self):
        return Volume3D(np.zeros(self.dims), self.spacing, self.origin)

    def with_data(self, data):
        return HeatmapStack(self.labels, data, self.spacing, self.origin)


def make_target_stack(landmarks, sigma, template):
    """One Gaussian channel per label; absent labels get an all-zero channel."""
    data = np.zeros((len(landmarks),) + template.dims)
    for c, entry in enumerate(landmarks):
        if entry.present:
            data[c] = make_gaussian_heatmap(entry.position, sigma, template).data
    return HeatmapStack(landmarks.labels, data, template.spacing, template.origin)


def normalize_stack(stack):
    sums = stack.data.sum(axis=(1, 2, 3), keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return stack.with_data(np.where(sums > 0, stack.data / safe, 0.0))


def write_stack(stack, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for label, channel in zip(stack.labels, stack.channels):
        write_volume(channel, directory / f"{label}.svh")
    pd.DataFrame({"label": list(stack.labels)}).to_csv(directory / "labels.csv", index=False)
    return directory


def read_stack(directory):
    directory = Path(directory)
    index_path = directory / "labels.csv"
    if not index_path.is_file():
        raise MissingArtifactError(f"heatmap stack index not found: {index_path}")
    try:
        labels = list(pd.read_csv(index_path, dtype=str)["label"])
    except (KeyError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactError(f"cannot parse {index_path}: {e}") from e
    return HeatmapStack.from_volumes([read_volume(directory / f"{label}.svh") for label in labels], labels)
