"""Chain-structured message passing between vertebra probability maps.

Each map is updated from its chain neighbours:

    P_i <- normalize( alpha * mean_{j in nb(i)} (P_j * k_{j->i}) + P_i )

where the message P_j * k_{j->i} moves a unit mass at voxel p to p + d with
weight k_{j->i}(d), and normalize divides by the map's sum. All channels are
updated from the previous iteration's maps (Jacobi order).
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import KernelLearningError, MalformedHeaderError, ShapeError
from .headers import read_float32_payload, read_header, write_float32_payload, write_header
from .volume import Volume3D

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class DisplacementKernel:
    """Distribution of voxel displacements d = mu_i - mu_j; weights[anchor + d] = k(d)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 3 or any(n % 2 == 0 for n in w.shape):
            raise ShapeError(f"kernel must be 3D with odd side lengths, got {w.shape}")
        if (w < 0).any():
            raise ValueError("kernel weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-5:
            raise ValueError(f"kernel weights must sum to 1, got {w.sum()}")
        object.__setattr__(self, "weights", w)

    @property
    def anchor(self):
        return tuple(n // 2 for n in self.weights.shape)

    @property
    def half_width(self):
        return self.anchor

    def mode(self):
        """Most probable displacement, in voxels."""
        idx = np.unravel_index(int(np.argmax(self.weights)), self.weights.shape)
        return tuple(int(i - a) for i, a in zip(idx, self.anchor))


@dataclass(frozen=True, eq=False)
class ChainGraph:
    labels: tuple
    kernels: dict = field(default_factory=dict)
    alpha: float = 0.5
    iterations: int = 3

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        for i in range(len(self.labels)):
            for j in self.neighbours(i):
                if (self.labels[j], self.labels[i]) not in self.kernels:
                    raise ValueError(f"missing kernel for edge {self.labels[j]} -> {self.labels[i]}")

    def neighbours(self, i):
        return [j for j in (i - 1, i + 1) if 0 <= j < len(self.labels)]

    def edges(self):
        """Directed edges (source, target) in chain order."""
        out = []
        for i in range(len(self.labels) - 1):
            out += [(self.labels[i], self.labels[i + 1]), (self.labels[i + 1], self.labels[i])]
        return out

    def kernel(self, source, target):
        return self.kernels[(source, target)]


def _displacements(train, source, target, spacing):
    out = []
    for landmarks in train:
        try:
            a, b = landmarks.get(source), landmarks.get(target)
        except KeyError:
            continue
        if a.present and b.present:
            d = (np.asarray(b.position) - np.asarray(a.position)) / np.asarray(spacing, dtype=float)
            out.append(d)
    if not out:
        raise KernelLearningError(f"no training sample has both {source} and {target} present")
    return np.array(out)


def default_half_width(train, source, target, spacing, smoothing_sigma=1.0):
    """Per axis: 1.5x the largest observed |displacement| in voxels, plus room for the blur."""
    d = np.abs(_displacements(train, source, target, spacing)).max(axis=0)
    room = math.ceil(2.0 * smoothing_sigma) if smoothing_sigma > 0 else 0
    return tuple(max(1, math.ceil(1.5 * float(v))) + room for v in d)


def learn_kernel(train, source, target, spacing, half_width=None, smoothing_sigma=1.0):
    """Normalized histogram of voxel-quantized displacements mu_target - mu_source, optionally blurred."""
    d = np.rint(_displacements(train, source, target, spacing)).astype(int)
    if half_width is None:
        half_width = default_half_width(train, source, target, spacing, smoothing_sigma)
    if np.isscalar(half_width):
        half_width = (int(half_width),) * 3
    w = np.array(half_width, dtype=int)
    clamped = np.clip(d, -w, w)
    if (clamped != d).any():
        logger.warning("edge %s -> %s: %d displacements clamped to the kernel support", source, target, int((clamped != d).any(axis=1).sum()))
    hist = np.zeros(tuple(2 * w + 1))
    for offset in clamped:
        hist[tuple(offset + w)] += 1.0
    if smoothing_sigma > 0:
        hist = ndimage.gaussian_filter(hist, smoothing_sigma, mode="constant")
    return DisplacementKernel(hist / hist.sum())


def build_chain_graph(train, labels, spacing, alpha=0.5, iterations=3, smoothing_sigma=1.0, half_width=None):
    train = list(train)
    kernels = {}
    labels = tuple(labels)
    for i in range(len(labels) - 1):
        for source, target in ((labels[i], labels[i + 1]), (labels[i + 1], labels[i])):
            kernels[(source, target)] = learn_kernel(train, source, target, spacing, half_width, smoothing_sigma)
    logger.info("learned %d displacement kernels from %d spines", len(kernels), len(train))
    return ChainGraph(labels, kernels, alpha, iterations)


def apply_message(source_map, kernel):
    """Move mass at voxel p to p + d with weight k(d); mass leaving the grid is lost."""
    if isinstance(source_map, Volume3D):
        return source_map.like(apply_message(source_map.data, kernel))
    data = np.asarray(source_map, dtype=float)
    if not data.any():
        return np.zeros_like(data)
    # centred "same" crop of the full convolution; FFT round-off can dip below zero
    return np.maximum(signal.fftconvolve(data, kernel.weights, mode="same"), 0.0)


def _check_order(maps, graph):
    if tuple(maps.labels) != graph.labels:
        raise ShapeError(f"map channels {maps.labels} do not match chain order {graph.labels}")


def pass_once(maps, graph):
    """One Jacobi sweep of the message update over every channel."""
    _check_order(maps, graph)
    old = maps.data
    new = np.empty_like(old)
    for i, label in enumerate(graph.labels):
        nbs = graph.neighbours(i)
        messages = sum(apply_message(old[j], graph.kernel(graph.labels[j], label)) for j in nbs)
        unnormalized = graph.alpha * messages / len(nbs) + old[i] if nbs else old[i].copy()
        z = unnormalized.sum()
        if z > 0:
            new[i] = unnormalized / z
        else:
            new[i] = 0.0
            logger.warning("channel %s has no mass after message passing; left empty", label)
    return maps.with_data(new)


def run_passing(maps, graph, iterations=None):
    iterations = graph.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("message passing needs at least one iteration")
    for t in range(iterations):
        maps = pass_once(maps, graph)
        logger.debug("message passing iteration %d/%d done", t + 1, iterations)
    return maps


def flagged_channels(maps):
    """Labels whose channel carries no mass."""
    sums = maps.data.sum(axis=(1, 2, 3))
    return [label for label, s in zip(maps.labels, sums) if not s > 0]


def write_kernel_bundle(graph, path):
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    edges = graph.edges()
    fields = {
        "FORMAT": "vertebra-kernels",
        "VERSION": BUNDLE_VERSION,
        "LABELS": ",".join(graph.labels),
        "ALPHA": repr(float(graph.alpha)),
        "ITERATIONS": graph.iterations,
        "EDGE_COUNT": len(edges),
    }
    payload = []
    for n, (source, target) in enumerate(edges):
        k = graph.kernel(source, target)
        fields[f"EDGE_{n}"] = " ".join([source, target] + [str(s) for s in k.weights.shape] + [str(a) for a in k.anchor])
        payload.append(k.weights.ravel())
    write_header(path, dict(fields, DTYPE="float32", BYTE_ORDER="little", DATA_FILE=raw_path.name))
    write_float32_payload(raw_path, np.concatenate(payload) if payload else np.zeros(0))
    return path


def read_kernel_bundle(path):
    path = Path(path)
    fields = read_header(path, required=("FORMAT", "LABELS", "ALPHA", "ITERATIONS", "EDGE_COUNT", "DATA_FILE"))
    if fields["FORMAT"] != "vertebra-kernels":
        raise MalformedHeaderError(f"{path}: not a kernel bundle manifest")
    try:
        count = int(fields["EDGE_COUNT"])
        specs = []
        for n in range(count):
            parts = (fields.get(f"EDGE_{n}") or "").split()
            if len(parts) != 8:
                raise MalformedHeaderError(f"{path}: EDGE_{n} must be 'source target nx ny nz ax ay az'")
            shape = tuple(int(v) for v in parts[2:5])
            anchor = tuple(int(v) for v in parts[5:8])
            if anchor != tuple(s // 2 for s in shape):
                raise MalformedHeaderError(f"{path}: EDGE_{n} anchor must be the kernel centre")
            specs.append((parts[0], parts[1], shape))
        alpha = float(fields["ALPHA"])
        iterations = int(fields["ITERATIONS"])
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: {e}") from e
    payload = read_float32_payload(path.parent / fields["DATA_FILE"], sum(int(np.prod(s)) for _, _, s in specs))
    kernels, offset = {}, 0
    for source, target, shape in specs:
        n = int(np.prod(shape))
        kernels[(source, target)] = DisplacementKernel(payload[offset:offset + n].astype(float).reshape(shape))
        offset += n
    try:
        return ChainGraph(tuple(fields["LABELS"].split(",")), kernels, alpha, iterations)
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: {e}") from e


def bridge_presence(present):
    """Presence after passing: a missing label flanked by two present neighbours counts as present."""
    flags = [bool(f) for f in present]
    out = list(flags)
    for i in range(1, len(flags) - 1):
        if not flags[i] and flags[i - 1] and flags[i + 1]:
            out[i] = True
    return out
