"""Desk-scale deep image-to-image network: encoder-decoder with skip concatenation and deep supervision.

Layout for L levels with widths w[0..L-1]:

    enc{l}     3x3x3 conv + ReLU at resolution l, followed by 2x2x2 max pooling
    bottom     3x3x3 conv + ReLU at resolution L
    dec{l}     upsample x2, concatenate enc{l} features, 3x3x3 conv + ReLU   (l = L-1 .. 0)
    branch{l}  1x1x1 conv to M channels on dec{l}, upsampled by 2**l
    final      1x1x1 conv over ReLU(concat(branches)), deepest branch first
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .errors import MalformedHeaderError, ShapeError
from .headers import parse_numbers, read_float32_payload, read_header, write_float32_payload, write_header
from .volume import HeatmapStack

logger = logging.getLogger(__name__)

MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    labels: tuple
    widths: tuple = (8, 16)
    levels: int = 2
    in_channels: int = 1
    learning_rate: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.levels < 1:
            raise ValueError("the network needs at least one encoder level")
        if len(self.widths) != self.levels or min(self.widths) < 1:
            raise ValueError(f"need {self.levels} positive channel widths, got {self.widths}")
        if not self.labels:
            raise ValueError("the network needs at least one output label")
        if self.in_channels != 1:
            raise ValueError("only single-channel input volumes are supported")

    @property
    def out_channels(self):
        return len(self.labels)

    def layer_shapes(self):
        """Kernel shapes in declared parameter order."""
        w, m = self.widths, self.out_channels
        shapes = {}
        for l in range(self.levels):
            shapes[f"enc{l}"] = (w[l], self.in_channels if l == 0 else w[l - 1], 3, 3, 3)
        shapes["bottom"] = (w[-1], w[-1], 3, 3, 3)
        below = w[-1]
        for l in reversed(range(self.levels)):
            shapes[f"dec{l}"] = (w[l], below + w[l], 3, 3, 3)
            below = w[l]
        for l in reversed(range(self.levels)):
            shapes[f"branch{l}"] = (m, w[l], 1, 1, 1)
        shapes["final"] = (m, self.levels * m, 1, 1, 1)
        return shapes

    def check_input(self, dims):
        step = 2**self.levels
        if any(d % step for d in dims):
            raise ShapeError(f"input dims {tuple(dims)} must be divisible by {step}")


@dataclass(eq=False)
class NetworkParams:
    spec: NetworkSpec
    kernels: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.spec.layer_shapes().items():
            if self.kernels[name].shape != shape or self.biases[name].shape != (shape[0],):
                raise ShapeError(f"layer {name}: expected kernel {shape}")

    def copy(self):
        return NetworkParams(
            self.spec,
            {k: v.copy() for k, v in self.kernels.items()},
            {k: v.copy() for k, v in self.biases.items()},
        )

    def flat(self):
        parts = []
        for name in self.spec.layer_shapes():
            parts += [self.kernels[name].ravel(), self.biases[name].ravel()]
        return np.concatenate(parts)

    def all_finite(self):
        return bool(np.isfinite(self.flat()).all())


def init_params(spec):
    """Kernels and biases uniform in +-1/sqrt(fan_in), seeded."""
    rng = np.random.default_rng(spec.seed)
    kernels, biases = {}, {}
    for name, shape in spec.layer_shapes().items():
        bound = 1.0 / np.sqrt(np.prod(shape[1:]))
        kernels[name] = rng.uniform(-bound, bound, size=shape)
        biases[name] = rng.uniform(-bound, bound, size=shape[0])
    return NetworkParams(spec, kernels, biases)


def zero_params(spec):
    shapes = spec.layer_shapes()
    return NetworkParams(
        spec,
        {name: np.zeros(shape) for name, shape in shapes.items()},
        {name: np.zeros(shape[0]) for name, shape in shapes.items()},
    )


def _conv(params, name, x, cache):
    cache[name] = x
    return layers.conv3d_forward(x, params.kernels[name], params.biases[name])


def forward_arrays(params, x):
    """Run the network on a (1, nx, ny, nz) array; returns (branches, final, cache)."""
    spec = params.spec
    x = np.asarray(x, dtype=float)
    if x.ndim != 4 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"input must be ({spec.in_channels}, nx, ny, nz), got {x.shape}")
    spec.check_input(x.shape[1:])
    cache = {"input": x}
    skips = []
    h = x
    for l in range(spec.levels):
        pre = _conv(params, f"enc{l}", h, cache)
        cache[f"enc{l}_pre"] = pre
        skip = layers.relu(pre)
        skips.append(skip)
        cache[f"pool{l}_in"] = skip
        h = layers.maxpool2(skip)
    pre = _conv(params, "bottom", h, cache)
    cache["bottom_pre"] = pre
    h = layers.relu(pre)
    branches = []
    for l in reversed(range(spec.levels)):
        joined = layers.concat_channels(layers.upsample2(h), skips[l])
        pre = _conv(params, f"dec{l}", joined, cache)
        cache[f"dec{l}_pre"] = pre
        h = layers.relu(pre)
        branch = _conv(params, f"branch{l}", h, cache)
        branches.append(layers.upsample(branch, l))
    stacked = branches[0]
    for b in branches[1:]:
        stacked = layers.concat_channels(stacked, b)
    cache["final_pre"] = stacked
    final = _conv(params, "final", layers.relu(stacked), cache)
    return branches, final, cache


def backward_arrays(params, cache, grad_branches, grad_final):
    """Parameter gradients given upstream gradients on every branch output and the final output."""
    spec = params.spec
    m = spec.out_channels
    gk, gb = {}, {}

    def conv_back(name, grad):
        gx, gk[name], gb[name] = layers.conv3d_backward(grad, cache[name], params.kernels[name])
        return gx

    g_stacked = layers.relu_backward(conv_back("final", grad_final), cache["final_pre"])
    grad_skips = {}
    grad_h = None
    # Decoder in reverse execution order: dec0 first, its input gradient feeds dec1, ...
    for l in range(spec.levels):
        i = spec.levels - 1 - l
        g_branch = grad_branches[i] + g_stacked[i * m:(i + 1) * m]
        g_branch = layers.upsample_backward(g_branch, l)
        g_dec = conv_back(f"branch{l}", g_branch)
        if grad_h is not None:
            g_dec = g_dec + grad_h
        g_joined = conv_back(f"dec{l}", layers.relu_backward(g_dec, cache[f"dec{l}_pre"]))
        below = params.kernels[f"dec{l}"].shape[1] - spec.widths[l]
        g_up, grad_skips[l] = layers.split_channels(g_joined, below)
        grad_h = layers.upsample2_backward(g_up)
    # grad_h is now the gradient on the bottom block's ReLU output
    g = conv_back("bottom", layers.relu_backward(grad_h, cache["bottom_pre"]))
    for l in reversed(range(spec.levels)):
        g = layers.maxpool2_backward(g, cache[f"pool{l}_in"]) + grad_skips[l]
        g = conv_back(f"enc{l}", layers.relu_backward(g, cache[f"enc{l}_pre"]))
    return gk, gb


def _as_stack(array, labels, volume):
    return HeatmapStack(labels, array, volume.spacing, volume.origin)


def forward(params, volume):
    """Branch outputs (deepest first) and the final output as heatmap stacks."""
    branches, final, _ = forward_arrays(params, volume.data[None])
    labels = params.spec.labels
    return [_as_stack(b, labels, volume) for b in branches], _as_stack(final, labels, volume)


def _output_loss(output, target):
    """Per channel mean over voxels of the squared error, summed over channels."""
    diff = output - target
    return float(np.mean(diff**2, axis=(1, 2, 3)).sum()), 2.0 * diff / np.prod(diff.shape[1:])


def _data(x):
    return x.data if isinstance(x, HeatmapStack) else np.asarray(x, dtype=float)


def loss_total(branch_outputs, final_output, target):
    """Sum over branches and the final output of the per-voxel mean squared error."""
    t = _data(target)
    total = 0.0
    for out in list(branch_outputs) + [final_output]:
        out = _data(out)
        if out.shape != t.shape:
            raise ShapeError(f"output shape {out.shape} does not match target {t.shape}")
        total += _output_loss(out, t)[0]
    return total


def gradients(params, volume, target):
    """Loss and parameter gradients for one (volume, target stack) sample."""
    t = _data(target)
    branches, final, cache = forward_arrays(params, volume.data[None])
    if final.shape != t.shape:
        raise ShapeError(f"output shape {final.shape} does not match target {t.shape}")
    loss = 0.0
    grad_branches = []
    for b in branches:
        value, grad = _output_loss(b, t)
        loss += value
        grad_branches.append(grad)
    value, grad_final = _output_loss(final, t)
    loss += value
    gk, gb = backward_arrays(params, cache, grad_branches, grad_final)
    return loss, gk, gb


def _header_fields(spec, payload_name):
    return {
        "FORMAT": "vertebra-network",
        "VERSION": MODEL_VERSION,
        "LABELS": ",".join(spec.labels),
        "WIDTHS": ",".join(str(w) for w in spec.widths),
        "LEVELS": spec.levels,
        "IN_CHANNELS": spec.in_channels,
        "LEARNING_RATE": repr(float(spec.learning_rate)),
        "SEED": spec.seed,
        "LAYERS": ",".join(spec.layer_shapes()),
        "DTYPE": "float32",
        "BYTE_ORDER": "little",
        "DATA_FILE": payload_name,
    }


def write_model(params, path):
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    write_header(path, _header_fields(params.spec, raw_path.name))
    write_float32_payload(raw_path, params.flat())
    logger.info("saved network (%d parameters) to %s", params.flat().size, path)
    return path


def read_model(path):
    path = Path(path)
    fields = read_header(path, required=("FORMAT", "VERSION", "LABELS", "WIDTHS", "LEVELS", "DATA_FILE"))
    if fields["FORMAT"] != "vertebra-network":
        raise MalformedHeaderError(f"{path}: not a network model header")
    if fields["VERSION"] != str(MODEL_VERSION):
        raise MalformedHeaderError(f"{path}: unsupported model version {fields['VERSION']}")
    try:
        spec = NetworkSpec(
            labels=tuple(fields["LABELS"].split(",")),
            widths=parse_numbers(fields, "WIDTHS", None, int, path),
            levels=int(fields["LEVELS"]),
            in_channels=int(fields.get("IN_CHANNELS") or 1),
            learning_rate=float(fields.get("LEARNING_RATE") or 1e-2),
            seed=int(fields.get("SEED") or 0),
        )
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: {e}") from e
    if fields.get("LAYERS") and fields["LAYERS"].split(",") != list(spec.layer_shapes()):
        raise MalformedHeaderError(f"{path}: layer list does not match the declared architecture")
    shapes = spec.layer_shapes()
    count = sum(int(np.prod(s)) + s[0] for s in shapes.values())
    payload = read_float32_payload(path.parent / fields["DATA_FILE"], count).astype(float)
    kernels, biases, offset = {}, {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        kernels[name] = payload[offset:offset + n].reshape(shape)
        offset += n
        biases[name] = payload[offset:offset + shape[0]].copy()
        offset += shape[0]
    return NetworkParams(spec, kernels, biases)
