"""Layer primitives of the image-to-image network, each with its backward pass.

Feature stacks are arrays shaped (channels, nx, ny, nz) for a single sample.
Convolutions are cross-correlations with stride 1 and zero padding that
keeps the spatial size.
"""
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def _check_stack(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (channels, nx, ny, nz), got shape {x.shape}")


def _check_kernel(x, kernel, bias):
    _check_stack(x)
    if kernel.ndim != 5 or len(set(kernel.shape[2:])) != 1 or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be (out, in, k, k, k) with odd k, got {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")


def _windows(x, k):
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    return sliding_window_view(padded, (k, k, k), axis=(1, 2, 3))


def conv3d_forward(x, kernel, bias):
    """out[o] = bias[o] + sum_c correlate(x[c], kernel[o, c]); spatial size preserved."""
    x = np.asarray(x, dtype=float)
    _check_kernel(x, kernel, bias)
    k = kernel.shape[2]
    if k == 1:
        out = np.tensordot(kernel[:, :, 0, 0, 0], x, axes=([1], [0]))
    else:
        # (in, X, Y, Z, k, k, k) x (out, in, k, k, k) -> (X, Y, Z, out)
        out = np.moveaxis(np.tensordot(_windows(x, k), kernel, axes=([0, 4, 5, 6], [1, 2, 3, 4])), -1, 0)
    return out + bias[:, None, None, None]


def conv3d_backward(grad_out, x, kernel):
    """Gradients of conv3d_forward with respect to input, kernel and bias."""
    x = np.asarray(x, dtype=float)
    _check_kernel(x, kernel, None)
    expected = (kernel.shape[0],) + x.shape[1:]
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient must have shape {expected}, got {grad_out.shape}")
    k = kernel.shape[2]
    grad_bias = grad_out.sum(axis=(1, 2, 3))
    if k == 1:
        w = kernel[:, :, 0, 0, 0]
        grad_kernel = np.tensordot(grad_out, x, axes=([1, 2, 3], [1, 2, 3]))[:, :, None, None, None]
        grad_in = np.tensordot(w, grad_out, axes=([0], [0]))
        return grad_in, grad_kernel, grad_bias
    grad_kernel = np.tensordot(grad_out, _windows(x, k), axes=([1, 2, 3], [1, 2, 3]))
    flipped = kernel[:, :, ::-1, ::-1, ::-1]
    grad_in = np.moveaxis(np.tensordot(_windows(grad_out, k), flipped, axes=([0, 4, 5, 6], [0, 2, 3, 4])), -1, 0)
    return grad_in, grad_kernel, grad_bias


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _check_even(x):
    _check_stack(x)
    if any(n % 2 for n in x.shape[1:]):
        raise ShapeError(f"max pooling needs even spatial dims, got {x.shape[1:]}")


def _blocks(x):
    c, nx, ny, nz = x.shape
    b = x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
    return b.reshape(c, nx // 2, ny // 2, nz // 2, 8)


def maxpool2(x):
    """2x2x2 max pooling with stride 2."""
    x = np.asarray(x, dtype=float)
    _check_even(x)
    return _blocks(x).max(axis=-1)


def maxpool2_backward(grad_out, x):
    """Route each window's gradient to its first maximal element."""
    _check_even(x)
    blocks = _blocks(x)
    winner = blocks.argmax(axis=-1)
    mask = np.zeros_like(blocks)
    np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
    grads = mask * grad_out[..., None]
    c, hx, hy, hz = grad_out.shape
    grads = grads.reshape(c, hx, hy, hz, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
    return grads.reshape(x.shape)


@lru_cache(maxsize=64)
def linear_upsample_matrix(n):
    """(2n, n) weights of half-voxel-centred linear interpolation by a factor 2.

    Output sample o reads the input at s = (o + 0.5) / 2 - 0.5, clamped to [0, n - 1],
    with weights (1 - t, t) on floor(s) and floor(s) + 1 where t = s - floor(s).
    """
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        s = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n - 1)
        t = s - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m


def upsample2(x):
    """Trilinear upsampling by 2 along every spatial axis."""
    x = np.asarray(x, dtype=float)
    _check_stack(x)
    _, nx, ny, nz = x.shape
    y = np.einsum("ai,cijk->cajk", linear_upsample_matrix(nx), x)
    y = np.einsum("bj,cajk->cabk", linear_upsample_matrix(ny), y)
    return np.einsum("gk,cabk->cabg", linear_upsample_matrix(nz), y)


def upsample2_backward(grad_out):
    _, mx, my, mz = grad_out.shape
    g = np.einsum("gk,cabg->cabk", linear_upsample_matrix(mz // 2), grad_out)
    g = np.einsum("bj,cabk->cajk", linear_upsample_matrix(my // 2), g)
    return np.einsum("ai,cajk->cijk", linear_upsample_matrix(mx // 2), g)


def upsample(x, levels):
    for _ in range(levels):
        x = upsample2(x)
    return x


def upsample_backward(grad_out, levels):
    for _ in range(levels):
        grad_out = upsample2_backward(grad_out)
    return grad_out


def concat_channels(a, b):
    """Channels of a followed by channels of b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_stack(a, "first stack")
    _check_stack(b, "second stack")
    if b.shape[0] == 0:
        return a
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate spatial dims {a.shape[1:]} and {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def split_channels(grad, first):
    return grad[:first], grad[first:]
