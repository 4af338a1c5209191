"""Dense tensor kernels for the relaxation dynamics.

Everything here operates on float64 C-order numpy arrays.  Convolution is
cross-correlation (no kernel flip), pooling truncates trailing partial
windows, and argmax ties resolve to the lowest flat index inside the
window, so outputs are reproducible across platforms.

The batched variants (leading sample axis) are what the dynamics actually
call in the hot loop; the per-sample forms exist because they are the
natural unit for oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_hw(in_hw: tuple[int, int], kernel_hw: tuple[int, int],
                   stride: int, padding: int) -> tuple[int, int]:
    """Output spatial dims of a conv; raises if either collapses below 1."""
    oh = (in_hw[0] + 2 * padding - kernel_hw[0]) // stride + 1
    ow = (in_hw[1] + 2 * padding - kernel_hw[1]) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv output {oh}x{ow} is empty for input {in_hw}, "
            f"kernel {kernel_hw}, stride {stride}, padding {padding}")
    return oh, ow


def _windows(x: np.ndarray, kernel_hw: tuple[int, int], stride: int,
             padding: int) -> np.ndarray:
    """Strided view of all kernel-sized patches: (..., C, OH, OW, KH, KW)."""
    if padding:
        pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
        x = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(x, kernel_hw, axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Cross-correlate one sample (C_in, H, W) with (C_out, C_in, KH, KW)."""
    return conv2d_batch(x[None], kernel, stride, padding)[0]


def conv2d_batch(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"expected (B,C,H,W) and (O,C,KH,KW), got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    conv_output_hw(x.shape[-2:], kernel.shape[-2:], stride, padding)
    win = _windows(x, kernel.shape[-2:], stride, padding)
    return np.einsum("bcxyhw,ochw->boxy", win, kernel, optimize=True)


def conv2d_adjoint(grad_like: np.ndarray, kernel: np.ndarray,
                   in_hw: tuple[int, int], stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Exact adjoint of conv2d as a linear map in the input.

    Satisfies <conv2d(x, k), y> == <x, conv2d_adjoint(y, k, x_hw)> for all
    x, y.  The input spatial shape must be passed in because stride > 1
    makes it unrecoverable from the output shape alone.
    """
    return conv2d_adjoint_batch(grad_like[None], kernel, in_hw, stride, padding)[0]


def conv2d_adjoint_batch(grad_like: np.ndarray, kernel: np.ndarray,
                         in_hw: tuple[int, int], stride: int = 1,
                         padding: int = 0) -> np.ndarray:
    if grad_like.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"expected (B,O,OH,OW) and (O,C,KH,KW), got {grad_like.shape}, {kernel.shape}")
    if grad_like.shape[1] != kernel.shape[0]:
        raise ValueError(f"channel mismatch: grad {grad_like.shape[1]}, kernel {kernel.shape[0]}")
    kh, kw = kernel.shape[-2:]
    oh, ow = conv_output_hw(in_hw, (kh, kw), stride, padding)
    if grad_like.shape[-2:] != (oh, ow):
        raise ValueError(f"grad spatial {grad_like.shape[-2:]} inconsistent with forward output {(oh, ow)}")
    b = grad_like.shape[0]
    h, w = in_hw
    out = np.zeros((b, kernel.shape[1], h + 2 * padding, w + 2 * padding))
    # Scatter each kernel tap back onto the padded input grid; fixed tap
    # order keeps the accumulation bitwise reproducible.
    for i in range(kh):
        for j in range(kw):
            tap = np.einsum("boxy,oc->bcxy", grad_like, kernel[:, :, i, j], optimize=True)
            out[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += tap
    if padding:
        out = out[:, :, padding:h + padding, padding:w + padding]
    return out


def conv2d_kernel_grad(x: np.ndarray, grad_like: np.ndarray,
                       kernel_hw: tuple[int, int], stride: int = 1,
                       padding: int = 0) -> np.ndarray:
    """Adjoint of conv2d in the kernel, summed over the batch.

    Returns d<conv2d(x, k), grad_like>/dk with shape (O, C, KH, KW).
    """
    if x.ndim != 4 or grad_like.ndim != 4:
        raise ValueError(f"expected batched (B,C,H,W) and (B,O,OH,OW), got {x.shape}, {grad_like.shape}")
    win = _windows(x, kernel_hw, stride, padding)
    if win.shape[2:4] != grad_like.shape[-2:]:
        raise ValueError(f"grad spatial {grad_like.shape[-2:]} inconsistent with forward output {win.shape[2:4]}")
    return np.einsum("boxy,bcxyhw->ochw", grad_like, win, optimize=True)


@dataclass(frozen=True)
class PoolIndices:
    """Argmax bookkeeping from one maxpool call, enough to invert it."""

    window: tuple[int, int]
    stride: int
    in_hw: tuple[int, int]
    argmax: np.ndarray  # flat index within each window, shape (..., C, OH, OW)


def maxpool(x: np.ndarray, window: tuple[int, int],
            stride: int) -> tuple[np.ndarray, PoolIndices]:
    """Per-window maximum over the trailing two axes.

    Works on (C, H, W) or (B, C, H, W).  Trailing partial windows are
    dropped; within a window the first (lowest flat index) maximum wins.
    """
    if x.shape[-2] < window[0] or x.shape[-1] < window[1]:
        raise ValueError(f"window {window} larger than input {x.shape[-2:]}")
    win = _windows(x, window, stride, padding=0)
    flat = win.reshape(win.shape[:-2] + (window[0] * window[1],))
    idx = np.argmax(flat, axis=-1)
    pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return pooled, PoolIndices(tuple(window), stride, x.shape[-2:], idx)


def unpool(pooled: np.ndarray, indices: PoolIndices,
           target_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter pooled values back to their argmax positions, zeros elsewhere.

    Overlapping windows accumulate, which makes this the exact adjoint of
    the selection map maxpool froze into `indices`.
    """
    if pooled.shape != indices.argmax.shape:
        raise ValueError(f"pooled shape {pooled.shape} does not match indices {indices.argmax.shape}")
    if tuple(target_shape[-2:]) != indices.in_hw:
        raise ValueError(f"target {target_shape} does not match pooled input {indices.in_hw}")
    wh, ww = indices.window
    s = indices.stride
    oh, ow = pooled.shape[-2:]
    rows = np.arange(oh)[:, None] * s + indices.argmax // ww
    cols = np.arange(ow)[None, :] * s + indices.argmax % ww
    if rows.max() >= target_shape[-2] or cols.max() >= target_shape[-1]:
        raise ValueError("pool indices fall outside the target shape")
    h, w = indices.in_hw
    n_lead = int(np.prod(pooled.shape[:-2], dtype=np.int64))
    buf = np.zeros((n_lead, h * w))
    flat_plane = (rows * w + cols).reshape(n_lead, -1)
    np.add.at(buf, (np.arange(n_lead)[:, None], flat_plane),
              pooled.reshape(n_lead, -1))
    return buf.reshape(target_shape)
