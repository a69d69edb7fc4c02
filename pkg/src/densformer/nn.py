"""Neural building blocks: convolutions, linear, layer norm, softmax, GELU.

All functions take and return :class:`~densformer.engine.Tensor` and record
exact analytic backward passes on the active tape.  Spatial tensors are laid
out NCHW; "same" 3x3 convolutions reflect-pad so spatial size is preserved
without darkening borders.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .engine import Tensor, accumulate, custom_op, pad_reflect

SQRT_HALF = float(np.sqrt(0.5))
INV_SQRT_TWO_PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _same_reflect(x: Tensor, k: int) -> Tensor:
    if k == 1:
        return x
    p = (k - 1) // 2
    return pad_reflect(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of NCHW input with [Cout, Cin, kH, kW] weight.

    "same" padding reflects the borders, so output spatial size equals the
    input's.  Gradients are exact for input, weight and bias.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and [Cout,Cin,kH,kW] weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError("conv2d: only square kernels supported")
    if padding == "same":
        x = _same_reflect(x, weight.shape[2])
    elif padding != "valid":
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    return _conv2d_valid(x, weight, bias)


def _conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    h_out, w_out = h - kh + 1, w - kw + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")

    # im2col: one BLAS matmul instead of a 6-deep loop nest
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # [N,C,Ho,Wo,kh,kw]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c_in * kh * kw
    )
    w_mat = weight.data.reshape(c_out, -1)
    out_mat = cols @ w_mat.T
    if bias is not None:
        out_mat = out_mat + bias.data
    out_data = out_mat.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        accumulate(weight, (g_mat.T @ cols).reshape(weight.data.shape))
        if bias is not None:
            accumulate(bias, g_mat.sum(axis=0))
        if x.requires_grad:
            d_cols = (g_mat @ w_mat).reshape(n, h_out, w_out, c_in, kh, kw)
            dx = np.zeros_like(x.data)
            for u in range(kh):
                for v in range(kw):
                    dx[:, :, u:u + h_out, v:v + w_out] += d_cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            accumulate(x, dx)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op("conv2d", out_data, inputs, backward_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Per-channel stride-1 convolution; weight is [C, 1, kH, kW].

    Each output channel depends only on its own input channel.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError("depthwise_conv2d expects NCHW input and [C,1,kH,kW] weight")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"depthwise_conv2d: channel mismatch {x.shape[1]} vs {weight.shape[0]}")
    if padding == "same":
        x = _same_reflect(x, weight.shape[2])
    elif padding != "valid":
        raise ValueError(f"depthwise_conv2d: unknown padding {padding!r}")

    n, c, h, w = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    h_out, w_out = h - kh + 1, w - kw + 1
    taps = weight.data[:, 0]  # [C, kh, kw]

    out_data = np.zeros((n, c, h_out, w_out), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out_data += x.data[:, :, u:u + h_out, v:v + w_out] * taps[:, u, v][None, :, None, None]
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def backward_fn(g):
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for u in range(kh):
                for v in range(kw):
                    dw[:, 0, u, v] = (g * x.data[:, :, u:u + h_out, v:v + w_out]).sum(axis=(0, 2, 3))
            accumulate(weight, dw)
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for u in range(kh):
                for v in range(kw):
                    dx[:, :, u:u + h_out, v:v + w_out] += g * taps[:, u, v][None, :, None, None]
            accumulate(x, dx)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op("depthwise_conv2d", out_data, inputs, backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W (+ b) over the trailing axis; works for any leading shape."""
    if weight.ndim != 2:
        raise ValueError("linear expects a 2-D weight")
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: trailing dim {x.shape[-1]} vs weight rows {weight.shape[0]}")
    out_data = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError("linear: bias shape mismatch")
        out_data = out_data + bias.data

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, g @ weight.data.T)
        g_mat = g.reshape(-1, g.shape[-1])
        x_mat = x.data.reshape(-1, x.data.shape[-1])
        accumulate(weight, x_mat.T @ g_mat)
        if bias is not None:
            accumulate(bias, g_mat.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op("linear", out_data, inputs, backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm: affine params must match the last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = x_hat * gamma.data + beta.data

    def backward_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        accumulate(gamma, (g * x_hat).sum(axis=reduce_axes))
        accumulate(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            d_hat = g * gamma.data
            m1 = d_hat.mean(axis=-1, keepdims=True)
            m2 = (d_hat * x_hat).mean(axis=-1, keepdims=True)
            accumulate(x, inv_std * (d_hat - m1 - x_hat * m2))

    return custom_op("layer_norm", out_data, (x, gamma, beta), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis; rows sum to one."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        accumulate(x, out_data * (g - inner))

    return custom_op("softmax", out_data, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * SQRT_HALF))
    out_data = x.data * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * INV_SQRT_TWO_PI
        accumulate(x, g * (cdf + x.data * pdf))

    return custom_op("gelu", out_data, (x,), backward_fn)
