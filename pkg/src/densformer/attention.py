"""Window multi-head self-attention with conv-enhanced Q/K/V projections.

Attention runs independently inside non-overlapping MxM spatial windows.
Q, K and V come from one of four projection variants:

  vanilla / lewin           per-pixel linear projection
  vanilla_c / enhanced_lewin  linear, then a depth-separable convolution
                              (3x3 depthwise + 1x1 pointwise), then layer
                              norm over channels

A learnable bias tied to the 2-D offset between query and key positions is
added to the attention logits; a free per-pair table is available as an
alternative reading of the same mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, custom_op, accumulate, gather_rows, pad_reflect, crop, reshape, transpose
from .nn import depthwise_conv2d, conv2d, layer_norm, linear, softmax

VARIANTS = ("vanilla", "vanilla_c", "lewin", "enhanced_lewin")
BIAS_MODES = ("tied", "free")


@dataclass(frozen=True)
class AttentionConfig:
    window: int = 8
    heads: int = 4
    variant: str = "enhanced_lewin"
    bias_mode: str = "tied"

    def __post_init__(self):
        if self.window < 1 or self.heads < 1:
            raise ValueError("window and heads must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"unknown bias mode {self.bias_mode!r}")

    @property
    def uses_conv_qkv(self) -> bool:
        return self.variant in ("vanilla_c", "enhanced_lewin")


def relative_index(window: int) -> np.ndarray:
    """[M^2, M^2] table mapping token pairs to their flattened 2-D offset.

    Entry (i, j) depends only on (row_i - row_j, col_i - col_j), so every
    pair with the same spatial offset shares a bias slot.
    """
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)  # [2, M^2]
    rel = flat[:, :, None] - flat[:, None, :]  # [2, M^2, M^2]
    rel = rel + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def window_partition(x: Tensor, window: int) -> Tensor:
    """[N,C,H,W] -> [N*nw, M^2, C] token windows, row-major in both levels."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"window_partition: {h}x{w} not divisible by window {window}")
    hn, wn = h // window, w // window
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, hn, window, wn, window).transpose(0, 2, 4, 3, 5, 1)
    ).reshape(n * hn * wn, window * window, c)

    def backward_fn(g):
        accumulate(
            x,
            g.reshape(n, hn, wn, window, window, c)
            .transpose(0, 5, 1, 3, 2, 4)
            .reshape(n, c, h, w),
        )

    return custom_op("window_partition", out_data, (x,), backward_fn)


def window_merge(tokens: Tensor, window: int, height: int, width: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    hn, wn = height // window, width // window
    total, tokens_per_window, c = tokens.shape
    if height % window or width % window or tokens_per_window != window * window or total % (hn * wn):
        raise ValueError("window_merge: geometry inconsistent with token tensor")
    n = total // (hn * wn)
    out_data = np.ascontiguousarray(
        tokens.data.reshape(n, hn, wn, window, window, c).transpose(0, 5, 1, 3, 2, 4)
    ).reshape(n, c, height, width)

    def backward_fn(g):
        accumulate(
            tokens,
            g.reshape(n, c, hn, window, wn, window)
            .transpose(0, 2, 4, 3, 5, 1)
            .reshape(total, tokens_per_window, c),
        )

    return custom_op("window_merge", out_data, (tokens,), backward_fn)


def _to_channel_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def _to_channel_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def qkv_project(x: Tensor, params, prefix: str, cfg: AttentionConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Produce Q, K, V maps from an NCHW feature tensor.

    All variants start from a per-pixel linear projection.  The conv
    variants then run each projection through a depth-separable convolution
    and a channel-wise layer norm, preserving spatial size (stride 1).
    """
    outs = []
    for name in ("q", "k", "v"):
        t = _to_channel_last(x)
        t = linear(t, params[f"{prefix}.{name}.weight"])
        t = _to_channel_first(t)
        if cfg.uses_conv_qkv:
            t = depthwise_conv2d(t, params[f"{prefix}.{name}.dw.weight"], params[f"{prefix}.{name}.dw.bias"])
            t = conv2d(t, params[f"{prefix}.{name}.pw.weight"], params[f"{prefix}.{name}.pw.bias"])
            t = _to_channel_last(t)
            t = layer_norm(t, params[f"{prefix}.{name}.norm.gamma"], params[f"{prefix}.{name}.norm.beta"])
            t = _to_channel_first(t)
        outs.append(t)
    return tuple(outs)


def relative_bias_materialize(table: Tensor, index: np.ndarray, window: int, heads: int) -> Tensor:
    """Expand a [(2M-1)^2, heads] offset table to a [heads, M^2, M^2] bias."""
    m2 = window * window
    if table.shape != ((2 * window - 1) ** 2, heads):
        raise ValueError(f"bias table shape {table.shape} inconsistent with window {window}, heads {heads}")
    picked = gather_rows(table, index.ravel())  # [M^4, heads]
    return transpose(reshape(picked, (m2, m2, heads)), (2, 0, 1))


def _split_heads(tokens: Tensor, heads: int) -> Tensor:
    b, t, c = tokens.shape
    return transpose(reshape(tokens, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def window_attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, heads: int) -> Tensor:
    """softmax(QK^T/sqrt(d) + B)V per window and head; no output projection.

    q, k, v are [num_windows, M^2, C] token tensors; windows stay fully
    independent because they live on the batch axis.
    """
    c = q.shape[-1]
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = qh @ transpose(kh, (0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + bias  # [heads, M^2, M^2] broadcast over windows
    return _merge_heads(softmax(scores) @ vh)


def wmsa(x: Tensor, params, prefix: str, cfg: AttentionConfig) -> Tensor:
    """Window multi-head self-attention over an NCHW map, shape preserving.

    Non-divisible extents are reflect-padded to the next window multiple and
    cropped back after the merge.
    """
    n, c, h, w = x.shape
    m = cfg.window
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h or pad_w:
        x_padded = pad_reflect(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    else:
        x_padded = x
    hp, wp = h + pad_h, w + pad_w

    q, k, v = qkv_project(x_padded, params, prefix, cfg)
    qw = window_partition(q, m)
    kw = window_partition(k, m)
    vw = window_partition(v, m)

    if cfg.bias_mode == "tied":
        bias = relative_bias_materialize(params[f"{prefix}.bias.table"], relative_index(m), m, cfg.heads)
    else:
        bias = params[f"{prefix}.bias.table"]  # already [heads, M^2, M^2]

    attended = window_attention_core(qw, kw, vw, bias, cfg.heads)
    projected = linear(attended, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    merged = window_merge(projected, m, hp, wp)
    if pad_h or pad_w:
        merged = crop(merged, ((0, n), (0, c), (0, h), (0, w)))
    return merged


def attention_mult_count(height: int, width: int, channels: int, window: int, mode: str) -> int:
    """Scalar multiplications in the score+apply stages (projections excluded).

    global window covers the whole map: 2 * (HW)^2 * C
    windowed:                           2 * HW * M^2 * C
    """
    if min(height, width, channels, window) <= 0:
        raise ValueError("attention_mult_count: dims must be positive")
    hw = height * width
    if mode == "global":
        return 2 * hw * hw * channels
    if mode == "window":
        return 2 * hw * window * window * channels
    raise ValueError(f"unknown mode {mode!r}")
