"""Full denoising network: transformer layers, residual blocks, dense fusion.

Hierarchy: the network stacks ``groups`` feature groups; each group stacks
``blocks_per_group`` residual blocks and ends with a 3x3 convolution plus a
group-level residual; each block stacks ``layers_per_block`` transformer
layers and ends with its own 3x3 convolution plus a residual.  Group inputs
are wired per the connection scheme (dense fusion of all earlier outputs,
plain sequential, or dense wiring without group residuals).  A long skip
adds the shallow features to the deepest ones, and the final reconstruction
convolution is zero-initialized so a fresh model is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionConfig, wmsa
from .engine import Tensor, concat, reshape, transpose
from .nn import conv2d, depthwise_conv2d, gelu, layer_norm, linear
from .rng import Rng, mix64

CONNECTIONS = ("dense", "local", "cross")
FFN_VARIANTS = ("leff", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    image_channels: int = 3
    groups: int = 4
    blocks_per_group: int = 4
    layers_per_block: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ffn_variant: str = "leff"
    ffn_ratio: int = 4
    connection: str = "dense"
    # feed the feed-forward branch the layer input instead of the attention
    # output (alternate wiring kept for comparison; off by default)
    ffn_from_layer_input: bool = False

    def __post_init__(self):
        if min(self.channels, self.groups, self.blocks_per_group, self.layers_per_block, self.ffn_ratio) < 1:
            raise ValueError("all structural counts must be >= 1")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 (gray) or 3 (color)")
        if self.channels % self.attention.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.attention.heads}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn variant {self.ffn_variant!r}")
        if self.connection not in CONNECTIONS:
            raise ValueError(f"unknown connection scheme {self.connection!r}")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class ParamStore:
    """Named, ordered collection of learnable tensors.

    Iteration order is insertion order, which is fixed by the construction
    walk, so optimizer updates and checkpoints are reproducible.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None


# initialization kinds: how each parameter array is filled
_NORMAL = "normal"          # trunc normal, std 0.02, clipped to +-2 std
_CONV = "conv_uniform"      # uniform +-1/sqrt(fan_in)
_ZEROS = "zeros"
_ONES = "ones"


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Deterministic (name, shape, init_kind) walk of the whole model."""
    c = cfg.channels
    hidden = cfg.ffn_ratio * c
    acfg = cfg.attention
    out: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, c_out, c_in, k, kind=_CONV):
        out.append((f"{name}.weight", (c_out, c_in, k, k), kind))
        out.append((f"{name}.bias", (c_out,), _ZEROS))

    def norm(name):
        out.append((f"{name}.gamma", (c,), _ONES))
        out.append((f"{name}.beta", (c,), _ZEROS))

    conv("head", c, cfg.image_channels, 3)
    for g in range(cfg.groups):
        gp = f"group{g}"
        if cfg.connection in ("dense", "cross") and g >= 1:
            conv(f"{gp}.fuse", c, (g + 1) * c, 1)
        for b in range(cfg.blocks_per_group):
            bp = f"{gp}.block{b}"
            for l in range(cfg.layers_per_block):
                lp = f"{bp}.layer{l}"
                norm(f"{lp}.norm1")
                for proj in ("q", "k", "v"):
                    out.append((f"{lp}.attn.{proj}.weight", (c, c), _NORMAL))
                    if acfg.uses_conv_qkv:
                        out.append((f"{lp}.attn.{proj}.dw.weight", (c, 1, 3, 3), _CONV))
                        out.append((f"{lp}.attn.{proj}.dw.bias", (c,), _ZEROS))
                        out.append((f"{lp}.attn.{proj}.pw.weight", (c, c, 1, 1), _CONV))
                        out.append((f"{lp}.attn.{proj}.pw.bias", (c,), _ZEROS))
                        norm(f"{lp}.attn.{proj}.norm")
                m = acfg.window
                if acfg.bias_mode == "tied":
                    out.append((f"{lp}.attn.bias.table", ((2 * m - 1) ** 2, acfg.heads), _ZEROS))
                else:
                    out.append((f"{lp}.attn.bias.table", (acfg.heads, m * m, m * m), _ZEROS))
                out.append((f"{lp}.attn.proj.weight", (c, c), _NORMAL))
                out.append((f"{lp}.attn.proj.bias", (c,), _ZEROS))
                norm(f"{lp}.norm2")
                out.append((f"{lp}.ffn.fc1.weight", (c, hidden), _NORMAL))
                out.append((f"{lp}.ffn.fc1.bias", (hidden,), _ZEROS))
                if cfg.ffn_variant == "leff":
                    out.append((f"{lp}.ffn.dw.weight", (hidden, 1, 3, 3), _CONV))
                    out.append((f"{lp}.ffn.dw.bias", (hidden,), _ZEROS))
                out.append((f"{lp}.ffn.fc2.weight", (hidden, c), _NORMAL))
                out.append((f"{lp}.ffn.fc2.bias", (c,), _ZEROS))
            conv(f"{bp}.conv", c, c, 3)
        conv(f"{gp}.conv", c, c, 3)
    conv("tail", cfg.image_channels, c, 3, kind=_ZEROS)
    return out


def param_count(cfg: ModelConfig) -> int:
    """Exact learnable-scalar count of the model a config describes."""
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _ in parameter_shapes(cfg))


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Build and deterministically initialize every learnable tensor.

    Linear/attention weights are normal(0, 0.02) clipped at two standard
    deviations, conv weights uniform at +-1/sqrt(fan_in), all biases and
    position-bias tables zero.  The reconstruction conv starts at zero so
    the freshly built network maps any image to itself.
    """
    rng = Rng(mix64(seed))
    store = ParamStore()
    for name, shape, kind in parameter_shapes(cfg):
        size = int(np.prod(shape, dtype=np.int64))
        if kind == _ZEROS:
            data = np.zeros(shape, dtype=np.float64)
        elif kind == _ONES:
            data = np.ones(shape, dtype=np.float64)
        elif kind == _NORMAL:
            std = 0.02
            data = np.clip(rng.normal(size) * std, -2 * std, 2 * std).reshape(shape)
        elif kind == _CONV:
            fan_in = int(np.prod(shape[1:], dtype=np.int64))
            bound = 1.0 / np.sqrt(fan_in)
            data = ((rng.uniform(size) * 2.0 - 1.0) * bound).reshape(shape)
        else:  # pragma: no cover
            raise AssertionError(kind)
        store.add(name, data)
    return store


def _channels_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def _channels_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def _norm_map(x: Tensor, params, prefix: str) -> Tensor:
    """Layer norm over channels of an NCHW map, returned channel-last."""
    return layer_norm(_channels_last(x), params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def leff_forward(tokens: Tensor, geometry: tuple[int, int, int], params, prefix: str) -> Tensor:
    """Locally-enhanced feed-forward on [n, C] tokens with known (N, H, W).

    Expand channels, pass the token map through a 3x3 depthwise conv to mix
    neighboring pixels, then project back down.
    """
    n_batch, height, width = geometry
    if tokens.shape[0] != n_batch * height * width:
        raise ValueError("leff_forward: token count inconsistent with geometry")
    x = gelu(linear(tokens, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    hidden = x.shape[-1]
    x = _channels_first(reshape(x, (n_batch, height, width, hidden)))
    x = depthwise_conv2d(x, params[f"{prefix}.dw.weight"], params[f"{prefix}.dw.bias"])
    x = gelu(reshape(_channels_last(x), (tokens.shape[0], hidden)))
    return linear(x, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def mlp_forward(tokens: Tensor, params, prefix: str) -> Tensor:
    x = gelu(linear(tokens, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return linear(x, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def etransformer_forward(x: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    """One transformer layer: window attention then feed-forward, both residual."""
    n, c, h, w = x.shape
    attended = wmsa(_channels_first(_norm_map(x, params, f"{prefix}.norm1")),
                    params, f"{prefix}.attn", cfg.attention)
    x_attn = attended + x

    ffn_source = x if cfg.ffn_from_layer_input else x_attn
    normed = _norm_map(ffn_source, params, f"{prefix}.norm2")
    tokens = reshape(normed, (n * h * w, c))
    if cfg.ffn_variant == "leff":
        ff = leff_forward(tokens, (n, h, w), params, f"{prefix}.ffn")
    else:
        ff = mlp_forward(tokens, params, f"{prefix}.ffn")
    ff_map = _channels_first(reshape(ff, (n, h, w, c)))
    return ff_map + x_attn


def sformer_block_forward(x: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    y = x
    for l in range(cfg.layers_per_block):
        y = etransformer_forward(y, params, f"{prefix}.layer{l}", cfg)
    y = conv2d(y, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
    return y + x


def sformer_group_forward(x: Tensor, params, prefix: str, cfg: ModelConfig,
                          residual: bool = True) -> Tensor:
    y = x
    for b in range(cfg.blocks_per_group):
        y = sformer_block_forward(y, params, f"{prefix}.block{b}", cfg)
    y = conv2d(y, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
    return y + x if residual else y


def dense_fuse(features: list[Tensor], weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate feature maps along channels and fuse back with a 1x1 conv."""
    if not features:
        raise ValueError("dense_fuse: empty feature list")
    stacked = features[0] if len(features) == 1 else concat(features, axis=1)
    return conv2d(stacked, weight, bias)


def densformer_forward(image: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Denoise an [N, C_in, H, W] image tensor; output has the same shape.

    Shallow features feed every group per the connection scheme; the
    reconstruction conv predicts a correction added to the input image.
    """
    if image.shape[1] != cfg.image_channels:
        raise ValueError(f"expected {cfg.image_channels} image channels, got {image.shape[1]}")
    f0 = conv2d(image, params["head.weight"], params["head.bias"])
    outputs = [f0]
    for g in range(cfg.groups):
        if g == 0 or cfg.connection == "local":
            group_in = outputs[-1]
        else:  # dense or cross wiring: fuse everything seen so far
            group_in = dense_fuse(outputs, params[f"group{g}.fuse.weight"], params[f"group{g}.fuse.bias"])
        outputs.append(sformer_group_forward(group_in, params, f"group{g}", cfg,
                                             residual=cfg.connection != "cross"))
    deep = outputs[-1] + f0
    return image + conv2d(deep, params["tail.weight"], params["tail.bias"])
