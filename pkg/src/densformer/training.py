"""L1 objective, ADAM optimizer, augmentation, training loop, checkpoints.

The loop is bit-reproducible under a fixed seed: every random draw comes
from one SplitMix64 stream consumed in a fixed per-sample order (image
index, patch offsets, noise, augmentation), parameters update in store
order, and checkpoints capture the exact optimizer and stream state so a
resumed run continues identically.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ImageBuffer, add_awgn, from_tensor, psnr, sample_patch, to_tensor
from .engine import Tensor, backward, no_grad, reset_tape
from .model import ModelConfig, ParamStore, densformer_forward, init_params, parameter_shapes
from .rng import Rng, mix64

CHECKPOINT_MAGIC = b"DSF1"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 1
_OPT_M = "opt.m."
_OPT_V = "opt.v."
_OPT_STEP = "opt.step"


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


class TrainingDiverged(Exception):
    """Loss became non-finite; carries the iteration for diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    halve_every: int = 20000
    batch: int = 8
    patch: int = 40
    max_iters: int = 100000
    seed: int = 0
    sigma: float = 25.0
    augment: bool = True
    val_every: int = 500

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if min(self.batch, self.patch, self.max_iters, self.halve_every, self.val_every) < 1:
            raise ValueError("batch, patch, iteration counts must be >= 1")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: halve the base rate every ``halve_every`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * 0.5 ** (iteration // cfg.halve_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @staticmethod
    def for_params(params: ParamStore) -> "AdamState":
        state = AdamState()
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params: ParamStore, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected ADAM update in deterministic parameter order.

    Gradients must be populated for every parameter and are cleared after
    the update.
    """
    state.t += 1
    correction1 = 1.0 - cfg.beta1 ** state.t
    correction2 = 1.0 - cfg.beta2 ** state.t
    for name, tensor in params.items():
        if tensor.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        g = tensor.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        tensor.grad = None


def dihedral(img: ImageBuffer, k: int) -> ImageBuffer:
    """One of the 8 square symmetries: k%4 quarter-turns, flip when k >= 4."""
    if not 0 <= k < 8:
        raise ValueError("dihedral index must be in [0, 8)")
    if img.height != img.width and k % 4 in (1, 3):
        raise ValueError("quarter-turn rotation requires a square patch")
    arr = img.pixels
    if k >= 4:
        arr = arr[:, ::-1, :]
    arr = np.rot90(arr, k % 4, axes=(0, 1))
    return ImageBuffer(np.ascontiguousarray(arr))


def augment(img: ImageBuffer, rng: Rng) -> ImageBuffer:
    """Apply a uniformly chosen dihedral transform; consumes one draw."""
    return dihedral(img, rng.below(8))


def _stack(patches: list[ImageBuffer]) -> Tensor:
    return Tensor(np.stack([p.pixels.transpose(2, 0, 1) for p in patches]))


def _data_stream_seed(seed: int) -> int:
    return mix64(seed ^ 0x5D41402ABC4B2A76)


def _val_noise_seed(seed: int) -> int:
    return mix64(seed ^ 0x76E3F9B1A2C4D518)


@dataclass
class TrainResult:
    params: ParamStore
    opt: AdamState
    rows: list[tuple[int, float, float, float | None]]  # iter, lr, loss, val psnr
    final_val_psnr: float
    noisy_val_psnr: float
    rng_state: int
    next_iter: int


def validation_pair(val_image: ImageBuffer, train_cfg: TrainConfig) -> tuple[ImageBuffer, ImageBuffer]:
    """Clean/noisy validation pair with noise fixed by the config seed."""
    rng = Rng(_val_noise_seed(train_cfg.seed))
    return val_image, add_awgn(val_image, train_cfg.sigma, rng)


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    images: list[ImageBuffer],
    val_image: ImageBuffer | None = None,
    resume: "Checkpoint | None" = None,
    log_fn=None,
) -> TrainResult:
    """Run sample -> noise -> forward -> L1 -> backward -> ADAM for max_iters.

    ``val_image`` defaults to the first training image's top-left patch;
    validation PSNR is computed on a fixed noisy rendition every
    ``val_every`` iterations and at the final step.  Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    if not images:
        raise ValueError("train_loop: empty dataset")
    for img in images:
        if img.channels != model_cfg.image_channels:
            raise ValueError("dataset channel count does not match the model config")

    if resume is not None:
        params, opt = resume.params, resume.opt
        rng = Rng(0)
        rng.state = resume.extras["rng_state"]
        start_iter = resume.extras["next_iter"]
    else:
        params = init_params(model_cfg, train_cfg.seed)
        opt = AdamState.for_params(params)
        rng = Rng(_data_stream_seed(train_cfg.seed))
        start_iter = 0

    if val_image is None:
        first = images[0]
        side = min(train_cfg.patch, first.height, first.width)
        val_image = ImageBuffer(first.pixels[:side, :side].copy())
    val_clean, val_noisy = validation_pair(val_image, train_cfg)
    noisy_val = psnr(val_noisy, val_clean)
    val_noisy_t = to_tensor(val_noisy)

    def run_validation() -> float:
        with no_grad():
            denoised = from_tensor(densformer_forward(val_noisy_t, params, model_cfg))
        return psnr(denoised, val_clean)

    rows: list[tuple[int, float, float, float | None]] = []
    final_val = noisy_val
    for it in range(start_iter, train_cfg.max_iters):
        lr = lr_at(it, train_cfg)
        clean_batch: list[ImageBuffer] = []
        noisy_batch: list[ImageBuffer] = []
        for _ in range(train_cfg.batch):
            img = images[rng.below(len(images))] if len(images) > 1 else images[0]
            clean = sample_patch(img, train_cfg.patch, rng)
            noisy = add_awgn(clean, train_cfg.sigma, rng)
            if train_cfg.augment:
                k = rng.below(8)
                clean = dihedral(clean, k)
                noisy = dihedral(noisy, k)
            clean_batch.append(clean)
            noisy_batch.append(noisy)

        reset_tape()
        pred = densformer_forward(_stack(noisy_batch), params, model_cfg)
        loss = l1_loss(pred, _stack(clean_batch))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss {loss_value} at iteration {it}")
        backward(loss)
        adam_step(params, opt, lr, train_cfg)

        val = None
        if (it + 1) % train_cfg.val_every == 0 or it + 1 == train_cfg.max_iters:
            val = run_validation()
            final_val = val
        row = (it, lr, loss_value, val)
        rows.append(row)
        if log_fn is not None:
            log_fn(row)

    reset_tape()
    return TrainResult(params, opt, rows, final_val, noisy_val, rng.state, train_cfg.max_iters)


# --- checkpoint format ----------------------------------------------------
#
# magic "DSF1", u16 version, u32 config byte length, UTF-8 key=value lines,
# then tensor records: u16 name length, name bytes, u8 dtype (1 = f32),
# u8 rank, rank x u64 dims, raw little-endian data.  Optimizer moments are
# stored as tensors under reserved "opt.m." / "opt.v." prefixes plus a
# scalar "opt.step".  Everything is little-endian.


@dataclass
class Checkpoint:
    params: ParamStore
    opt: AdamState
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    extras: dict


def _config_lines(model_cfg: ModelConfig, train_cfg: TrainConfig, extras: dict) -> str:
    entries: dict[str, object] = {
        "model.channels": model_cfg.channels,
        "model.image_channels": model_cfg.image_channels,
        "model.groups": model_cfg.groups,
        "model.blocks_per_group": model_cfg.blocks_per_group,
        "model.layers_per_block": model_cfg.layers_per_block,
        "model.window": model_cfg.attention.window,
        "model.heads": model_cfg.attention.heads,
        "model.variant": model_cfg.attention.variant,
        "model.bias_mode": model_cfg.attention.bias_mode,
        "model.ffn_variant": model_cfg.ffn_variant,
        "model.ffn_ratio": model_cfg.ffn_ratio,
        "model.connection": model_cfg.connection,
        "model.ffn_from_layer_input": model_cfg.ffn_from_layer_input,
        "train.lr0": train_cfg.lr0,
        "train.beta1": train_cfg.beta1,
        "train.beta2": train_cfg.beta2,
        "train.eps": train_cfg.eps,
        "train.halve_every": train_cfg.halve_every,
        "train.batch": train_cfg.batch,
        "train.patch": train_cfg.patch,
        "train.max_iters": train_cfg.max_iters,
        "train.seed": train_cfg.seed,
        "train.sigma": train_cfg.sigma,
        "train.augment": train_cfg.augment,
        "train.val_every": train_cfg.val_every,
    }
    for key, value in extras.items():
        entries[f"run.{key}"] = value
    return "".join(f"{k}={_format_value(v)}\n" for k, v in sorted(entries.items()))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_config_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"bad config line {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


def _write_tensor(buf: io.BytesIO, name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    arr = np.ascontiguousarray(data, dtype="<f4")
    buf.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(arr.tobytes())


def checkpoint_save(path, params: ParamStore, opt: AdamState,
                    model_cfg: ModelConfig, train_cfg: TrainConfig,
                    extras: dict | None = None) -> None:
    extras = dict(extras or {})
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    config_blob = _config_lines(model_cfg, train_cfg, extras).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    for name, tensor in params.items():
        _write_tensor(buf, name, tensor.data)
    for name in params.names():
        _write_tensor(buf, _OPT_M + name, opt.m[name])
    for name in params.names():
        _write_tensor(buf, _OPT_V + name, opt.v[name])
    _write_tensor(buf, _OPT_STEP, np.asarray(float(opt.t), dtype=np.float32))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def _model_cfg_from(conf: dict[str, str]) -> ModelConfig:
    from .attention import AttentionConfig

    return ModelConfig(
        channels=int(conf["model.channels"]),
        image_channels=int(conf["model.image_channels"]),
        groups=int(conf["model.groups"]),
        blocks_per_group=int(conf["model.blocks_per_group"]),
        layers_per_block=int(conf["model.layers_per_block"]),
        attention=AttentionConfig(
            window=int(conf["model.window"]),
            heads=int(conf["model.heads"]),
            variant=conf["model.variant"],
            bias_mode=conf["model.bias_mode"],
        ),
        ffn_variant=conf["model.ffn_variant"],
        ffn_ratio=int(conf["model.ffn_ratio"]),
        connection=conf["model.connection"],
        ffn_from_layer_input=conf["model.ffn_from_layer_input"] == "true",
    )


def _train_cfg_from(conf: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        lr0=float(conf["train.lr0"]),
        beta1=float(conf["train.beta1"]),
        beta2=float(conf["train.beta2"]),
        eps=float(conf["train.eps"]),
        halve_every=int(conf["train.halve_every"]),
        batch=int(conf["train.batch"]),
        patch=int(conf["train.patch"]),
        max_iters=int(conf["train.max_iters"]),
        seed=int(conf["train.seed"]),
        sigma=float(conf["train.sigma"]),
        augment=conf["train.augment"] == "true",
        val_every=int(conf["train.val_every"]),
    )


def checkpoint_load(path) -> Checkpoint:
    """Restore params, optimizer state and configs; fails fast on damage."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<I")
    conf = _parse_config_lines(reader.take(config_len).decode("utf-8"))
    try:
        model_cfg = _model_cfg_from(conf)
        train_cfg = _train_cfg_from(conf)
    except KeyError as missing:
        raise CheckpointError(f"config key {missing} missing") from None

    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    while not reader.exhausted:
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        dtype_code, rank = reader.unpack("<BB")
        if dtype_code != _DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype_code}")
        shape = tuple(reader.unpack("<Q")[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = data.copy()
        order.append(name)

    expected = {name: shape for name, shape, _ in parameter_shapes(model_cfg)}
    params = ParamStore()
    opt = AdamState()
    for name in order:
        data = tensors[name]
        if name in expected:
            if data.shape != expected[name]:
                raise CheckpointError(f"tensor {name!r} has shape {data.shape}, expected {expected[name]}")
            params.add(name, data)
        elif name.startswith(_OPT_M):
            opt.m[name[len(_OPT_M):]] = data
        elif name.startswith(_OPT_V):
            opt.v[name[len(_OPT_V):]] = data
        elif name == _OPT_STEP:
            opt.t = int(round(float(data)))
        else:
            raise CheckpointError(f"unknown tensor name {name!r}")
    missing = set(expected) - set(params.names())
    if missing:
        raise CheckpointError(f"checkpoint missing parameters, e.g. {sorted(missing)[0]!r}")
    for name in params.names():
        if name not in opt.m or name not in opt.v:
            raise CheckpointError(f"optimizer state missing for {name!r}")

    extras: dict = {}
    for key, value in conf.items():
        if key.startswith("run."):
            extras[key[4:]] = int(value) if value.lstrip("-").isdigit() else value
    return Checkpoint(params, opt, model_cfg, train_cfg, extras)
