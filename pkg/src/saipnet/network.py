"""Model assembly, hybrid loss, optimizer, schedule, and checkpoints.

The decoder walks the pyramid top-down: each level fuses the encoder skip
with the running decoder feature (spectral fusion, or a plain upsample-add
when ablated) and refines it with a dilated-context block.  The stem's
high-frequency features join at the top level before the classification
head, which is upsampled 4x back to image resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Module, Tensor, exp, gradients, log
from .ops import Conv2d, bilinear_resize
from .encoder import ConvEncoder, Encoder, EncoderConfig
from .saff import SaffBlock
from .cdc import Cdc, UpsampleBlock
from .stem import LhpfStem


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 4
    base_channels: int = 24
    patch_size: int = 4
    blocks_per_stage: tuple = (1, 1, 2, 1)
    heads_per_stage: tuple = (1, 2, 4, 8)
    kv_strides: tuple = (2, 2, 1, 1)
    stem_channels: int = 0  # 0 means: follow base_channels
    cdc_dilations: tuple = (1, 2, 3)
    lam: float = 0.5
    use_saff: bool = True
    use_cdc: bool = True
    use_stem: bool = True
    use_attention_encoder: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"loss weight lam must be in [0, 1], got {self.lam}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.base_channels, self.blocks_per_stage,
                             self.heads_per_stage, self.kv_strides)

    @property
    def stem_width(self) -> int:
        return self.stem_channels or self.base_channels


class PlainFuse(Module):
    """Ablation fusion: 1x1-projected skip plus (upsampled) convolved decoder feature."""

    def __init__(self, c_x: int, c_y: int, rng: np.random.Generator, ratio: int = 2):
        self.ratio = ratio
        self.skip = Conv2d(c_x, c_x, 1, rng)
        self.up = UpsampleBlock(c_y, c_x, rng) if ratio == 2 else Conv2d(c_y, c_x, 3, rng)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        if x.shape[2] != self.ratio * y.shape[2]:
            raise ValueError(f"resolution ratio must be {self.ratio}:1, got {x.shape} vs {y.shape}")
        return self.skip(x) + self.up(y)


class SaipNet(Module):
    """Encoder, three fusion+context decoder levels, stem head, class logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        enc_cfg = cfg.encoder_config()
        if cfg.use_attention_encoder:
            self.encoder = Encoder(enc_cfg, rng, cfg.image_size)
        else:
            self.encoder = ConvEncoder(enc_cfg, rng)
        cs = [enc_cfg.stage_channels(s) for s in range(4)]
        if cfg.use_saff:
            self.fusions = [SaffBlock(cs[l], cs[l + 1], rng) for l in (2, 1, 0)]
        else:
            self.fusions = [PlainFuse(cs[l], cs[l + 1], rng) for l in (2, 1, 0)]
        self.cdcs = [Cdc(cs[l], rng, cfg.cdc_dilations) for l in (2, 1, 0)] if cfg.use_cdc else []
        head_in = cs[0]
        if cfg.use_stem:
            sc = cfg.stem_width
            self.stem = LhpfStem(sc, rng)
            if cfg.use_saff:
                self.head_fuse = SaffBlock(sc, cs[0], rng, ratio=1)
            else:
                self.head_fuse = PlainFuse(sc, cs[0], rng, ratio=1)
            head_in = sc
        else:
            self.stem = None
        self.out_conv = Conv2d(head_in, cfg.num_classes, 1, rng)

    def __call__(self, images, training: bool = False) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        n, c, h, w = x.shape
        x = x * (1.0 / 127.5) - 1.0
        pyramid = self.encoder(x)
        y = pyramid[3]
        for i, l in enumerate((2, 1, 0)):
            y = self.fusions[i](pyramid[l], y)
            if self.cdcs:
                y = self.cdcs[i](y, training)
        if self.stem is not None:
            y = self.head_fuse(self.stem(x), y)
        logits = self.out_conv(y)
        return bilinear_resize(logits, h, w)


def hybrid_loss(logits: Tensor, labels, lam: float) -> Tensor:
    """lam * cross-entropy + (1 - lam) * global Dice over softmax probabilities."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    n, c, h, w = logits.shape
    lab = np.asarray(labels)
    if lab.shape != (n, h, w):
        raise ValueError(f"labels shape {lab.shape} does not match logits {(n, h, w)}")
    bad = (lab < 0) | (lab >= c)
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {int(lab[pos])} out of range [0, {c}) at pixel {pos}")
    onehot = Tensor((lab[:, None] == np.arange(c)[None, :, None, None]).astype(logits.data.dtype))
    # per-pixel max shift is constant w.r.t. the gradient (log-softmax is shift invariant)
    shifted = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    logp = shifted - log(exp(shifted).sum(axis=1, keepdims=True))
    total = float(n * h * w)
    ce = -(logp * onehot).sum() * (1.0 / total)
    probs = exp(logp)
    dice = 1.0 - (probs * onehot).sum() * 2.0 / (probs.sum() + onehot.sum())
    return ce * lam + dice * (1.0 - lam)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 6e-5
    warmup_steps: int = 100
    total_steps: int = 2000
    power: float = 1.0


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to base_lr, then polynomial decay to zero at total_steps."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step > cfg.total_steps:
        return 0.0
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return 0.0
    frac = (step - cfg.warmup_steps) / span
    return cfg.base_lr * (1.0 - frac) ** cfg.power


class TrainState:
    """Model plus Adam moment buffers and the step counter."""

    def __init__(self, model: SaipNet, schedule: ScheduleConfig, lam: float = 0.5):
        self.model = model
        self.schedule = schedule
        self.lam = lam
        params = model.parameters()
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray) -> float:
    """One Adam update on a batch; returns the scalar loss before the update."""
    logits = state.model(Tensor(images), training=True)
    loss = hybrid_loss(logits, labels, state.lam)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    params = state.model.parameters()
    grads = gradients(loss, params)
    t = state.step + 1
    lr = lr_schedule(t, state.schedule)
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    updates = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * (g * g)
        step_arr = (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + ADAM_EPS)
        updates[id(p)] = p.data - np.asarray(lr * step_arr, dtype=p.data.dtype)
    state.model.map_parameters(lambda name, tt: updates.get(id(tt)))
    state.step = t
    return value


# ---------------------------------------------------------------------------
# checkpoint file format: magic, manifest length, manifest, raw blobs

CHECKPOINT_MAGIC = b"SAIPNET1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic/version or an unparseable manifest."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the data a manifest entry promises."""


def save_checkpoint(model: Module, path: str) -> None:
    """Write every named tensor: magic, manifest `name shape dtype offset`, blobs."""
    if isinstance(model, TrainState):
        model = model.model
    lines = []
    blobs = []
    offset = 0
    for name, t in model.named_tensors():
        arr = np.ascontiguousarray(t.data.astype(_DTYPES[t.data.dtype.name], copy=False))
        raw = arr.tobytes()
        shape_s = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape_s} {t.data.dtype.name} {offset}")
        blobs.append(raw)
        offset += len(raw)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(b"".join(blobs))


def load_checkpoint(model: Module, path: str) -> Module:
    """Load a checkpoint into `model` (names and shapes must match exactly)."""
    if isinstance(model, TrainState):
        model = model.model
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointTruncatedError("file shorter than the fixed header")
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    (mlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + mlen:
        raise CheckpointTruncatedError("file ends inside the manifest")
    try:
        manifest = data[12:12 + mlen].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"manifest is not valid UTF-8: {e}") from e
    blob_start = 12 + mlen
    mapping = {}
    for lineno, line in enumerate(manifest.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 4:
            raise CheckpointFormatError(f"manifest line {lineno}: expected 4 fields, got {len(parts)}")
        name, shape_s, dtype_s, off_s = parts
        if dtype_s not in _DTYPES:
            raise CheckpointFormatError(f"manifest line {lineno}: unknown dtype {dtype_s!r}")
        try:
            shape = tuple(int(x) for x in shape_s.split(","))
            off = int(off_s)
        except ValueError as e:
            raise CheckpointFormatError(f"manifest line {lineno}: {e}") from e
        if name in mapping:
            raise CheckpointFormatError(f"manifest line {lineno}: duplicate tensor {name!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(_DTYPES[dtype_s]).itemsize
        if blob_start + off + nbytes > len(data):
            raise CheckpointTruncatedError(f"tensor {name!r} extends past end of file")
        arr = np.frombuffer(data, dtype=_DTYPES[dtype_s], count=count,
                            offset=blob_start + off).reshape(shape)
        # copy out of the file buffer: frombuffer views are unaligned and
        # read-only, and unaligned operands change BLAS rounding
        mapping[name] = arr.copy()
    model.load_tensors(mapping)
    return model
