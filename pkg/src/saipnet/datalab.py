"""Synthetic segmentation corpus, noise corruptions, metrics, tiling, PNM I/O.

Scenes are textured grayscale-ish fields with class-specific tints: a
background plus rectangles, ellipses, and thin ribbons.  Regions carry
deliberate high-frequency texture so intra-class consistency is non-trivial,
and ribbons keep boundary handling honest.  All randomness is drawn from a
per-seed generator, so every artifact is reproducible from its seed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

# fixed per-class RGB tints (cycled for large class counts); class 0 is background
_TINTS = np.array([
    [0.0, 0.0, 0.0],
    [10.0, -6.0, -10.0],
    [-8.0, 5.0, 12.0],
    [6.0, 12.0, -9.0],
    [-12.0, -4.0, 8.0],
    [12.0, 2.0, 6.0],
    [-5.0, 11.0, -7.0],
    [4.0, -10.0, 11.0],
])


@dataclass(frozen=True)
class CorpusConfig:
    num_classes: int = 4
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.height % 32 or self.width % 32:
            raise ValueError(f"scene size must be divisible by 32, got {self.height}x{self.width}")


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 255]
    mask: np.ndarray   # (H, W) int64 in [0, num_classes)


def _lowfreq_field(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + ph)
    return (amp / 3.0) * out


def _region_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """High-frequency intra-region texture: tilted checker plus pixel noise."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy, sx = rng.integers(1, 3, size=2)
    phase = rng.integers(0, 2)
    checker = (((yy // sy) + (xx // sx) + phase) % 2) * 2.0 - 1.0
    return rng.uniform(4.0, 9.0) * checker + rng.normal(0.0, 3.0, size=(h, w))


def _shape_mask(rng: np.random.Generator, kind: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    if kind == 0:  # rectangle
        hh = rng.uniform(0.08, 0.22) * h
        ww = rng.uniform(0.08, 0.22) * w
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    if kind == 1:  # ellipse
        ry = rng.uniform(0.08, 0.22) * h
        rx = rng.uniform(0.08, 0.22) * w
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # ribbon: thin band around a line through (cy, cx)
    theta = rng.uniform(0, np.pi)
    thick = rng.uniform(1.2, 2.8)
    dist = np.abs((yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta))
    return dist <= thick


def class_gray_levels(num_classes: int) -> np.ndarray:
    """Mean gray level per class, spread over [40, 200]."""
    return np.linspace(40.0, 200.0, num_classes)


def generate_scene(seed: int, config: CorpusConfig) -> SegSample:
    """Deterministic textured scene: background plus per-class shape instances."""
    rng = np.random.default_rng(seed)
    h, w, c_cls = config.height, config.width, config.num_classes
    grays = class_gray_levels(c_cls)
    mask = np.zeros((h, w), dtype=np.int64)
    gray = grays[0] + _lowfreq_field(rng, h, w, 10.0) + _region_texture(rng, h, w)
    for cls in range(1, c_cls):
        for inst in range(int(rng.integers(1, 4))):
            kind = (cls + inst) % 3
            region = _shape_mask(rng, kind, h, w)
            mask[region] = cls
            tex = grays[cls] + _lowfreq_field(rng, h, w, 8.0) + _region_texture(rng, h, w)
            gray = np.where(region, tex, gray)
    tint = _TINTS[np.arange(c_cls) % len(_TINTS)][mask]  # (H, W, 3)
    image = gray[None] + np.transpose(tint, (2, 0, 1))
    # Sensor noise: additive read noise plus signal-dependent shot noise.
    image = image + rng.normal(0.0, 4.0, size=(3, h, w))
    image = image + image * rng.normal(0.0, 0.05, size=(3, h, w))
    return SegSample(np.clip(image, 0.0, 255.0).astype(np.float32), mask)


def corpus_batch(config: CorpusConfig, seeds) -> tuple:
    """Stack scenes for the given seeds into (images, masks) arrays."""
    samples = [generate_scene(int(s), config) for s in seeds]
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


# ---------------------------------------------------------------------------
# noise corruptions

_NOISE_KINDS = ("gaussian", "salt_pepper", "speckle")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    apply_prob: float = 0.5
    sigma: float = 10.0   # gaussian: gray levels; speckle: multiplicative std
    ratio: float = 0.01   # salt_pepper: fraction of pixels flipped
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}, expected one of {_NOISE_KINDS}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"apply_prob must be in [0, 1], got {self.apply_prob}")


NOISE_PRESETS = {
    "table5-gaussian": NoiseSpec("gaussian", apply_prob=0.5, sigma=10.0),
    "table5-salt-pepper": NoiseSpec("salt_pepper", apply_prob=0.5, ratio=0.01),
    "table5-speckle": NoiseSpec("speckle", apply_prob=0.5, sigma=0.1),
}


def add_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Corrupt a (3, H, W) image on the raw 0..255 scale; clamped afterwards."""
    rng = np.random.default_rng(spec.seed)
    out = np.array(image, dtype=np.float32, copy=True)
    if rng.uniform() >= spec.apply_prob:
        return out
    _, h, w = out.shape
    if spec.kind == "gaussian":
        out = out + rng.normal(0.0, spec.sigma, size=out.shape)
    elif spec.kind == "salt_pepper":
        hit = rng.uniform(size=(h, w)) < spec.ratio
        value = np.where(rng.uniform(size=(h, w)) < 0.5, 0.0, 255.0)
        out = np.where(hit[None], value[None], out)
    else:  # speckle
        out = out * (1.0 + rng.normal(0.0, spec.sigma, size=out.shape))
    return np.clip(out, 0.0, 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[g, p] = number of pixels labeled g and predicted p."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains labels outside [0, {num_classes})")
    flat = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass(frozen=True)
class MetricsReport:
    iou: np.ndarray      # per class, NaN where class absent from gt and pred
    f1: np.ndarray
    present: np.ndarray  # bool per class
    miou: float
    oa: float
    mf1: float


def metrics(counts: np.ndarray) -> MetricsReport:
    """Per-class IoU/F1 and unweighted means over classes present in gt or pred."""
    m = np.asarray(counts, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {m.shape}")
    if (m < 0).any():
        raise ValueError("confusion matrix has negative counts")
    total = int(m.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    iou = np.full(m.shape[0], np.nan)
    f1 = np.full(m.shape[0], np.nan)
    iou[present] = tp[present] / (tp + fp + fn)[present]
    f1[present] = 2.0 * tp[present] / (2.0 * tp + fp + fn)[present]
    return MetricsReport(iou=iou, f1=f1, present=present,
                         miou=float(iou[present].mean()),
                         oa=float(tp.sum() / total),
                         mf1=float(f1[present].mean()))


def metrics_csv(report: MetricsReport) -> str:
    """CSV with per-class rows then mIoU/OA/mF1 summary rows."""
    lines = ["class,iou,f1"]
    for c in range(report.iou.shape[0]):
        if report.present[c]:
            lines.append(f"{c},{report.iou[c]:.6f},{report.f1[c]:.6f}")
    lines.append(f"mIoU,{report.miou:.6f},")
    lines.append(f"OA,{report.oa:.6f},")
    lines.append(f"mF1,{report.mf1:.6f},")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tiling

@dataclass
class Tiling:
    tiles: list            # (C, tile, tile) views, copied
    positions: list        # (row, col) of each tile in the padded frame
    padded_shape: tuple    # (H_pad, W_pad)
    image_shape: tuple     # (H, W) of the original image
    valid: np.ndarray      # (H, W) bool, False only inside padding


def _starts(extent: int, tile: int, stride: int) -> list:
    if extent <= tile:
        return [0]
    out = list(range(0, extent - tile + 1, stride))
    if out[-1] + tile < extent:
        out.append(extent - tile)
    return out


def tile_image(image: np.ndarray, tile_size: int, overlap: int) -> Tiling:
    """Cover an image with overlapping tiles; pads (and masks) if it is small."""
    if tile_size % 32:
        raise ValueError(f"tile size must be divisible by 32, got {tile_size}")
    if not 0 <= overlap < tile_size:
        raise ValueError(f"overlap must be in [0, tile_size), got {overlap}")
    image = np.asarray(image)
    c, h, w = image.shape
    hp, wp = max(h, tile_size), max(w, tile_size)
    padded = image
    if (hp, wp) != (h, w):
        padded = np.zeros((c, hp, wp), dtype=image.dtype)
        padded[:, :h, :w] = image
    valid = np.zeros((h, w), dtype=bool)
    valid[:, :] = True
    stride = tile_size - overlap
    tiles, positions = [], []
    for r in _starts(hp, tile_size, stride):
        for cc in _starts(wp, tile_size, stride):
            tiles.append(padded[:, r:r + tile_size, cc:cc + tile_size].copy())
            positions.append((r, cc))
    return Tiling(tiles, positions, (hp, wp), (h, w), valid)


def stitch(maps, tiling: Tiling) -> np.ndarray:
    """Average per-pixel over overlapping tile maps; crops padding away."""
    if len(maps) != len(tiling.positions):
        raise ValueError(f"got {len(maps)} maps for {len(tiling.positions)} tiles")
    first = np.asarray(maps[0])
    c, t = first.shape[0], first.shape[1]
    hp, wp = tiling.padded_shape
    acc = np.zeros((c, hp, wp), dtype=np.float64)
    hits = np.zeros((hp, wp), dtype=np.float64)
    for m, (r, cc) in zip(maps, tiling.positions):
        acc[:, r:r + t, cc:cc + t] += np.asarray(m, dtype=np.float64)
        hits[r:r + t, cc:cc + t] += 1.0
    out = acc / hits[None]
    h, w = tiling.image_shape
    return out[:, :h, :w].astype(first.dtype)


# ---------------------------------------------------------------------------
# portable pixmaps (P6) and graymaps (P5)

class ImageFormatError(ValueError):
    """Header is not a valid binary PPM/PGM description."""


class ImageDataError(ValueError):
    """Header parsed but the pixel payload is short."""


def write_image(path: str, array: np.ndarray) -> None:
    """(3, H, W) to binary PPM, (H, W) to binary PGM; values clipped to 0..255."""
    arr = np.asarray(array)
    data = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        if data.ndim == 3 and data.shape[0] == 3:
            _, h, w = data.shape
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.transpose(data, (1, 2, 0)).tobytes())
        elif data.ndim == 2:
            h, w = data.shape
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
        else:
            raise ValueError(f"expected (3, H, W) or (H, W), got {arr.shape}")


def _read_header_tokens(f, count: int) -> list:
    """Whitespace/comment-tolerant PNM header tokens after the magic."""
    tokens = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ImageFormatError("header ended early")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok = bytearray()
        while ch and ch not in b" \t\r\n":
            tok += ch
            ch = f.read(1)
        tokens.append(bytes(tok))
    return tokens


def read_image(path: str) -> np.ndarray:
    """Read binary PPM (P6) as (3, H, W) uint8 or PGM (P5) as (H, W) uint8."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P6", b"P5"):
            raise ImageFormatError(f"bad magic {magic!r}, expected P6 or P5")
        try:
            w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        except ValueError as e:
            raise ImageFormatError(f"non-numeric header field: {e}") from e
        if maxval != 255:
            raise ImageFormatError(f"unsupported max value {maxval}, expected 255")
        if w <= 0 or h <= 0:
            raise ImageFormatError(f"bad dimensions {w}x{h}")
        channels = 3 if magic == b"P6" else 1
        need = w * h * channels
        body = f.read(need)
        if len(body) < need:
            raise ImageDataError(f"pixel data short: expected {need} bytes, got {len(body)}")
    flat = np.frombuffer(body, dtype=np.uint8)
    if magic == b"P6":
        return np.transpose(flat.reshape(h, w, 3), (2, 0, 1)).copy()
    return flat.reshape(h, w).copy()
