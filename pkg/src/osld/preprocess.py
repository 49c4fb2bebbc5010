"""Raster transforms for training and test-time preprocessing.

Images are float arrays of shape (H, W, 3) with values in [0, 1].  Every
random transform takes an explicit ``numpy.random.Generator`` so a pipeline
is reproducible from its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import EmptyCropError, FileFormatError

LUMA = np.array([0.299, 0.587, 0.114])

CROP_RRC = "random-resized"
CROP_RANDOM = "random"


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (0.9, 1.1)
    crop_mode: str = CROP_RRC
    flip_prob: float = 0.5
    # (hue, brightness, contrast, saturation)
    jitter: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    grayscale_prob: float = 0.1
    pad_to_square: bool = True
    train_size: int = 32
    test_resize: int = 230
    test_crop: int = 224

    @property
    def random_crop_resize(self) -> int:
        """Pre-crop size for plain random cropping (256 -> 224 at full scale)."""
        return int(math.floor(self.train_size * 256 / 224 + 0.5))

    @classmethod
    def desk(cls, **overrides) -> "AugmentConfig":
        """Small-raster variant whose test crop matches ``train_size``."""
        size = overrides.pop("train_size", 32)
        resize = int(math.floor(size * 230 / 224 + 0.5))
        return cls(train_size=size, test_resize=resize, test_crop=size, **overrides)

    def without_augmentation(self) -> "AugmentConfig":
        return replace(self, flip_prob=0.0, jitter=(0.0, 0.0, 0.0, 0.0), grayscale_prob=0.0)


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


def pad_to_square(img, fill: float = 0.0) -> np.ndarray:
    img = as_image(img)
    h, w, _ = img.shape
    side = max(h, w)
    if h == w:
        return img.copy()
    out = np.full((side, side, 3), fill, dtype=float)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = img
    return out


def _axis_weights(n_in: int, n_out: int):
    # Half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, edge-clamped.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    img = as_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def sample_crop_box(h: int, w: int, scale, ratio, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Pick a (top, left, height, width) window for a random resized crop.

    Area fraction is uniform in ``scale`` and aspect ratio log-uniform in
    ``ratio``; after 10 rejected draws falls back to the largest centred
    window whose aspect lies inside ``ratio``.
    """
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    ch, cw = max(1, min(ch, h)), max(1, min(cw, w))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = as_image(img)
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], cfg.crop_scale, cfg.crop_ratio, rng)
    return resize_bilinear(img[top:top + ch, left:left + cw], cfg.train_size, cfg.train_size)


def random_crop(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Resize to a slightly larger square, then take a random ``train_size`` window."""
    big = cfg.random_crop_resize
    img = resize_bilinear(img, big, big)
    size = cfg.train_size
    top = int(rng.integers(0, big - size + 1))
    left = int(rng.integers(0, big - size + 1))
    return img[top:top + size, left:left + size].copy()


def center_crop(img, size: int) -> np.ndarray:
    img = as_image(img)
    h, w, _ = img.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size].copy()


def horizontal_flip(img, p: float, rng: np.random.Generator) -> np.ndarray:
    img = as_image(img)
    if rng.random() < p:
        return img[:, ::-1].copy()
    return img.copy()


def color_jitter(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation, then hue; each clamped to [0, 1]."""
    hue, bright, contrast, sat = cfg.jitter
    img = as_image(img)
    b = rng.uniform(1 - bright, 1 + bright)
    c = rng.uniform(1 - contrast, 1 + contrast)
    s = rng.uniform(1 - sat, 1 + sat)
    dh = rng.uniform(-hue, hue)

    out = np.clip(img * b, 0.0, 1.0)
    mean = float(np.mean(out @ LUMA))
    out = np.clip((out - mean) * c + mean, 0.0, 1.0)
    gray = (out @ LUMA)[..., None]
    out = np.clip((out - gray) * s + gray, 0.0, 1.0)
    if dh != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def random_grayscale(img, p: float, rng: np.random.Generator) -> np.ndarray:
    img = as_image(img)
    if rng.random() < p:
        gray = np.clip(img @ LUMA, 0.0, 1.0)
        return np.repeat(gray[..., None], 3, axis=2)
    return img.copy()


def train_transform(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = as_image(img)
    if cfg.pad_to_square:
        img = pad_to_square(img)
    if cfg.crop_mode == CROP_RRC:
        img = random_resized_crop(img, cfg, rng)
    elif cfg.crop_mode == CROP_RANDOM:
        img = random_crop(img, cfg, rng)
    else:
        raise ValueError(f"unknown crop mode {cfg.crop_mode!r}")
    img = horizontal_flip(img, cfg.flip_prob, rng)
    if any(cfg.jitter):
        img = color_jitter(img, cfg, rng)
    return random_grayscale(img, cfg.grayscale_prob, rng)


def test_transform(img, cfg: AugmentConfig) -> np.ndarray:
    img = as_image(img)
    if cfg.pad_to_square:
        img = pad_to_square(img)
    img = resize_bilinear(img, cfg.test_resize, cfg.test_resize)
    return center_crop(img, cfg.test_crop)


test_transform.__test__ = False  # not a pytest test


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_box(img, box) -> np.ndarray:
    """Pixels of ``box`` (x1, y1, x2, y2; exclusive upper corner) inside the image."""
    img = as_image(img)
    h, w, _ = img.shape
    x1, y1, x2, y2 = (_half_up(float(v)) for v in box[:4])
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, w), min(y2, h)
    if x2 <= x1 or y2 <= y1:
        raise EmptyCropError(f"box {tuple(box[:4])} does not intersect a {w}x{h} image")
    return img[y1:y2, x1:x2].copy()


def to_network_input(img) -> np.ndarray:
    """Flatten a preprocessed image into a zero-centred feature vector."""
    return (as_image(img) - 0.5).ravel()


# --- portable pixmap I/O -------------------------------------------------------

def write_ppm(path, img) -> None:
    img = as_image(img)
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _tokens(raw: bytes, count: int, pos: int):
    out = []
    n = len(raw)
    while len(out) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError("truncated pixmap header")
        out.append(raw[start:pos])
    return out, pos


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(raw, 4, 0)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad pixmap header") from exc
    if magic == b"P6":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        nbytes = w * h * 3 * np.dtype(dtype).itemsize
        body = raw[pos + 1:pos + 1 + nbytes]
        if len(body) != nbytes:
            raise FileFormatError(f"{path}: truncated pixel data")
        data = np.frombuffer(body, dtype=dtype).reshape(h, w, 3)
    elif magic == b"P3":
        vals, _ = _tokens(raw, w * h * 3, pos)
        data = np.array([int(v) for v in vals]).reshape(h, w, 3)
    else:
        raise FileFormatError(f"{path}: unsupported pixmap type {magic!r}")
    return data.astype(float) / maxval
