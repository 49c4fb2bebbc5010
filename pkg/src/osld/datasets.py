"""Dataset manifests, open-set splits and a procedural synthetic logo dataset.

Manifest files are JSON Lines.  Two record types share the file::

    {"type": "canonical", "schema_version": 1, "class_id": 3, "class_name": "logo_0003",
     "split": "train", "paths": ["canonical/c0003_v0.ppm", ...]}
    {"type": "image", "schema_version": 1, "image_id": "c0003_i000", "path": "images/c0003_i000.ppm",
     "split": "train", "width": 64, "height": 64,
     "boxes": [{"x1": 5, "y1": 9, "x2": 30, "y2": 33, "class_id": 3, "canonical_id": "c0003_v0"}]}

Box coordinates are integers with an exclusive upper corner.  Candidate and
detection files use the same box schema plus ``score`` (and, once matched,
``class_id`` / ``confidence``), one ``{"type": "detections"}`` record per image.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import (
    BoxOutOfBoundsError,
    ConfigError,
    DanglingClassError,
    ManifestParseError,
    OpenSetViolationError,
)
from .evaluation import BoundingBox, Detection, iou
from .preprocess import write_ppm
from .sampler import NEGATIVE_ONLY_CLASS

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


# --- manifest -------------------------------------------------------------------

@dataclass(frozen=True)
class GTBox:
    x1: int
    y1: int
    x2: int
    y2: int
    class_id: int
    canonical_id: str | None = None

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.x1, self.y1, self.x2, self.y2)


@dataclass
class ImageRecord:
    image_id: str
    path: str
    split: str
    width: int
    height: int
    boxes: list[GTBox] = field(default_factory=list)


@dataclass
class CanonicalRecord:
    class_id: int
    class_name: str
    paths: list[str]
    split: str | None = None

    def image_ids(self) -> list[str]:
        return [Path(p).stem for p in self.paths]


@dataclass
class DatasetManifest:
    images: list[ImageRecord]
    canonicals: list[CanonicalRecord]
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def canonical_by_class(self) -> dict[int, CanonicalRecord]:
        return {c.class_id: c for c in self.canonicals}

    def class_splits(self) -> dict[int, set[str]]:
        out: dict[int, set[str]] = {}
        for c in self.canonicals:
            if c.split is not None:
                out.setdefault(c.class_id, set()).add(c.split)
        for rec in self.images:
            for b in rec.boxes:
                out.setdefault(b.class_id, set()).add(rec.split)
        return out

    def classes_in_split(self, split: str) -> list[int]:
        return sorted(c for c, s in self.class_splits().items() if split in s)

    def images_in_split(self, split: str | None) -> list[ImageRecord]:
        return [r for r in self.images if split is None or r.split == split]

    def validate(self) -> "DatasetManifest":
        ids = [r.image_id for r in self.images]
        if len(set(ids)) != len(ids):
            raise ManifestParseError("duplicate image_id in manifest")
        classes = [c.class_id for c in self.canonicals]
        if len(set(classes)) != len(classes):
            raise ManifestParseError("duplicate canonical record for a class")
        known = set(classes)
        for rec in self.images:
            if rec.split not in SPLITS:
                raise ManifestParseError(f"{rec.image_id}: unknown split {rec.split!r}")
            for b in rec.boxes:
                if b.class_id not in known:
                    raise DanglingClassError(f"{rec.image_id}: box references unknown class {b.class_id}")
                if not (0 <= b.x1 < b.x2 <= rec.width and 0 <= b.y1 < b.y2 <= rec.height):
                    raise BoxOutOfBoundsError(f"{rec.image_id}: box {(b.x1, b.y1, b.x2, b.y2)} outside image or empty")
        for c in self.canonicals:
            if c.split is not None and c.split not in SPLITS:
                raise ManifestParseError(f"class {c.class_id}: unknown split {c.split!r}")
        for c, splits in self.class_splits().items():
            if len(splits) > 1:
                raise OpenSetViolationError(f"class {c} appears in splits {sorted(splits)}")
        return self


def _require(rec: dict, key: str, kind, lineno: int):
    if key not in rec:
        raise ManifestParseError(f"line {lineno}: missing field {key!r}")
    val = rec[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ManifestParseError(f"line {lineno}: field {key!r} must be an integer")
    if kind is not int and not isinstance(val, kind):
        raise ManifestParseError(f"line {lineno}: field {key!r} has the wrong type")
    return val


def _parse_box(b, lineno: int, with_class: bool = True) -> GTBox:
    if not isinstance(b, dict):
        raise ManifestParseError(f"line {lineno}: box must be an object")
    coords = [_require(b, k, int, lineno) for k in ("x1", "y1", "x2", "y2")]
    cls = _require(b, "class_id", int, lineno) if with_class else b.get("class_id")
    return GTBox(*coords, class_id=cls, canonical_id=b.get("canonical_id"))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    images, canonicals = [], []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestParseError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"line {lineno}: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise ManifestParseError(f"line {lineno}: record must be an object")
        version = rec.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ManifestParseError(f"line {lineno}: unsupported schema_version {version}")
        kind = rec.get("type")
        if kind == "image":
            boxes = _require(rec, "boxes", list, lineno)
            images.append(ImageRecord(
                image_id=_require(rec, "image_id", str, lineno),
                path=_require(rec, "path", str, lineno),
                split=_require(rec, "split", str, lineno),
                width=_require(rec, "width", int, lineno),
                height=_require(rec, "height", int, lineno),
                boxes=[_parse_box(b, lineno) for b in boxes],
            ))
        elif kind == "canonical":
            paths = _require(rec, "paths", list, lineno)
            if not all(isinstance(p, str) for p in paths):
                raise ManifestParseError(f"line {lineno}: paths must be strings")
            split = rec.get("split")
            if split is not None and not isinstance(split, str):
                raise ManifestParseError(f"line {lineno}: split must be a string")
            canonicals.append(CanonicalRecord(
                class_id=_require(rec, "class_id", int, lineno),
                class_name=_require(rec, "class_name", str, lineno),
                paths=list(paths),
                split=split,
            ))
        else:
            raise ManifestParseError(f"line {lineno}: unknown record type {kind!r}")
    return DatasetManifest(images, canonicals, path.parent).validate()


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def manifest_lines(manifest: DatasetManifest) -> list[str]:
    lines = []
    for c in sorted(manifest.canonicals, key=lambda c: c.class_id):
        rec = {"type": "canonical", "schema_version": SCHEMA_VERSION, **asdict(c)}
        if rec["split"] is None:
            del rec["split"]
        lines.append(_dumps(rec))
    for r in manifest.images:
        rec = {"type": "image", "schema_version": SCHEMA_VERSION, **asdict(r)}
        lines.append(_dumps(rec))
    return lines


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text("\n".join(manifest_lines(manifest)) + "\n", encoding="utf-8")


# --- detection / candidate files -------------------------------------------------

def _box_record(d: Detection) -> dict:
    rec = dict(zip(("x1", "y1", "x2", "y2"), (int(v) for v in d.box)))
    rec["score"] = float(d.score)
    if d.class_id is not None:
        rec["class_id"] = int(d.class_id)
        rec["confidence"] = int(math.floor(100.0 * max(0.0, d.score) + 0.5))
    return rec


def write_detections(path, detections: Mapping[str, Sequence[Detection]]) -> None:
    lines = []
    for image_id, dets in detections.items():
        rec = {
            "type": "detections",
            "schema_version": SCHEMA_VERSION,
            "image_id": image_id,
            "boxes": [_box_record(d) for d in dets],
        }
        lines.append(_dumps(rec))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{path}:{lineno}: {exc.msg}") from exc
        if not isinstance(rec, dict) or rec.get("type") != "detections":
            raise ManifestParseError(f"{path}:{lineno}: expected a detections record")
        image_id = _require(rec, "image_id", str, lineno)
        dets = []
        for b in _require(rec, "boxes", list, lineno):
            g = _parse_box(b, lineno, with_class=False)
            score = b.get("score")
            if not isinstance(score, (int, float)) or isinstance(score, bool) or not math.isfinite(score):
                raise ManifestParseError(f"{path}:{lineno}: box needs a finite score")
            dets.append(Detection(g.box, float(score), g.class_id))
        out.setdefault(image_id, []).extend(dets)
    return out


# --- open-set split ---------------------------------------------------------------

def open_set_split(class_ids: Sequence[int], fractions: Sequence[float], seed: int) -> tuple[list[int], ...]:
    """Shuffle classes and cut them into disjoint groups sized by ``fractions``.

    Sizes are floor(f * n), then the remaining round(sum(f) * n) - sum(floors)
    classes go to the largest fractional remainders (earlier split on ties).
    """
    fr = [float(f) for f in fractions]
    if any(f < 0 for f in fr) or sum(fr) > 1 + 1e-9 or sum(fr) <= 0:
        raise ConfigError(f"fractions must be non-negative with 0 < sum <= 1, got {fractions}")
    ids = list(dict.fromkeys(class_ids))
    n = len(ids)
    wanted = sum(1 for f in fr if f > 0)
    if n < wanted:
        raise ConfigError(f"{n} classes cannot fill {wanted} non-empty splits")
    raw = [f * n for f in fr]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    leftover = int(round(sum(fr) * n)) - sum(sizes)
    order = sorted(range(len(fr)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:max(0, leftover)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out, start = [], 0
    for size in sizes:
        out.append(sorted(ids[j] for j in perm[start:start + size]))
        start += size
    empty = [i for i, part in enumerate(out) if not part]
    if empty:
        warnings.warn(f"open_set_split: splits {empty} are empty", stacklevel=2)
    return tuple(out)


# --- synthetic logos --------------------------------------------------------------

SHAPE_KINDS = ("rect", "ellipse", "diamond", "triangle", "ring", "cross")


@dataclass(frozen=True)
class SyntheticConfig:
    train_classes: int = 40
    val_classes: int = 5
    test_classes: int = 10
    instances_per_class: int = 20
    canvas_size: int = 64
    canonical_size: int = 40
    canonical_variants: int = 2
    shapes_per_logo: tuple[int, int] = (2, 5)
    aspect: tuple[float, float] = (0.75, 1.33)
    clutter_density: float = 0.5
    logo_scale: tuple[float, float] = (0.3, 0.6)
    color_shift: float = 0.04
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    translation: float = 1.0
    detector_jitter: float = 0.05
    fp_rate: float = 0.5
    miss_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("train_classes", "val_classes", "test_classes", "instances_per_class", "canonical_variants"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("clutter_density", "translation", "fp_rate", "miss_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.shapes_per_logo
        if not 1 <= lo <= hi:
            raise ConfigError("shapes_per_logo must be an increasing pair >= 1")
        if not 0 < self.aspect[0] <= self.aspect[1]:
            raise ConfigError("aspect range must be positive and increasing")
        if not 0 < self.logo_scale[0] <= self.logo_scale[1] <= 1:
            raise ConfigError("logo_scale must lie in (0, 1]")
        if not 0 <= self.detector_jitter < 0.5:
            raise ConfigError("detector_jitter must lie in [0, 0.5)")
        smallest = self.canvas_size * self.logo_scale[0] / max(1.0, self.aspect[1])
        if smallest < MIN_LOGO_PX or self.canonical_size < MIN_LOGO_PX:
            raise ConfigError(
                f"canvas too small: smallest logo would be {smallest:.1f}px (< {MIN_LOGO_PX}px)"
            )

    @property
    def split_counts(self) -> dict[str, int]:
        return {"train": self.train_classes, "val": self.val_classes, "test": self.test_classes}

    def class_split(self) -> dict[int, str]:
        out, c = {}, 0
        for split, count in self.split_counts.items():
            for _ in range(count):
                out[c] = split
                c += 1
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        d = dict(d)
        for k in ("shapes_per_logo", "aspect", "logo_scale", "rotation_deg"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


MIN_LOGO_PX = 6
_SUPERSAMPLE = 2


@dataclass(frozen=True)
class LogoShape:
    kind: str
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    color: int


@dataclass(frozen=True)
class LogoDesign:
    """Shapes in a logo frame [0, aspect] x [0, 1] plus per-variant palettes."""

    aspect: float
    shapes: tuple[LogoShape, ...]
    palettes: tuple[np.ndarray, ...]


def _rgb(h, s, v) -> np.ndarray:
    return hsv_to_rgb(np.array([h % 1.0, s, v]))


def design_logo(class_id: int, cfg: SyntheticConfig) -> LogoDesign:
    rng = np.random.default_rng([cfg.seed, 0, class_id])
    aspect = float(rng.uniform(*cfg.aspect))
    n = int(rng.integers(cfg.shapes_per_logo[0], cfg.shapes_per_logo[1] + 1))
    base_kind = SHAPE_KINDS[int(rng.integers(3))]
    shapes = [LogoShape(base_kind, aspect / 2, 0.5,
                        aspect / 2 * rng.uniform(0.8, 1.0), 0.5 * rng.uniform(0.8, 1.0), 0.0, 0)]
    for i in range(1, n):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        r = rng.uniform(0.14, 0.32)
        a, b = r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3)
        if aspect > 1:
            a *= rng.uniform(1.0, min(aspect, 2.5))
        # Bounding-circle radius; the shape must fit the frame at any rotation.
        reach = math.hypot(a, b) if kind in ("rect", "cross") else max(a, b)
        shrink = min(1.0, 0.5 / reach, aspect / 2 / reach)
        a, b, reach = a * shrink, b * shrink, reach * shrink
        cx = rng.uniform(min(reach, aspect / 2), max(aspect - reach, aspect / 2))
        cy = rng.uniform(min(reach, 0.5), max(1 - reach, 0.5))
        shapes.append(LogoShape(kind, cx, cy, a, b, float(rng.uniform(0, math.pi)), i))
    hues = rng.uniform(0, 1, size=n)
    sats = rng.uniform(0.55, 1.0, size=n)
    vals = rng.uniform(0.35, 0.95, size=n)
    base = np.stack([_rgb(h, s, v) for h, s, v in zip(hues, sats, vals)])
    palettes = [base]
    for _ in range(1, cfg.canonical_variants):
        dh = rng.uniform(-0.06, 0.06)
        scale = rng.uniform(0.8, 1.0)
        palettes.append(np.stack([_rgb(h + dh, s, v * scale) for h, s, v in zip(hues, sats, vals)]))
    return LogoDesign(aspect, tuple(shapes), tuple(palettes))


def _inside(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "rect":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if kind == "ellipse":
        return u * u + v * v <= 1
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1
    if kind == "triangle":
        return (v >= -1) & (v <= 1) & (np.abs(u) <= (v + 1) / 2)
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1) & (r2 >= 0.3)
    if kind == "cross":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1)) | ((np.abs(u) <= 1) & (np.abs(v) <= 0.35))
    raise ValueError(kind)


def render_logo(
    design: LogoDesign,
    palette: np.ndarray,
    height_px: float,
    angle: float,
    center: tuple[float, float],
    canvas_hw: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise a logo; returns (premultiplied colour, coverage in [0, 1]).

    The logo frame is ``height_px`` tall, rotated by ``angle`` radians about
    its centre which lands on pixel coordinate ``center`` (x, y).
    """
    h, w = canvas_hw
    ss = _SUPERSAMPLE
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(h)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(w)[:, None] + offs[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    dx, dy = px - center[0], py - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / height_px + design.aspect / 2
    v = (-s * dx + c * dy) / height_px + 0.5

    color = np.zeros(px.shape + (3,))
    hit = np.zeros(px.shape, dtype=bool)
    for shp in design.shapes:
        cu, cv = u - shp.cx, v - shp.cy
        ca, sa = math.cos(shp.angle), math.sin(shp.angle)
        lu = (ca * cu + sa * cv) / shp.a
        lv = (-sa * cu + ca * cv) / shp.b
        m = _inside(shp.kind, lu, lv)
        color[m] = palette[shp.color]
        hit |= m
    cov = hit.reshape(h, ss, w, ss).mean(axis=(1, 3))
    col = color.reshape(h, ss, w, ss, 3).sum(axis=(1, 3)) / (ss * ss)
    return col, cov


def composite(background: np.ndarray, color: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    return background * (1.0 - coverage[..., None]) + color


def mask_box(coverage: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(coverage.any(axis=1))
    cols = np.flatnonzero(coverage.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def render_canonical(design: LogoDesign, variant: int, cfg: SyntheticConfig) -> np.ndarray:
    margin = 2
    hpx = cfg.canonical_size
    h = hpx + 2 * margin
    w = int(round(design.aspect * hpx)) + 2 * margin
    col, cov = render_logo(design, design.palettes[variant], hpx, 0.0, (w / 2, h / 2), (h, w))
    return np.clip(composite(np.ones((h, w, 3)), col, cov), 0.0, 1.0)


def _clutter_design(rng: np.random.Generator) -> LogoDesign:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    shape = LogoShape(kind, 0.5, 0.5, rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.5), float(rng.uniform(0, math.pi)), 0)
    palette = _rgb(rng.uniform(), rng.uniform(0.0, 0.8), rng.uniform(0.2, 1.0))[None, :]
    return LogoDesign(1.0, (shape,), (palette,))


def render_background(cfg: SyntheticConfig, class_id: int, instance: int) -> np.ndarray:
    """Cluttered backdrop for one scene (deterministic in its own seed stream)."""
    rng = np.random.default_rng([cfg.seed, 2, class_id, instance])
    n = cfg.canvas_size
    base = _rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.45, 1.0))
    ramp = np.linspace(-1.0, 1.0, n)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    img = base[None, None, :] + (gx * ramp[None, :] + gy * ramp[:, None])[..., None]
    for _ in range(int(round(cfg.clutter_density * 8))):
        design = _clutter_design(rng)
        size = rng.uniform(0.08, 0.3) * n
        center = (rng.uniform(0, n), rng.uniform(0, n))
        col, cov = render_logo(design, design.palettes[0], size, 0.0, center, (n, n))
        img = composite(img, col, cov)
    img = img + rng.uniform(-0.05, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class ScenePlacement:
    height_px: float
    angle: float
    center: tuple[float, float]
    variant: int
    brightness: float
    hue_shift: float


def place_logo(design: LogoDesign, cfg: SyntheticConfig, class_id: int, instance: int) -> ScenePlacement:
    rng = np.random.default_rng([cfg.seed, 1, class_id, instance])
    n = cfg.canvas_size
    scale = rng.uniform(*cfg.logo_scale)
    hpx = scale * n / max(1.0, design.aspect)
    angle = math.radians(rng.uniform(*cfg.rotation_deg))
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    wpx = design.aspect * hpx
    hx, hy = (c * wpx + s * hpx) / 2, (s * wpx + c * hpx) / 2
    fit = min(1.0, (n / 2 - 1) / max(hx, hy))
    hpx, hx, hy = hpx * fit, hx * fit, hy * fit
    spread_x, spread_y = (n / 2 - hx) * cfg.translation, (n / 2 - hy) * cfg.translation
    center = (n / 2 + rng.uniform(-spread_x, spread_x), n / 2 + rng.uniform(-spread_y, spread_y))
    variant = int(rng.integers(len(design.palettes)))
    return ScenePlacement(hpx, angle, center, variant, float(rng.uniform(0.75, 1.1)),
                          float(rng.uniform(-cfg.color_shift, cfg.color_shift)))


def render_scene(design: LogoDesign, cfg: SyntheticConfig, class_id: int, instance: int):
    """Returns (image, coverage, gt box) for one synthetic scene."""
    p = place_logo(design, cfg, class_id, instance)
    n = cfg.canvas_size
    palette = np.clip(design.palettes[p.variant] * p.brightness, 0.0, 1.0)
    if p.hue_shift:
        hsv = rgb_to_hsv(palette)
        hsv[:, 0] = np.mod(hsv[:, 0] + p.hue_shift, 1.0)
        palette = hsv_to_rgb(hsv)
    col, cov = render_logo(design, palette, p.height_px, p.angle, p.center, (n, n))
    img = np.clip(composite(render_background(cfg, class_id, instance), col, cov), 0.0, 1.0)
    return img, cov, mask_box(cov)


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    (out / "canonical").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    canonicals, images = [], []
    for class_id, split in cfg.class_split().items():
        design = design_logo(class_id, cfg)
        paths = []
        for v in range(cfg.canonical_variants):
            rel = f"canonical/c{class_id:04d}_v{v}.ppm"
            write_ppm(out / rel, render_canonical(design, v, cfg))
            paths.append(rel)
        canonicals.append(CanonicalRecord(class_id, f"logo_{class_id:04d}", paths, split))
        for i in range(cfg.instances_per_class):
            img, _, box = render_scene(design, cfg, class_id, i)
            if box is None:
                raise ConfigError(f"logo of class {class_id} fell outside the canvas")
            image_id = f"c{class_id:04d}_i{i:03d}"
            rel = f"images/{image_id}.ppm"
            write_ppm(out / rel, img)
            variant = place_logo(design, cfg, class_id, i).variant
            images.append(ImageRecord(
                image_id, rel, split, cfg.canvas_size, cfg.canvas_size,
                [GTBox(*box, class_id=class_id, canonical_id=f"c{class_id:04d}_v{variant}")],
            ))
    manifest = DatasetManifest(images, canonicals, out).validate()
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


# --- generic detector simulator ----------------------------------------------------

@dataclass(frozen=True)
class DetectorSimParams:
    jitter: float = 0.05
    fp_rate: float = 0.5
    miss_rate: float = 0.05

    @classmethod
    def from_config(cls, cfg: SyntheticConfig) -> "DetectorSimParams":
        return cls(cfg.detector_jitter, cfg.fp_rate, cfg.miss_rate)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def jitter_box(box: GTBox | BoundingBox, jitter: float, rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    x1, y1, x2, y2 = (float(v) for v in (box.x1, box.y1, box.x2, box.y2))
    bw, bh = x2 - x1, y2 - y1
    d = rng.uniform(-jitter, jitter, size=4) * np.array([bw, bh, bw, bh])
    nx1 = min(max(_round_half_up(x1 + d[0]), 0), width - 1)
    ny1 = min(max(_round_half_up(y1 + d[1]), 0), height - 1)
    nx2 = max(min(_round_half_up(x2 + d[2]), width), nx1 + 1)
    ny2 = max(min(_round_half_up(y2 + d[3]), height), ny1 + 1)
    return BoundingBox(nx1, ny1, nx2, ny2)


def _random_fp_box(rec: ImageRecord, rng: np.random.Generator) -> BoundingBox | None:
    gts = [b.box for b in rec.boxes]
    for _ in range(20):
        bw = int(rng.integers(max(4, rec.width // 8), max(5, rec.width // 2) + 1))
        bh = int(rng.integers(max(4, rec.height // 8), max(5, rec.height // 2) + 1))
        bw, bh = min(bw, rec.width), min(bh, rec.height)
        x1 = int(rng.integers(0, rec.width - bw + 1))
        y1 = int(rng.integers(0, rec.height - bh + 1))
        box = BoundingBox(x1, y1, x1 + bw, y1 + bh)
        if all(iou(box, g) < 0.3 for g in gts):
            return box
    return None


def simulate_detector(
    manifest: DatasetManifest,
    params: DetectorSimParams,
    rng: np.random.Generator,
    split: str | None = None,
) -> dict[str, list[Detection]]:
    """Class-agnostic candidate boxes: jittered GT boxes plus random false positives."""
    out = {}
    for rec in manifest.images_in_split(split):
        cands = []
        n_fp = 0
        for b in rec.boxes:
            missed = rng.random() < params.miss_rate
            box = jitter_box(b, params.jitter, rng, rec.width, rec.height)
            score = float(rng.uniform(0.6, 1.0))
            if not missed:
                cands.append(Detection(box, score))
            if rng.random() < params.fp_rate:
                n_fp += 1
        for _ in range(n_fp):
            box = _random_fp_box(rec, rng)
            score = float(rng.uniform(0.1, 0.7))
            if box is not None:
                cands.append(Detection(box, score))
        out[rec.image_id] = cands
    return out


class FalsePositive(NamedTuple):
    image_id: str
    box: BoundingBox
    class_id: int = NEGATIVE_ONLY_CLASS


def collect_fp_negatives(
    manifest: DatasetManifest,
    candidates: Mapping[str, Iterable[Detection]],
    iou_threshold: float = 0.5,
) -> list[FalsePositive]:
    by_id = {r.image_id: r for r in manifest.images}
    out = []
    for image_id, dets in candidates.items():
        gts = [b.box for b in by_id[image_id].boxes] if image_id in by_id else []
        for d in dets:
            if all(iou(d.box, g) < iou_threshold for g in gts):
                out.append(FalsePositive(image_id, BoundingBox(*d.box)))
    return out
