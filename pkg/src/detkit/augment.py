"""Seeded detection augmentation: affine + box propagation, HSV jitter, mixup, mosaic."""

from __future__ import annotations

import hashlib
import math
from dataclasses import astuple, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .imagery import (
    FILL_COLOR,
    AffineMap,
    RasterImage,
    hsv_array_to_rgb,
    resize,
    rgb_array_to_hsv,
    to_uint8,
    warp_affine,
)
from .labels import NormBox, clip_box

# a transformed box must keep this share of its area inside the canvas
MIN_VISIBLE_FRACTION = 0.1
MIXUP_BETA = 32.0


class PoolExhaustedError(RuntimeError):
    """The frame pool cannot supply the extra frames mosaic/mixup need."""


@dataclass(frozen=True)
class AugPolicy:
    """Magnitudes and probabilities of the augmentation policy.

    Angles (``rotation``, ``shear``) are in degrees; ``translate`` is a
    fraction of the image size; ``saturation`` and ``value`` are gain
    deviations around 1; ``hue`` is an additive shift on the unit hue circle.
    """

    zoom: float = 0.5
    rotation: float = 0.4
    translate: float = 0.1
    shear: float = 0.1
    hflip_p: float = 0.5
    hue: float = 0.015
    saturation: float = 0.7
    value: float = 0.4
    mixup_p: float = 0.3
    mosaic_p: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name}={v} must be finite and >= 0")
        for name in ("hflip_p", "mixup_p", "mosaic_p"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name}={getattr(self, name)} is not a probability")

    @classmethod
    def zero(cls) -> "AugPolicy":
        return cls(*([0.0] * len(fields(cls))))

    def as_tuple(self) -> Tuple[float, ...]:
        return astuple(self)


def default_policy() -> AugPolicy:
    return AugPolicy()


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    angle: float = 0.0
    shear_x: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    flip: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class Sample:
    """An image together with its boxes; the unit every transform consumes."""

    image: RasterImage
    boxes: Tuple[NormBox, ...] = ()
    stem: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


def derive_seed(global_seed: int, key: str) -> int:
    """64-bit seed from the global seed and a frame key, order independent."""
    digest = hashlib.sha256(f"{int(global_seed)}\x00{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def sample_affine(policy: AugPolicy, rng: np.random.Generator) -> AffineParams:
    scale = rng.uniform(1 - policy.zoom, 1 + policy.zoom)
    angle = rng.uniform(-policy.rotation, policy.rotation)
    shear = rng.uniform(-policy.shear, policy.shear)
    tx = rng.uniform(-policy.translate, policy.translate)
    ty = rng.uniform(-policy.translate, policy.translate)
    flip = bool(rng.random() < policy.hflip_p)
    # a zoom >= 1 could reach zero scale
    scale = max(float(scale), 1e-3)
    return AffineParams(scale, float(angle), float(shear), float(tx), float(ty), flip)


def forward_matrix(params: AffineParams, w: int, h: int) -> np.ndarray:
    """Source -> output 3x3 matrix in pixel-center coordinates."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    flip = np.diag([-1.0 if params.flip else 1.0, 1.0])
    scale = np.diag([params.scale, params.scale])
    a = math.radians(params.angle)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(math.radians(params.shear_x))], [0.0, 1.0]])
    lin = shear @ rot @ scale @ flip
    center = np.array([cx, cy])
    offset = center - lin @ center + np.array([params.translate_x * w, params.translate_y * h])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = offset
    return m


def affine_to_map(params: AffineParams, w: int, h: int) -> AffineMap:
    """Output -> source map for ``params`` applied about the image center.

    Order: flip, scale, rotate, shear, translate.
    """
    if params == AffineParams():
        return AffineMap.identity()
    return AffineMap.from_matrix(np.linalg.inv(forward_matrix(params, w, h)))


def transform_boxes(boxes: Sequence[NormBox], map: AffineMap, w: int, h: int) -> List[NormBox]:
    """Carry boxes through the warp defined by output->source ``map``.

    Corners go through the inverse map, the hull is clipped, and boxes that
    keep under 10% of their transformed area are dropped.
    """
    if map.is_identity():
        return list(boxes)
    fwd = map.inverse()
    out = []
    for box in boxes:
        xs = np.array([box.x0, box.x1, box.x1, box.x0]) * w - 0.5
        ys = np.array([box.y0, box.y0, box.y1, box.y1]) * h - 0.5
        ox, oy = fwd.apply(xs, ys)
        x0, x1 = (ox.min() + 0.5) / w, (ox.max() + 0.5) / w
        y0, y1 = (oy.min() + 0.5) / h, (oy.max() + 0.5) / h
        hull = NormBox.from_corners(box.class_id, float(x0), float(y0), float(x1), float(y1))
        clipped = clip_box(hull)
        if clipped is None or clipped.area < MIN_VISIBLE_FRACTION * hull.area:
            continue
        out.append(clipped)
    return out


def apply_affine(sample: Sample, params: AffineParams, fill=FILL_COLOR) -> Sample:
    w, h = sample.image.size
    m = affine_to_map(params, w, h)
    if m.is_identity():
        return sample
    image = warp_affine(sample.image, m, w, h, fill)
    return Sample(image, tuple(transform_boxes(sample.boxes, m, w, h)), sample.stem)


def apply_hsv_gains(image: RasterImage, hue_shift: float, sat_gain: float, val_gain: float) -> RasterImage:
    hsv = rgb_array_to_hsv(image.pixels / 255.0)
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_gain, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val_gain, 0.0, 1.0)
    return RasterImage(to_uint8(hsv_array_to_rgb(hsv) * 255.0))


def hsv_jitter(image: RasterImage, rng: np.random.Generator, policy: AugPolicy) -> RasterImage:
    dh = rng.uniform(-policy.hue, policy.hue)
    gs = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    gv = rng.uniform(1 - policy.value, 1 + policy.value)
    return apply_hsv_gains(image, float(dh), float(gs), float(gv))


def mixup(a: Sample, b: Sample, lam: float) -> Sample:
    """Blend ``lam * a + (1 - lam) * b`` and keep both label sets."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight {lam} outside [0, 1]")
    if a.image.size != b.image.size:
        raise ValueError(f"mixup size mismatch: {a.image.size} vs {b.image.size}")
    blend = lam * a.image.pixels.astype(np.float64) + (1.0 - lam) * b.image.pixels.astype(np.float64)
    return Sample(RasterImage(to_uint8(blend)), a.boxes + b.boxes, a.stem)


def sample_pivot(w: int, h: int, rng: np.random.Generator) -> Tuple[int, int]:
    xc = int(math.floor(rng.uniform(0.5 * w, 1.5 * w)))
    yc = int(math.floor(rng.uniform(0.5 * h, 1.5 * h)))
    return xc, yc


def mosaic4(
    samples: Sequence[Sample],
    rng: Optional[np.random.Generator] = None,
    pivot: Optional[Tuple[int, int]] = None,
    fill=FILL_COLOR,
) -> Sample:
    """Tile four equally sized frames around a pivot on a 2W x 2H canvas.

    Frames go top-left, top-right, bottom-left, bottom-right; each touches
    the pivot with its inner corner. The canvas is then halved to W x H.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs 4 frames, got {len(samples)}")
    w, h = samples[0].image.size
    for s in samples[1:]:
        if s.image.size != (w, h):
            raise ValueError(f"mosaic size mismatch: {s.image.size} vs {(w, h)}")
    if pivot is None:
        if rng is None:
            raise ValueError("mosaic needs an rng or an explicit pivot")
        pivot = sample_pivot(w, h, rng)
    xc, yc = pivot
    cw, ch = 2 * w, 2 * h
    canvas = np.empty((ch, cw, 3), dtype=np.uint8)
    canvas[...] = np.asarray(fill, dtype=np.uint8)
    origins = [(xc - w, yc - h), (xc, yc - h), (xc - w, yc), (xc, yc)]
    boxes = []
    for s, (ox, oy) in zip(samples, origins):
        x0, y0 = max(ox, 0), max(oy, 0)
        x1, y1 = min(ox + w, cw), min(oy + h, ch)
        if x1 > x0 and y1 > y0:
            canvas[y0:y1, x0:x1] = s.image.pixels[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        for b in s.boxes:
            moved = NormBox(b.class_id, (b.cx * w + ox) / cw, (b.cy * h + oy) / ch, b.w / 2, b.h / 2)
            kept = clip_box(moved)
            if kept is not None:
                boxes.append(kept)
    small, _ = resize(RasterImage(canvas), w, h)
    return Sample(small, tuple(boxes), samples[0].stem)


def _draw(pool: Sequence[Sample], rng: np.random.Generator, k: int, exclude: str) -> List[Sample]:
    candidates = [i for i in range(len(pool)) if _stem_of(pool, i) != exclude or not exclude]
    if len(candidates) < k:
        raise PoolExhaustedError(f"need {k} extra frames, pool offers {len(candidates)}")
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [pool[candidates[int(i)]] for i in picks]


def _stem_of(pool, i) -> str:
    stems = getattr(pool, "stems", None)
    if stems is not None:
        return stems[i]
    return pool[i].stem


def augment_frame(
    frame: Sample,
    pool: Sequence[Sample],
    policy: AugPolicy,
    seed: int,
    fill=FILL_COLOR,
) -> Sample:
    """Run the whole policy on one frame, fully determined by ``seed``.

    ``pool`` is any sequence of samples; a ``stems`` attribute, when
    present, lets the draw skip ``frame`` itself without loading images.
    """
    rng = np.random.default_rng(seed)
    out = frame
    if rng.random() < policy.mosaic_p:
        extra = _draw(pool, rng, 3, frame.stem)
        out = mosaic4([out] + extra, rng, fill=fill)
    if rng.random() < policy.mixup_p:
        other = _draw(pool, rng, 1, frame.stem)[0]
        out = mixup(out, other, float(rng.beta(MIXUP_BETA, MIXUP_BETA)))
    out = apply_affine(out, sample_affine(policy, rng), fill)
    image = hsv_jitter(out.image, rng, policy)
    return Sample(image, out.boxes, frame.stem)
