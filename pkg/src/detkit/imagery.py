"""Raster images: P6/PNG I/O, HSV conversion, affine warping and resizing.

Pixel coordinates follow the pixel-center convention: pixel ``(i, j)`` has
its center at ``x = i, y = j``, so an image of width ``w`` spans the
continuous interval ``[-0.5, w - 0.5]``.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]
RGB = Tuple[int, int, int]

FILL_COLOR: RGB = (114, 114, 114)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_WHITESPACE = b" \t\r\n\x0b\x0c"


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded."""

    def __init__(self, path: PathLike, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class DegenerateMapError(ValueError):
    """Raised for affine maps that are not finite or not invertible."""


def round_half_away(values):
    """Round to the nearest integer, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def to_uint8(values) -> np.ndarray:
    """Round half away from zero and clamp into ``[0, 255]``."""
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable 8-bit RGB image stored as an ``(height, width, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an (h, w, 3) array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        px = np.array(px, copy=True, order="C")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "RasterImage":
        if width < 1 or height < 1:
            raise ValueError("image must be at least 1x1")
        if len(data) != width * height * 3:
            raise ValueError(
                f"buffer holds {len(data)} bytes, expected {width * height * 3}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
        return cls(arr)

    @classmethod
    def filled(cls, width: int, height: int, color: Sequence[int] = FILL_COLOR) -> "RasterImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(color, dtype=np.uint8)
        return cls(arr)

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height})"


# ---------------------------------------------------------------------------
# File I/O


def _read_header_tokens(data: bytes, path: PathLike, count: int, pos: int):
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(path, "malformed header: truncated")
        tok = data[start:pos]
        if not tok.isdigit():
            raise ImageFormatError(path, f"malformed header: bad token {tok!r}")
        tokens.append(int(tok))
    if pos >= n or data[pos] not in _WHITESPACE:
        raise ImageFormatError(path, "malformed header: missing separator before pixel data")
    return tokens, pos + 1


def _decode_ppm(data: bytes, path: PathLike) -> RasterImage:
    (width, height, maxval), offset = _read_header_tokens(data, path, 3, 2)
    if width < 1 or height < 1:
        raise ImageFormatError(path, "malformed header: zero dimension")
    if maxval != 255:
        raise ImageFormatError(path, f"unsupported bit depth (maxval {maxval})")
    expected = width * height * 3
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise ImageFormatError(
            path, f"truncated pixel data ({len(payload)} of {expected} bytes)"
        )
    return RasterImage.from_bytes(width, height, payload)


def _decode_png(path: PathLike) -> RasterImage:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA"):
                raise ImageFormatError(path, f"unsupported bit depth or mode {im.mode!r}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageFormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of decode errors
        raise ImageFormatError(path, f"malformed PNG: {exc}") from exc
    return RasterImage(arr)


def read_image(path: PathLike) -> RasterImage:
    """Decode a binary P6 pixmap (maxval 255) or an 8-bit RGB/RGBA PNG.

    Alpha is dropped for PNG input. Raises ``FileNotFoundError`` for missing
    files and :class:`ImageFormatError` for everything else that goes wrong.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such image file")
    data = path.read_bytes()
    if data.startswith(b"P6"):
        return _decode_ppm(data, path)
    if data.startswith(_PNG_SIGNATURE):
        return _decode_png(path)
    raise ImageFormatError(path, "unsupported format")


def encode_ppm(image: RasterImage) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.tobytes()


def write_image(image: RasterImage, path: PathLike) -> None:
    """Write ``image`` as a binary P6 pixmap."""
    Path(path).write_bytes(encode_ppm(image))


# ---------------------------------------------------------------------------
# HSV


class HsvPixel(NamedTuple):
    h: float
    s: float
    v: float


def rgb_to_hsv(r: int, g: int, b: int) -> HsvPixel:
    h, s, v = colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)
    return HsvPixel(h % 1.0, s, v)


def hsv_to_rgb(p: HsvPixel) -> RGB:
    r, g, b = colorsys.hsv_to_rgb(p.h % 1.0, p.s, p.v)
    return tuple(int(c) for c in to_uint8(np.array([r, g, b]) * 255.0))


def rgb_array_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hexcone RGB -> HSV; input in ``[0, 1]``, output ``(..., 3)``."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    delta = maxc - minc
    v = maxc
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(maxc > 0, delta / maxc, 0.0)
        safe = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / safe
        gc = (maxc - g) / safe
        bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_array_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized hexcone HSV -> RGB with results in ``[0, 1]``."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=-1)
    # colorsys returns (v, v, v) for s == 0
    return np.where((s == 0)[..., None], v[..., None], rgb)


# ---------------------------------------------------------------------------
# Affine maps and warping


@dataclass(frozen=True)
class AffineMap:
    """2x3 map from output pixel coordinates to source pixel coordinates.

    ``sx = a*x + b*y + c`` and ``sy = d*x + e*y + f``.
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        coeffs = (self.a, self.b, self.c, self.d, self.e, self.f)
        if not all(math.isfinite(v) for v in coeffs):
            raise DegenerateMapError(f"non-finite affine coefficients {coeffs}")
        if self.determinant == 0.0:
            raise DegenerateMapError("affine map is not invertible")

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @classmethod
    def from_matrix(cls, m) -> "AffineMap":
        m = np.asarray(m, dtype=np.float64)
        return cls(*(float(v) for v in m[:2, :3].ravel()))

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.a, self.b, self.c], [self.d, self.e, self.f], [0.0, 0.0, 1.0]]
        )

    def is_identity(self) -> bool:
        return (self.a, self.b, self.c, self.d, self.e, self.f) == (1, 0, 0, 0, 1, 0)

    def inverse(self) -> "AffineMap":
        return AffineMap.from_matrix(np.linalg.inv(self.matrix))

    def then(self, other: "AffineMap") -> "AffineMap":
        """Single map equivalent to warping by ``self`` and then by ``other``.

        Warping by ``self`` samples ``src(self(p))``; warping the result by
        ``other`` samples ``src(self(other(p)))``.
        """
        return AffineMap.from_matrix(self.matrix @ other.matrix)

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.a * x + self.b * y + self.c, self.d * x + self.e * y + self.f


def _gather(src: np.ndarray, xi: np.ndarray, yi: np.ndarray, fill, replicate: bool):
    h, w = src.shape[:2]
    xc = np.clip(xi, 0, w - 1)
    yc = np.clip(yi, 0, h - 1)
    vals = src[yc, xc]
    if not replicate:
        outside = (xi < 0) | (xi >= w) | (yi < 0) | (yi >= h)
        vals = np.where(outside[..., None], fill, vals)
    return vals


def sample_bilinear(src: np.ndarray, sx, sy, fill=FILL_COLOR, replicate: bool = False) -> np.ndarray:
    """Bilinearly sample ``src`` (h, w, c) at float coordinates.

    Neighbors that fall outside the source contribute ``fill`` unless
    ``replicate`` is set, in which case the nearest edge pixel is used.
    Returns float64 values.
    """
    src = np.asarray(src, dtype=np.float64)
    fill = np.asarray(fill, dtype=np.float64)
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = (sx - x0f)[..., None]
    fy = (sy - y0f)[..., None]
    big = max(src.shape[0], src.shape[1]) + 2
    x0 = np.clip(x0f, -big, big).astype(np.int64)
    y0 = np.clip(y0f, -big, big).astype(np.int64)
    v00 = _gather(src, x0, y0, fill, replicate)
    v01 = _gather(src, x0 + 1, y0, fill, replicate)
    v10 = _gather(src, x0, y0 + 1, fill, replicate)
    v11 = _gather(src, x0 + 1, y0 + 1, fill, replicate)
    top = v00 * (1.0 - fx) + v01 * fx
    bottom = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bottom * fy


def warp_affine(
    image: RasterImage,
    map: AffineMap,
    out_w: int,
    out_h: int,
    fill: Sequence[int] = FILL_COLOR,
) -> RasterImage:
    """Resample ``image`` onto an ``out_w`` x ``out_h`` canvas through ``map``.

    Each output pixel bilinearly samples the source at ``map(x, y)``; source
    neighbors outside the image take the ``fill`` color.
    """
    if not isinstance(map, AffineMap):
        raise TypeError("map must be an AffineMap")
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx, sy = map.apply(xs, ys)
    out = sample_bilinear(image.pixels, sx, sy, fill=fill)
    return RasterImage(to_uint8(out))


# ---------------------------------------------------------------------------
# Resizing


@dataclass(frozen=True)
class ResizeMeta:
    """What is needed to undo :func:`resize`."""

    orig_w: int
    orig_h: int
    target_w: int
    target_h: int
    content_w: int
    content_h: int
    pad_x: int
    pad_y: int
    scale_x: float
    scale_y: float

    @property
    def scale(self) -> float:
        return min(self.scale_x, self.scale_y)


def _resample(image: RasterImage, new_w: int, new_h: int) -> RasterImage:
    if (new_w, new_h) == image.size:
        return image
    sx_scale = image.width / new_w
    sy_scale = image.height / new_h
    # pixel-center aligned: output center x maps to (x + 0.5) * ratio - 0.5
    xs = (np.arange(new_w) + 0.5) * sx_scale - 0.5
    ys = (np.arange(new_h) + 0.5) * sy_scale - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = sample_bilinear(image.pixels, gx, gy, replicate=True)
    return RasterImage(to_uint8(out))


def resize(
    image: RasterImage,
    target_w: int,
    target_h: int,
    preserve_aspect: bool = False,
    fill: Sequence[int] = FILL_COLOR,
) -> Tuple[RasterImage, ResizeMeta]:
    """Bilinear resize, optionally letterboxed to keep the aspect ratio.

    With ``preserve_aspect`` the content is scaled to fit inside the target
    box and centered on a ``fill`` canvas.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target size must be at least 1x1")
    w, h = image.size
    if preserve_aspect:
        scale = min(target_w / w, target_h / h)
        content_w = min(target_w, max(1, int(round_half_away(w * scale))))
        content_h = min(target_h, max(1, int(round_half_away(h * scale))))
    else:
        content_w, content_h = target_w, target_h
    pad_x = (target_w - content_w) // 2
    pad_y = (target_h - content_h) // 2
    content = _resample(image, content_w, content_h)
    if (content_w, content_h) == (target_w, target_h):
        out = content
    else:
        canvas = np.empty((target_h, target_w, 3), dtype=np.uint8)
        canvas[...] = np.asarray(fill, dtype=np.uint8)
        canvas[pad_y:pad_y + content_h, pad_x:pad_x + content_w] = content.pixels
        out = RasterImage(canvas)
    meta = ResizeMeta(
        orig_w=w,
        orig_h=h,
        target_w=target_w,
        target_h=target_h,
        content_w=content_w,
        content_h=content_h,
        pad_x=pad_x,
        pad_y=pad_y,
        scale_x=content_w / w,
        scale_y=content_h / h,
    )
    return out, meta


def restore(image: RasterImage, meta: ResizeMeta) -> RasterImage:
    """Invert :func:`resize`: crop the content band and scale back."""
    if image.size != (meta.target_w, meta.target_h):
        raise ValueError(
            f"image is {image.width}x{image.height}, metadata expects "
            f"{meta.target_w}x{meta.target_h}"
        )
    band = image.pixels[
        meta.pad_y:meta.pad_y + meta.content_h, meta.pad_x:meta.pad_x + meta.content_w
    ]
    return _resample(RasterImage(band), meta.orig_w, meta.orig_h)
