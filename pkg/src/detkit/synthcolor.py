"""Structure-preserving color augmentation and synthetic-image bookkeeping.

Colors are moved through a decorrelated space: ``log(1 + rgb)`` followed
by a fixed orthonormal opponent rotation (achromatic, yellow-blue,
red-green axes). Matching per-channel mean and standard deviation in that
space changes appearance while leaving every pixel where it was, so the
source annotations stay valid.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imagery import RasterImage, ResizeMeta, resize, restore, to_uint8
from .labels import LabeledFrame, Modality

log = logging.getLogger(__name__)

OPPONENT = np.array(
    [
        [1 / np.sqrt(3), 1 / np.sqrt(3), 1 / np.sqrt(3)],
        [1 / np.sqrt(6), 1 / np.sqrt(6), -2 / np.sqrt(6)],
        [1 / np.sqrt(2), -1 / np.sqrt(2), 0.0],
    ]
)
EDGE_THRESHOLD = 32.0
SYNTH_SUFFIX = "_gan"
IMAGE_SUFFIXES = (".ppm", ".png")
_SYNTH_STEM = re.compile(r"^(?P<source>.+)_gan(?P<index>\d*)$")


class EmptyStatPoolError(ValueError):
    pass


@dataclass(frozen=True)
class ColorStats:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if any(s < 0 for s in self.std):
            raise ValueError(f"negative standard deviation in {self.std}")


@dataclass(frozen=True)
class SynthRecord:
    source_stem: str
    target: ColorStats
    output_stem: str

    def as_dict(self) -> dict:
        return {
            "source": self.source_stem,
            "output": self.output_stem,
            "target_mean": list(self.target.mean),
            "target_std": list(self.target.std),
        }


def to_decorrelated(pixels: np.ndarray) -> np.ndarray:
    """``(..., 3)`` 8-bit RGB values -> log-opponent coordinates."""
    return np.log1p(np.asarray(pixels, dtype=np.float64)) @ OPPONENT.T


def from_decorrelated(values: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_decorrelated`, unclamped float RGB."""
    return np.expm1(np.asarray(values, dtype=np.float64) @ OPPONENT)


def _moments(flat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # shift by the first sample so constant channels give exactly zero spread
    ref = flat[0]
    dev = flat - ref
    return ref + dev.mean(axis=0), dev.std(axis=0)


def channel_stats(image: RasterImage) -> ColorStats:
    mean, std = _moments(to_decorrelated(image.pixels).reshape(-1, 3))
    return ColorStats(tuple(mean), tuple(std))


def color_transfer(src: RasterImage, target: ColorStats) -> RasterImage:
    """Match ``src``'s decorrelated mean/std to ``target``.

    Channels with zero spread are shifted by the mean difference only.
    """
    lab = to_decorrelated(src.pixels)
    mu, sigma = _moments(lab.reshape(-1, 3))
    t_mu = np.asarray(target.mean)
    t_sigma = np.asarray(target.std)
    ratio = np.where(sigma > 0, t_sigma / np.where(sigma > 0, sigma, 1.0), 1.0)
    moved = (lab - mu) * ratio + t_mu
    return RasterImage(to_uint8(from_decorrelated(moved)))


def perturb_stats(stats: ColorStats, rng: np.random.Generator, jitter: float) -> ColorStats:
    gm = rng.uniform(1 - jitter, 1 + jitter, size=3)
    gs = rng.uniform(1 - jitter, 1 + jitter, size=3)
    return ColorStats(tuple(np.asarray(stats.mean) * gm), tuple(np.abs(np.asarray(stats.std) * gs)))


def synth_stem(source_stem: str, index: int = 0) -> str:
    """``frame12`` -> ``frame12_gan``, then ``frame12_gan2``, ``frame12_gan3``..."""
    return f"{source_stem}{SYNTH_SUFFIX}" + (str(index + 1) if index else "")


def synthesize(
    frame: LabeledFrame,
    image: RasterImage,
    stat_pool: Sequence[ColorStats],
    rng: np.random.Generator,
    jitter: float = 0.0,
    index: int = 0,
    out_dir: Optional[Path] = None,
) -> Tuple[LabeledFrame, RasterImage, SynthRecord]:
    """Make one SYNTH frame from ``frame`` with a recolored image.

    Boxes are inherited unchanged. ``out_dir`` only sets the file
    references of the returned frame; nothing is written.
    """
    if not stat_pool:
        raise EmptyStatPoolError("color statistics pool is empty")
    if frame.modality is Modality.SYNTH:
        raise ValueError(f"{frame.stem} is already synthetic")
    pick = stat_pool[int(rng.integers(len(stat_pool)))]
    target = perturb_stats(pick, rng, jitter)
    out = color_transfer(image, target)
    stem = synth_stem(frame.stem, index)
    if out_dir is None:
        image_ref = frame.image_ref.with_name(stem + ".ppm")
        label_ref = frame.label_ref.with_name(stem + ".txt")
    else:
        image_ref = Path(out_dir) / "images" / f"{stem}.ppm"
        label_ref = Path(out_dir) / "labels" / f"{stem}.txt"
    synth = LabeledFrame(
        stem=stem,
        patient_id=frame.patient_id,
        modality=Modality.SYNTH,
        image_ref=image_ref,
        label_ref=label_ref,
        boxes=frame.boxes,
        source_stem=frame.stem,
    )
    return synth, out, SynthRecord(frame.stem, target, stem)


def structure_map(image: RasterImage, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Boolean map of pixels whose luma gradient magnitude reaches ``threshold``.

    Gradients are central differences of the channel mean, with edge
    replication at the borders.
    """
    luma = image.pixels.astype(np.float64).mean(axis=2)
    padded = np.pad(luma, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.hypot(gx, gy) >= threshold


def structure_agreement(a: RasterImage, b: RasterImage, threshold: float = EDGE_THRESHOLD) -> float:
    return float(np.mean(structure_map(a, threshold) == structure_map(b, threshold)))


# --- generator pre/post processing -----------------------------------------


def generator_preprocess(image: RasterImage, side: int) -> Tuple[np.ndarray, ResizeMeta]:
    """Letterbox to ``side`` x ``side`` and scale channels to ``[-1, 1]``."""
    if side < 1:
        raise ValueError("side must be >= 1")
    boxed, meta = resize(image, side, side, preserve_aspect=True)
    return boxed.pixels.astype(np.float64) / 127.5 - 1.0, meta


def generator_restore(processed: np.ndarray, meta: ResizeMeta) -> RasterImage:
    pixels = to_uint8((np.asarray(processed, dtype=np.float64) + 1.0) * 127.5)
    return restore(RasterImage(pixels), meta)


# --- ingestion of externally generated images ------------------------------


def parse_synth_stem(stem: str) -> Optional[str]:
    m = _SYNTH_STEM.match(stem)
    return m.group("source") if m else None


def ingest_synthetic(directory, source_frames: Sequence[LabeledFrame]) -> List[LabeledFrame]:
    """Register ``<stem>_gan*.ppm|png`` files as SYNTH frames of their sources.

    Boxes come from the matching source frame; the label reference points
    at a copied ``<stem>_gan*.txt`` when one exists, else at the source's
    label file. Images with no matching source are logged and skipped.
    ``directory`` may hold the images directly or in an ``images/``
    subfolder.
    """
    directory = Path(directory)
    if not directory.is_dir():
        return []
    img_dir = directory / "images" if (directory / "images").is_dir() else directory
    by_stem: Dict[str, LabeledFrame] = {f.stem: f for f in source_frames}
    frames = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        source_stem = parse_synth_stem(path.stem)
        source = by_stem.get(source_stem) if source_stem else None
        if source is None:
            log.warning("orphan synthetic image %s: no source frame %r", path, source_stem)
            continue
        if source.modality is Modality.SYNTH:
            log.warning("skipping %s: source %s is itself synthetic", path, source.stem)
            continue
        label_ref = next(
            (c for c in (directory / "labels" / f"{path.stem}.txt", path.with_suffix(".txt")) if c.is_file()),
            source.label_ref,
        )
        frames.append(
            LabeledFrame(
                stem=path.stem,
                patient_id=source.patient_id,
                modality=Modality.SYNTH,
                image_ref=path,
                label_ref=label_ref,
                boxes=source.boxes,
                source_stem=source.stem,
            )
        )
    return frames
