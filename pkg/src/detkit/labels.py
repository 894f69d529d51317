"""Annotation format: one ``class cx cy w h`` line per box, normalized coordinates."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

EDGE_TOL = 1e-6
# boxes thinner than 2 px on a 640x640 frame are dropped after clipping
MIN_CLIPPED_SIZE = 2.0 / 640.0

_INT_RE = re.compile(r"^[+]?\d+$")
_REAL_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class LabelError(ValueError):
    """A malformed label or prediction line."""

    def __init__(self, line: int, reason: str, source: Optional[str] = None):
        self.line = line
        self.reason = reason
        self.source = source
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {reason}")


class Modality(str, enum.Enum):
    WL = "WL"
    NIR = "NIR"
    SYNTH = "SYNTH"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class NormBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, class_id: int, x0: float, y0: float, x1: float, y1: float) -> "NormBox":
        return cls(class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def problems(self) -> List[str]:
        """Human-readable invariant violations; empty when the box is valid."""
        out = []
        if self.class_id < 0:
            out.append(f"negative class id {self.class_id}")
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            return out + ["non-finite coordinate"]
        for name, v in (("cx", self.cx), ("cy", self.cy)):
            if not 0.0 <= v <= 1.0:
                out.append(f"{name}={v} outside [0, 1]")
        for name, v in (("w", self.w), ("h", self.h)):
            if not 0.0 < v <= 1.0:
                out.append(f"{name}={v} outside (0, 1]")
        if self.x0 < -EDGE_TOL or self.x1 > 1 + EDGE_TOL:
            out.append("box extends past the left/right edge")
        if self.y0 < -EDGE_TOL or self.y1 > 1 + EDGE_TOL:
            out.append("box extends past the top/bottom edge")
        return out

    def is_valid(self) -> bool:
        return not self.problems()


@dataclass(frozen=True)
class Detection:
    box: NormBox
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class LabeledFrame:
    """One dataset entry. ``source_stem`` records provenance of SYNTH frames."""

    stem: str
    patient_id: str
    modality: Modality
    image_ref: Path
    label_ref: Path
    boxes: Tuple[NormBox, ...] = ()
    source_stem: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "image_ref", Path(self.image_ref))
        object.__setattr__(self, "label_ref", Path(self.label_ref))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "patient_id", str(self.patient_id))


def _parse_numbers(text: str, ntokens: int, source: Optional[str]):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != ntokens:
            raise LabelError(lineno, f"expected {ntokens} tokens, found {len(tokens)}", source)
        if not _INT_RE.match(tokens[0]):
            raise LabelError(lineno, f"class id {tokens[0]!r} is not a non-negative integer", source)
        for tok in tokens[1:]:
            if not _REAL_RE.match(tok):
                raise LabelError(lineno, f"non-numeric token {tok!r}", source)
        rows.append((lineno, int(tokens[0]), [float(t) for t in tokens[1:]]))
    return rows


def _checked_box(lineno: int, class_id: int, vals, source) -> NormBox:
    box = NormBox(class_id, *vals[:4])
    problems = box.problems()
    if problems:
        raise LabelError(lineno, "out of range: " + "; ".join(problems), source)
    return box


def parse_label_file(text: str, source: Optional[str] = None) -> List[NormBox]:
    """Parse label text; blank lines are ignored.

    >>> parse_label_file("0 0.5 0.5 0.25 0.25")
    [NormBox(class_id=0, cx=0.5, cy=0.5, w=0.25, h=0.25)]
    """
    return [_checked_box(n, c, v, source) for n, c, v in _parse_numbers(text, 5, source)]


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def serialize_label_file(boxes: Iterable[NormBox]) -> str:
    return "".join(
        f"{b.class_id} {_fmt(b.cx)} {_fmt(b.cy)} {_fmt(b.w)} {_fmt(b.h)}\n" for b in boxes
    )


def parse_prediction_file(text: str, source: Optional[str] = None) -> List[Detection]:
    """Parse ``class cx cy w h confidence`` lines."""
    dets = []
    for lineno, class_id, vals in _parse_numbers(text, 6, source):
        box = _checked_box(lineno, class_id, vals, source)
        conf = vals[4]
        if not 0.0 <= conf <= 1.0:
            raise LabelError(lineno, f"confidence {conf} outside [0, 1]", source)
        dets.append(Detection(box, conf))
    return dets


def serialize_prediction_file(dets: Iterable[Detection]) -> str:
    return "".join(
        f"{d.box.class_id} {_fmt(d.box.cx)} {_fmt(d.box.cy)} {_fmt(d.box.w)} "
        f"{_fmt(d.box.h)} {_fmt(d.confidence)}\n"
        for d in dets
    )


def read_label_file(path) -> List[NormBox]:
    path = Path(path)
    return parse_label_file(path.read_text(encoding="utf-8"), source=str(path))


def write_label_file(boxes: Iterable[NormBox], path) -> None:
    Path(path).write_text(serialize_label_file(boxes), encoding="utf-8")


def clip_box(box: NormBox) -> Optional[NormBox]:
    """Intersect ``box`` with the unit square.

    Returns ``None`` when the clipped width or height is under 2 px at
    640x640.
    """
    cx, w = _clip_axis(box.cx, box.w)
    cy, h = _clip_axis(box.cy, box.h)
    if not all(math.isfinite(v) for v in (cx, cy, w, h)):
        return None
    if w < MIN_CLIPPED_SIZE or h < MIN_CLIPPED_SIZE:
        return None
    if (cx, cy, w, h) == (box.cx, box.cy, box.w, box.h):
        return box
    return NormBox(box.class_id, cx, cy, w, h)


def _clip_axis(center: float, size: float) -> Tuple[float, float]:
    lo, hi = center - size / 2, center + size / 2
    if lo >= 0.0 and hi <= 1.0:
        return center, size
    lo, hi = max(0.0, lo), min(1.0, hi)
    return (lo + hi) / 2, hi - lo


def label_path_for(image_path, labels_dir=None) -> Path:
    """``images/<stem>.<ext>`` -> ``labels/<stem>.txt``."""
    image_path = Path(image_path)
    if labels_dir is None:
        labels_dir = image_path.parent.parent / "labels"
    return Path(labels_dir) / f"{image_path.stem}.txt"
