"""Manifests, subsampling, dataset variants and holdout-patient splits."""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .augment import derive_seed
from .labels import LabeledFrame, Modality, read_label_file
from .synthcolor import parse_synth_stem

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    frames: Tuple[LabeledFrame, ...] = ()

    def __post_init__(self):
        frames = tuple(self.frames)
        dupes = [s for s, n in Counter(f.stem for f in frames).items() if n > 1]
        if dupes:
            raise ManifestError(f"duplicate frame stems: {sorted(dupes)[:5]}")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def stems(self) -> List[str]:
        return [f.stem for f in self.frames]

    def by_modality(self, modality) -> List[LabeledFrame]:
        modality = Modality(modality)
        return [f for f in self.frames if f.modality is modality]

    def patients(self) -> List[str]:
        return sorted({f.patient_id for f in self.frames}, key=_patient_key)

    def missing_files(self) -> List[Path]:
        missing = []
        for f in self.frames:
            missing += [p for p in (f.image_ref, f.label_ref) if not p.is_file()]
        return missing


def _patient_key(pid: str):
    return (0, int(pid), pid) if pid.isdigit() else (1, 0, pid)


def read_manifest(path, load_labels: bool = True) -> DatasetManifest:
    """Read a tab-separated manifest.

    Columns: ``stem patient_id modality image_path label_path``. Relative
    paths are taken relative to the manifest's directory. Blank lines and
    ``#`` comments are skipped.
    """
    path = Path(path)
    base = path.parent
    frames = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        cols = raw.split("\t")
        if len(cols) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, found {len(cols)}")
        stem, patient, modality, image, label = (c.strip() for c in cols)
        try:
            modality = Modality(modality)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown modality {modality!r}") from None
        image_ref = base / image
        label_ref = base / label
        boxes = read_label_file(label_ref) if load_labels else ()
        frames.append(
            LabeledFrame(
                stem=stem,
                patient_id=patient,
                modality=modality,
                image_ref=image_ref,
                label_ref=label_ref,
                boxes=boxes,
                source_stem=parse_synth_stem(stem) if modality is Modality.SYNTH else None,
            )
        )
    return DatasetManifest(tuple(frames))


def _rel(p: Path, base: Path) -> str:
    try:
        return Path(os.path.relpath(p, base)).as_posix()
    except ValueError:
        return Path(p).as_posix()


def format_manifest(manifest: Iterable[LabeledFrame], base) -> str:
    base = Path(base)
    return "".join(
        f"{f.stem}\t{f.patient_id}\t{f.modality.value}\t{_rel(f.image_ref, base)}\t{_rel(f.label_ref, base)}\n"
        for f in manifest
    )


def write_manifest(manifest: Iterable[LabeledFrame], path) -> None:
    path = Path(path)
    path.write_text(format_manifest(manifest, path.parent), encoding="utf-8")


def subsample(frames: Sequence, stride: int) -> list:
    """Keep every ``stride``-th frame starting with the first."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(frames[::stride])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, key))


# --- variants ---------------------------------------------------------------


@dataclass(frozen=True)
class VariantSpec:
    """``synth_count`` caps the synthetic frames added (seeded draw); None keeps all."""

    name: str
    wl_fraction: float = 1.0
    include_synth: bool = False
    synth_count: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.wl_fraction <= 1.0:
            raise ValueError(f"wl_fraction {self.wl_fraction} outside (0, 1]")
        if self.synth_count is not None and self.synth_count < 0:
            raise ValueError("synth_count must be >= 0")


VARIANTS: Dict[str, VariantSpec] = {
    "WL": VariantSpec("WL", 1.0, False),
    "WL+GAN": VariantSpec("WL+GAN", 1.0, True),
    "WL50+GAN": VariantSpec("WL50+GAN", 0.5, True),
}


def variant_spec(name: str, synth_count: Optional[int] = None) -> VariantSpec:
    try:
        base = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}") from None
    return VariantSpec(base.name, base.wl_fraction, base.include_synth, synth_count)


def stratified_fraction(frames: Sequence[LabeledFrame], fraction: float, rng: np.random.Generator) -> List[LabeledFrame]:
    """Keep ``round(fraction * n)`` frames spread over patients.

    Per-patient quotas use largest remainders; ties go to the patient with
    the lower id. Frames within a patient are drawn at random and returned
    in their original order.
    """
    total = round_half_up(fraction * len(frames))
    groups: Dict[str, List[int]] = {}
    for i, f in enumerate(frames):
        groups.setdefault(f.patient_id, []).append(i)
    patients = sorted(groups, key=_patient_key)
    exact = {p: fraction * len(groups[p]) for p in patients}
    quota = {p: int(math.floor(exact[p])) for p in patients}
    leftover = total - sum(quota.values())
    for p in sorted(patients, key=lambda p: (-(exact[p] - quota[p]), _patient_key(p)))[:max(leftover, 0)]:
        quota[p] += 1
    keep = set()
    for p in patients:
        members = sorted(groups[p], key=lambda i: frames[i].stem)
        picks = rng.permutation(len(members))[: quota[p]]
        keep.update(members[int(k)] for k in picks)
    return [f for i, f in enumerate(frames) if i in keep]


def build_variant(manifest: DatasetManifest, spec: VariantSpec, seed: int) -> DatasetManifest:
    """Assemble a dataset variant; NIR frames never make it in."""
    wl = manifest.by_modality(Modality.WL)
    if spec.wl_fraction < 1.0:
        wl = stratified_fraction(wl, spec.wl_fraction, _rng(seed, f"variant/{spec.name}/wl"))
    synth: List[LabeledFrame] = []
    if spec.include_synth:
        synth = manifest.by_modality(Modality.SYNTH)
        if not synth:
            raise ManifestError(f"variant {spec.name} needs synthetic frames, manifest has none")
        if spec.synth_count is not None and spec.synth_count < len(synth):
            ordered = sorted(synth, key=lambda f: f.stem)
            idx = _rng(seed, f"variant/{spec.name}/synth").permutation(len(ordered))[: spec.synth_count]
            chosen = {ordered[int(i)].stem for i in idx}
            synth = [f for f in synth if f.stem in chosen]
    keep = {f.stem for f in wl} | {f.stem for f in synth}
    frames = tuple(f for f in manifest.frames if f.stem in keep)
    if not frames:
        raise ManifestError(f"variant {spec.name} is empty")
    log.info("variant %s: %d WL + %d SYNTH = %d frames", spec.name, len(wl), len(synth), len(frames))
    return DatasetManifest(frames)


# --- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    holdout_patient: str = "6"
    test_fraction: float = 0.1
    seed: int = 0
    test_modality: Modality = Modality.WL
    strict: bool = False

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction {self.test_fraction} outside (0, 1)")
        object.__setattr__(self, "holdout_patient", str(self.holdout_patient))
        object.__setattr__(self, "test_modality", Modality(self.test_modality))


@dataclass(frozen=True)
class SplitResult:
    trainval: DatasetManifest
    test: DatasetManifest
    dropped: Tuple[LabeledFrame, ...] = ()
    target_test_size: int = 0
    warnings: Tuple[str, ...] = field(default=())

    def __iter__(self):
        return iter((self.trainval, self.test))


def target_size(n_frames: int, fraction: float) -> int:
    """Test-set size: ``fraction * n`` rounded half up (202 -> 20, 367 -> 37)."""
    return round_half_up(fraction * n_frames)


def split(manifest: DatasetManifest, spec: SplitSpec) -> SplitResult:
    """Hold out one patient entirely and top the test set up to the target.

    Holdout frames of the test modality all go to test; the holdout's other
    frames (e.g. synthetic ones) are dropped so they can leak into neither
    set. Top-up frames are drawn frame-wise from the other patients, or
    patient-wise when ``spec.strict`` is set.
    """
    frames = sorted(manifest.frames, key=lambda f: f.stem)
    holdout = [f for f in frames if f.patient_id == spec.holdout_patient]
    if not holdout:
        raise SplitError(f"holdout patient {spec.holdout_patient!r} not in manifest")
    target = target_size(len(frames), spec.test_fraction)
    warnings = []
    test = [f for f in holdout if f.modality is spec.test_modality]
    dropped = [f for f in holdout if f.modality is not spec.test_modality]
    if len(test) > target:
        msg = (
            f"holdout patient {spec.holdout_patient} alone has {len(test)} test frames, "
            f"above the target of {target}"
        )
        log.warning(msg)
        warnings.append(msg)
    others = [f for f in frames if f.patient_id != spec.holdout_patient]
    rng = _rng(spec.seed, "split")
    chosen = set()
    if spec.strict:
        by_patient: Dict[str, List[LabeledFrame]] = {}
        for f in others:
            by_patient.setdefault(f.patient_id, []).append(f)
        pids = sorted(by_patient, key=_patient_key)
        for k in rng.permutation(len(pids)):
            group = by_patient[pids[int(k)]]
            eligible = [f for f in group if f.modality is spec.test_modality]
            if eligible and len(test) + len(chosen) + len(eligible) <= target:
                chosen.update(f.stem for f in eligible)
                dropped += [f for f in group if f.modality is not spec.test_modality]
    else:
        eligible = [f for f in others if f.modality is spec.test_modality]
        need = max(0, target - len(test))
        for k in rng.permutation(len(eligible))[:need]:
            chosen.add(eligible[int(k)].stem)
    test += [f for f in others if f.stem in chosen]
    gone = {f.stem for f in test} | {f.stem for f in dropped}
    trainval = [f for f in others if f.stem not in gone]
    return SplitResult(
        trainval=DatasetManifest(tuple(trainval)),
        test=DatasetManifest(tuple(sorted(test, key=lambda f: f.stem))),
        dropped=tuple(sorted(dropped, key=lambda f: f.stem)),
        target_test_size=target,
        warnings=tuple(warnings),
    )


def split_violations(result: SplitResult, spec: SplitSpec) -> List[str]:
    """Every broken split invariant, as messages; empty when all hold."""
    problems = []
    train_stems = set(result.trainval.stems)
    test_stems = set(result.test.stems)
    both = train_stems & test_stems
    if both:
        problems.append(f"{len(both)} frames in both sets")
    for f in result.trainval:
        if f.patient_id == spec.holdout_patient:
            problems.append(f"holdout frame {f.stem} in train+val")
    for f in result.test:
        if f.modality is not spec.test_modality:
            problems.append(f"test frame {f.stem} has modality {f.modality.value}")
        if f.modality is Modality.SYNTH:
            problems.append(f"synthetic frame {f.stem} in test")
    if spec.strict:
        shared = {f.patient_id for f in result.trainval} & {f.patient_id for f in result.test}
        if shared:
            problems.append(f"patients in both sets: {sorted(shared, key=_patient_key)}")
    return problems


def split_summary(result: SplitResult, spec: SplitSpec) -> str:
    """Per-patient frame counts for both sets, as aligned text."""
    rows = []
    tv = Counter((f.patient_id, f.modality.value) for f in result.trainval)
    te = Counter((f.patient_id, f.modality.value) for f in result.test)
    dr = Counter(f.patient_id for f in result.dropped)
    pids = sorted(
        {p for p, _ in tv} | {p for p, _ in te} | set(dr), key=_patient_key
    )
    header = f"{'patient':<10}{'train WL':>10}{'train SYNTH':>13}{'test':>8}{'dropped':>9}"
    rows.append(header)
    for p in pids:
        rows.append(
            f"{p:<10}{tv[(p, 'WL')]:>10}{tv[(p, 'SYNTH')]:>13}"
            f"{sum(v for (q, _), v in te.items() if q == p):>8}{dr[p]:>9}"
        )
    rows.append(
        f"{'total':<10}{sum(v for (_, m), v in tv.items() if m == 'WL'):>10}"
        f"{sum(v for (_, m), v in tv.items() if m == 'SYNTH'):>13}{len(result.test):>8}{len(result.dropped):>9}"
    )
    lines = [
        f"holdout patient: {spec.holdout_patient}",
        f"test fraction: {spec.test_fraction} (target {result.target_test_size})",
        f"strict patient-level: {'yes' if spec.strict else 'no'}",
        f"train+val: {len(result.trainval)}",
        f"test: {len(result.test)}",
        "",
        *rows,
    ]
    lines += [f"warning: {w}" for w in result.warnings]
    return "\n".join(lines) + "\n"
