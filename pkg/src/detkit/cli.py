"""Command-line pipeline: augment, synth, split, eval, export-trainer.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 data or
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import PoolExhaustedError, Sample, augment_frame, derive_seed
from .config import ConfigError, PipelineConfig, TrainerExport, load_config
from .datasetops import (
    DatasetManifest,
    ManifestError,
    SplitError,
    build_variant,
    read_manifest,
    split,
    split_summary,
    split_violations,
    write_manifest,
)
from .imagery import ImageFormatError, read_image, write_image
from .labels import (
    LabeledFrame,
    LabelError,
    Modality,
    parse_prediction_file,
    write_label_file,
)
from .metrics import EvalReport, evaluate
from .synthcolor import EmptyStatPoolError, channel_stats, synthesize

log = logging.getLogger("detkit")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

DATA_ERRORS = (
    ImageFormatError,
    LabelError,
    ManifestError,
    SplitError,
    PoolExhaustedError,
    EmptyStatPoolError,
    OSError,
)


class DataError(RuntimeError):
    """A command could not produce its outputs from the given data."""


# --- frame pool ----------------------------------------------------------------


class FramePool:
    """Lazy, picklable sequence of :class:`Sample` backed by a manifest."""

    def __init__(self, frames: Sequence[LabeledFrame]):
        self.frames = tuple(frames)
        self.stems = [f.stem for f in self.frames]

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Sample:
        f = self.frames[i]
        return Sample(read_image(f.image_ref), f.boxes, f.stem)


def _run_tasks(fn, tasks: list, workers: int, initializer=None, initargs=()):
    """Map ``fn`` over ``tasks`` in order, in-process or on a process pool."""
    if workers <= 1 or len(tasks) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))


def _layout(root: Path) -> Tuple[Path, Path]:
    images, labels = root / "images", root / "labels"
    images.mkdir(parents=True, exist_ok=True)
    labels.mkdir(parents=True, exist_ok=True)
    return images, labels


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


# --- augment -------------------------------------------------------------------

_AUG_STATE: dict = {}


def _aug_init(pool, policy, images, labels):
    _AUG_STATE.update(pool=pool, policy=policy, images=images, labels=labels)


def _aug_task(task):
    index, k, seed, out_stem = task
    st = _AUG_STATE
    frame = st["pool"].frames[index]
    try:
        sample = st["pool"][index]
        out = augment_frame(sample, st["pool"], st["policy"], seed)
        write_image(out.image, st["images"] / f"{out_stem}.ppm")
        write_label_file(out.boxes, st["labels"] / f"{out_stem}.txt")
        return {"input": frame.stem, "seed": seed, "output": out_stem, "boxes": len(out.boxes)}
    except DATA_ERRORS as exc:
        return {"input": frame.stem, "seed": seed, "output": None, "error": str(exc)}


def _probe_task(frame: LabeledFrame) -> Optional[str]:
    try:
        read_image(frame.image_ref)
    except DATA_ERRORS as exc:
        return str(exc)
    return None


@dataclass
class CommandResult:
    out_dir: Path
    records: List[dict]
    failures: List[dict]


def cmd_augment(cfg: PipelineConfig) -> CommandResult:
    """Materialize ``augment.multiplicity`` augmented copies of each variant frame."""
    cfg.validate(need_manifest=True)
    manifest = build_variant(read_manifest(cfg.manifest), cfg.variant_spec(), cfg.seed)
    out_dir = cfg.output / "augment"
    images, labels = _layout(out_dir)
    # unreadable frames are reported and kept out of the mosaic/mixup pool
    errors = _run_tasks(_probe_task, list(manifest.frames), cfg.workers)
    rows = [
        {"input": f.stem, "seed": None, "output": None, "error": err}
        for f, err in zip(manifest.frames, errors)
        if err is not None
    ]
    pool = FramePool([f for f, err in zip(manifest.frames, errors) if err is None])
    tasks = []
    for i, f in enumerate(pool.frames):
        for k in range(cfg.augment_multiplicity):
            tasks.append((i, k, derive_seed(cfg.seed, f"augment/{f.stem}/{k}"), f"{f.stem}_aug{k}"))
    rows += _run_tasks(_aug_task, tasks, cfg.workers, _aug_init, (pool, cfg.policy, images, labels))
    ok = [r for r in rows if r.get("output")]
    failed = [r for r in rows if not r.get("output")]
    for r in failed:
        log.error("augment %s failed: %s", r["input"], r["error"])
    _write_jsonl(out_dir / "augment_log.jsonl", rows)
    src = {f.stem: f for f in manifest.frames}
    produced = [
        LabeledFrame(
            stem=r["output"],
            patient_id=src[r["input"]].patient_id,
            modality=src[r["input"]].modality,
            image_ref=images / f"{r['output']}.ppm",
            label_ref=labels / f"{r['output']}.txt",
        )
        for r in ok
    ]
    write_manifest(produced, out_dir / "manifest.tsv")
    if manifest.frames and not ok:
        raise DataError("every frame failed to augment")
    return CommandResult(out_dir, ok, failed)


# --- synth ---------------------------------------------------------------------

_SYN_STATE: dict = {}


def _syn_init(pool, jitter, out_dir):
    _SYN_STATE.update(pool=pool, jitter=jitter, out_dir=out_dir)


def _stats_task(frame: LabeledFrame):
    try:
        return channel_stats(read_image(frame.image_ref))
    except DATA_ERRORS as exc:
        log.error("cannot read %s: %s", frame.image_ref, exc)
        return None


def _syn_task(task):
    frame, k, seed = task
    st = _SYN_STATE
    try:
        image = read_image(frame.image_ref)
        rng = np.random.default_rng(seed)
        synth, out, record = synthesize(frame, image, st["pool"], rng, st["jitter"], k, st["out_dir"])
        write_image(out, synth.image_ref)
        write_label_file(synth.boxes, synth.label_ref)
        row = record.as_dict()
        row["seed"] = seed
        return row, synth
    except DATA_ERRORS as exc:
        return {"source": frame.stem, "seed": seed, "output": None, "error": str(exc)}, None


def cmd_synth(cfg: PipelineConfig) -> CommandResult:
    """Recolor every WL frame (per-patient multiplicity) into ``_gan`` pairs."""
    cfg.validate(need_manifest=True)
    manifest = read_manifest(cfg.manifest)
    sources = sorted(manifest.by_modality(Modality.WL), key=lambda f: f.stem)
    out_dir = cfg.output / "synth"
    _layout(out_dir)
    stats = _run_tasks(_stats_task, sources, cfg.workers)
    pool = [s for s in stats if s is not None]
    if not pool:
        raise EmptyStatPoolError("no readable WL frames to build the color statistics pool")
    tasks = []
    for f in sources:
        for k in range(cfg.multiplicity_for(f.patient_id)):
            tasks.append((f, k, derive_seed(cfg.seed, f"synth/{f.stem}/{k}")))
    results = _run_tasks(_syn_task, tasks, cfg.workers, _syn_init, (pool, cfg.synth_jitter, out_dir))
    rows = [r for r, _ in results]
    made = [s for _, s in results if s is not None]
    failed = [r for r in rows if not r.get("output")]
    for r in failed:
        log.error("synth %s failed: %s", r["source"], r["error"])
    _write_jsonl(out_dir / "synth_log.jsonl", rows)
    write_manifest(made, out_dir / "manifest.tsv")
    write_manifest(list(manifest.frames) + made, out_dir / "combined_manifest.tsv")
    if tasks and not made:
        raise DataError("every frame failed to synthesize")
    return CommandResult(out_dir, [r for r in rows if r.get("output")], failed)


# --- split ---------------------------------------------------------------------


def cmd_split(cfg: PipelineConfig):
    """Build the configured variant and write trainval/test manifests + summary."""
    cfg.validate(need_manifest=True)
    manifest = read_manifest(cfg.manifest, load_labels=False)
    spec = cfg.split_spec()
    variant = build_variant(manifest, cfg.variant_spec(), cfg.seed)
    result = split(variant, spec)
    problems = split_violations(result, spec)
    if problems:
        raise DataError("split invariants violated: " + "; ".join(problems))
    out_dir = cfg.output / "split"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(variant, out_dir / "variant.tsv")
    write_manifest(result.trainval, out_dir / "trainval.tsv")
    write_manifest(result.test, out_dir / "test.tsv")
    (out_dir / "summary.txt").write_text(
        f"variant: {cfg.variant} ({len(variant)} frames)\n" + split_summary(result, spec), encoding="utf-8"
    )
    return result


# --- eval ----------------------------------------------------------------------


def load_predictions(stems: Sequence[str], pred_dir: Path, allow_missing: bool) -> Dict[str, list]:
    missing = [s for s in stems if not (pred_dir / f"{s}.pred.txt").is_file()]
    if missing and not allow_missing:
        for s in missing:
            log.error("missing prediction file %s", pred_dir / f"{s}.pred.txt")
        raise DataError(f"{len(missing)} prediction files missing (pass --allow-missing to treat as empty)")
    preds = {}
    for s in stems:
        path = pred_dir / f"{s}.pred.txt"
        if path.is_file():
            preds[s] = parse_prediction_file(path.read_text(encoding="utf-8"), str(path))
        else:
            log.warning("no predictions for %s; counting zero detections", s)
            preds[s] = []
    return preds


def evaluate_manifest(manifest: DatasetManifest, pred_dir: Path, allow_missing: bool = False) -> EvalReport:
    gts = {f.stem: list(f.boxes) for f in manifest.frames}
    return evaluate(load_predictions(list(gts), Path(pred_dir), allow_missing), gts)


def format_report_csv(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    lines = ["Phases," + ",".join(EvalReport.COLUMNS)]
    for name, rep in rows:
        lines.append(name + "," + ",".join(f"{v:.4f}" for v in rep.values()))
    return "\n".join(lines) + "\n"


def format_report_text(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    names = ["Phases"] + [n for n, _ in rows]
    w0 = max(len(n) for n in names)
    cols = EvalReport.COLUMNS
    widths = [max(len(c), 6) for c in cols]
    out = [f"{'Phases':<{w0}}  " + "  ".join(f"{c:>{w}}" for c, w in zip(cols, widths))]
    for name, rep in rows:
        out.append(f"{name:<{w0}}  " + "  ".join(f"{v:>{w}.4f}" for v, w in zip(rep.values(), widths)))
    return "\n".join(out) + "\n"


def cmd_eval(
    phases: Sequence[Tuple[str, Path]],
    pred_dir: Path,
    out_dir: Path,
    allow_missing: bool = False,
) -> List[Tuple[str, EvalReport]]:
    """Evaluate one or more ground-truth manifests and write report files."""
    rows = []
    for name, manifest_path in phases:
        manifest = read_manifest(manifest_path)
        rows.append((name, evaluate_manifest(manifest, pred_dir, allow_missing)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(format_report_csv(rows), encoding="utf-8")
    (out_dir / "report.txt").write_text(format_report_text(rows), encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps([{"phase": n, **r.as_dict()} for n, r in rows], indent=2) + "\n", encoding="utf-8"
    )
    return rows


# --- export-trainer ------------------------------------------------------------


def cmd_export_trainer(cfg: PipelineConfig) -> Path:
    cfg.output.mkdir(parents=True, exist_ok=True)
    path = cfg.output / "trainer.yaml"
    path.write_text(TrainerExport.from_config(cfg).to_text(), encoding="utf-8")
    return path


# --- argument parsing ----------------------------------------------------------


def _parse_phase(value: str, default_name: str) -> Tuple[str, Path]:
    name, sep, path = value.partition("=")
    if sep and name:
        return name, Path(path)
    return default_name, Path(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="pipeline config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--variant", help="override variant.name (WL, WL+GAN, WL50+GAN)")
        p.add_argument("--out", type=Path, help="override run.output")
        p.add_argument("--workers", type=int, help="override run.workers")

    common(sub.add_parser("augment", help="materialize augmented frames"))
    common(sub.add_parser("synth", help="materialize synthetic color variants"))
    common(sub.add_parser("split", help="build a variant and split it"))
    common(sub.add_parser("export-trainer", help="write trainer hyperparameters"))
    ev = sub.add_parser("eval", help="score prediction files against ground truth")
    common(ev, config_required=False)
    ev.add_argument(
        "--manifest",
        action="append",
        default=[],
        metavar="[PHASE=]PATH",
        help="ground-truth manifest; repeat for several report rows",
    )
    ev.add_argument("--predictions", type=Path, help="directory of <stem>.pred.txt files")
    ev.add_argument("--allow-missing", action="store_true", help="treat missing prediction files as empty")
    return parser


def _config_from_args(args) -> Optional[PipelineConfig]:
    if args.config is None:
        return None
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, variant=args.variant, output=args.out, workers=args.workers)


def _run(args) -> int:
    cfg = _config_from_args(args)
    if args.command == "augment":
        res = cmd_augment(cfg)
        print(f"augmented {len(res.records)} frames into {res.out_dir} ({len(res.failures)} failed)")
    elif args.command == "synth":
        res = cmd_synth(cfg)
        print(f"synthesized {len(res.records)} frames into {res.out_dir} ({len(res.failures)} failed)")
    elif args.command == "split":
        res = cmd_split(cfg)
        print(f"train+val {len(res.trainval)}, test {len(res.test)}")
    elif args.command == "export-trainer":
        print(cmd_export_trainer(cfg))
    elif args.command == "eval":
        default_name = cfg.eval_phase if cfg else "Test"
        phases = [_parse_phase(v, default_name) for v in args.manifest]
        if not phases and cfg and cfg.eval_manifest:
            phases = [(cfg.eval_phase, cfg.eval_manifest)]
        pred_dir = args.predictions or (cfg.eval_predictions if cfg else None)
        if not phases or pred_dir is None:
            raise ConfigError("eval needs --manifest and --predictions (or eval.* config keys)")
        out_dir = args.out or (cfg.output if cfg else Path("."))
        allow = args.allow_missing or bool(cfg and cfg.eval_allow_missing)
        rows = cmd_eval(phases, pred_dir, out_dir, allow)
        sys.stdout.write(format_report_text(rows))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, *DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
