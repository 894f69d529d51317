"""Pipeline configuration (``section.key = value`` text) and trainer export."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .augment import AugPolicy
from .datasetops import SplitSpec, VariantSpec, variant_spec
from .labels import Modality


class ConfigError(ValueError):
    """Invalid or incomplete configuration (CLI exit code 1)."""


_POLICY_KEYS = {f"augment.{f.name}": f.name for f in fields(AugPolicy)}
_KNOWN_KEYS = {
    "run.seed",
    "run.workers",
    "run.output",
    "dataset.root",
    "dataset.manifest",
    "augment.multiplicity",
    "synth.multiplicity",
    "synth.jitter",
    "synth.patient_multiplicity",
    "split.holdout_patient",
    "split.test_fraction",
    "split.test_modality",
    "split.strict",
    "variant.name",
    "variant.synth_count",
    "trainer.batch",
    "trainer.patience",
    "trainer.imgsz",
    "eval.manifest",
    "eval.predictions",
    "eval.allow_missing",
    "eval.phase",
} | set(_POLICY_KEYS)


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _bool(key: str, value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _num(key: str, value: str, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _multiplicity_map(key: str, value: str) -> Dict[str, int]:
    out = {}
    for item in filter(None, (s.strip() for s in value.split(","))):
        pid, sep, count = item.partition(":")
        if not sep:
            raise ConfigError(f"{key}: expected 'patient:count' items, got {item!r}")
        out[pid.strip()] = _num(key, count.strip(), int)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    manifest: Optional[Path] = None
    dataset_root: Optional[Path] = None
    output: Path = Path("out")
    workers: int = 1
    policy: AugPolicy = field(default_factory=AugPolicy)
    augment_multiplicity: int = 1
    synth_multiplicity: int = 1
    synth_jitter: float = 0.1
    synth_patient_multiplicity: Dict[str, int] = field(default_factory=dict)
    holdout_patient: str = "6"
    test_fraction: float = 0.1
    test_modality: Modality = Modality.WL
    strict_split: bool = False
    variant: str = "WL"
    synth_count: Optional[int] = None
    batch: int = 16
    patience: int = 100
    imgsz: int = 640
    eval_manifest: Optional[Path] = None
    eval_predictions: Optional[Path] = None
    eval_allow_missing: bool = False
    eval_phase: str = "Test"

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            holdout_patient=self.holdout_patient,
            test_fraction=self.test_fraction,
            seed=self.seed,
            test_modality=self.test_modality,
            strict=self.strict_split,
        )

    def variant_spec(self) -> VariantSpec:
        return variant_spec(self.variant, self.synth_count)

    def multiplicity_for(self, patient_id: str) -> int:
        return self.synth_patient_multiplicity.get(str(patient_id), self.synth_multiplicity)

    def with_overrides(self, **kw) -> "PipelineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg

    def validate(self, need_manifest: bool = False) -> None:
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.augment_multiplicity < 1 or self.synth_multiplicity < 1:
            raise ConfigError("multiplicities must be >= 1")
        if any(v < 0 for v in self.synth_patient_multiplicity.values()):
            raise ConfigError("synth.patient_multiplicity counts must be >= 0")
        if not 0.0 <= self.synth_jitter < 1.0:
            raise ConfigError("synth.jitter must be in [0, 1)")
        try:
            self.split_spec()
            self.variant_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if need_manifest:
            if self.manifest is None:
                raise ConfigError("dataset.manifest is required")
            if not self.manifest.is_file():
                raise ConfigError(f"dataset.manifest {self.manifest} does not exist")


def config_from_mapping(values: Dict[str, str], base: Path = Path(".")) -> PipelineConfig:
    unknown = sorted(set(values) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "run.seed" not in values:
        raise ConfigError("run.seed is required; there is no default seed")

    def path(key):
        return (base / values[key]) if values.get(key) else None

    policy_kw = {name: _num(key, values[key]) for key, name in _POLICY_KEYS.items() if key in values}
    try:
        policy = AugPolicy(**policy_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        modality = Modality(values.get("split.test_modality", "WL"))
    except ValueError:
        raise ConfigError(f"split.test_modality: unknown modality {values['split.test_modality']!r}") from None
    root = path("dataset.root")
    manifest = values.get("dataset.manifest")
    cfg = PipelineConfig(
        seed=_num("run.seed", values["run.seed"], int),
        manifest=((root or base) / manifest) if manifest else None,
        dataset_root=root,
        output=path("run.output") or base / "out",
        workers=_num("run.workers", values.get("run.workers", "1"), int),
        policy=policy,
        augment_multiplicity=_num("augment.multiplicity", values.get("augment.multiplicity", "1"), int),
        synth_multiplicity=_num("synth.multiplicity", values.get("synth.multiplicity", "1"), int),
        synth_jitter=_num("synth.jitter", values.get("synth.jitter", "0.1")),
        synth_patient_multiplicity=_multiplicity_map(
            "synth.patient_multiplicity", values.get("synth.patient_multiplicity", "")
        ),
        holdout_patient=values.get("split.holdout_patient", "6"),
        test_fraction=_num("split.test_fraction", values.get("split.test_fraction", "0.1")),
        test_modality=modality,
        strict_split=_bool("split.strict", values.get("split.strict", "false")),
        variant=values.get("variant.name", "WL"),
        synth_count=_num("variant.synth_count", values["variant.synth_count"], int)
        if values.get("variant.synth_count")
        else None,
        batch=_num("trainer.batch", values.get("trainer.batch", "16"), int),
        patience=_num("trainer.patience", values.get("trainer.patience", "100"), int),
        imgsz=_num("trainer.imgsz", values.get("trainer.imgsz", "640"), int),
        eval_manifest=path("eval.manifest"),
        eval_predictions=path("eval.predictions"),
        eval_allow_missing=_bool("eval.allow_missing", values.get("eval.allow_missing", "false")),
        eval_phase=values.get("eval.phase", "Test"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    """Read a config file; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    values = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    return config_from_mapping(values, path.parent)


# --- trainer export ---------------------------------------------------------

# trainer key -> AugPolicy field
TRAINER_AUG_KEYS = {
    "scale": "zoom",
    "degrees": "rotation",
    "translate": "translate",
    "shear": "shear",
    "fliplr": "hflip_p",
    "hsv_h": "hue",
    "hsv_s": "saturation",
    "hsv_v": "value",
    "mixup": "mixup_p",
    "mosaic": "mosaic_p",
}


@dataclass(frozen=True)
class TrainerExport:
    batch: int
    patience: int
    imgsz: int
    policy: AugPolicy

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "TrainerExport":
        return cls(cfg.batch, cfg.patience, cfg.imgsz, cfg.policy)

    def to_text(self) -> str:
        lines = [f"batch: {self.batch}", f"patience: {self.patience}", f"imgsz: {self.imgsz}"]
        lines += [f"{k}: {getattr(self.policy, name)!r}" for k, name in TRAINER_AUG_KEYS.items()]
        return "\n".join(lines) + "\n"


def parse_trainer_export(text: str) -> TrainerExport:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"trainer export line {lineno}: expected 'key: value'")
        values[key.strip()] = value.strip()
    missing = {"batch", "patience", "imgsz", *TRAINER_AUG_KEYS} - set(values)
    if missing:
        raise ConfigError(f"trainer export lacks keys: {', '.join(sorted(missing))}")
    policy = AugPolicy(**{name: _num(k, values[k]) for k, name in TRAINER_AUG_KEYS.items()})
    return TrainerExport(
        batch=_num("batch", values["batch"], int),
        patience=_num("patience", values["patience"], int),
        imgsz=_num("imgsz", values["imgsz"], int),
        policy=policy,
    )
