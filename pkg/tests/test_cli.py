import json
import shutil
from pathlib import Path

import pytest

from detkit.augment import AugPolicy
from detkit.cli import cmd_augment, cmd_eval, cmd_synth, format_report_csv, main
from detkit.config import (
    ConfigError,
    TrainerExport,
    config_from_mapping,
    load_config,
    parse_key_values,
    parse_trainer_export,
)
from detkit.datasetops import read_manifest
from detkit.metrics import EvalReport
from pipeline import tree_digest, write_config, write_predictions
from scenes import COHORT_WL, write_dataset

FIXTURE = Path(__file__).parent / "fixtures" / "eval10"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, {"5": 4, "6": 2, "7": 4}, seed=3, size=32)
    return root


def config_for(tmp_path, dataset, **extra):
    values = dict(run__seed=7, dataset__manifest=dataset / "manifest.tsv", run__output=tmp_path / "out")
    values.update(extra)
    return write_config(tmp_path / "pipeline.conf", **values)


class TestConfig:
    def test_parse(self):
        text = "# header\nrun.seed = 3  # inline\n\naugment.zoom=0.25\n"
        assert parse_key_values(text) == {"run.seed": "3", "augment.zoom": "0.25"}

    @pytest.mark.parametrize(
        "text, reason",
        [
            ("run.seed 3", "key = value"),
            ("run.seed = 1\nrun.seed = 2", "duplicate"),
            ("= 4", "empty key"),
        ],
    )
    def test_syntax_errors(self, text, reason):
        with pytest.raises(ConfigError, match=reason):
            parse_key_values(text)

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            config_from_mapping({"augment.zoom": "0.2"})

    @pytest.mark.parametrize(
        "values",
        [
            {"run.seed": "1", "bogus.key": "1"},
            {"run.seed": "x"},
            {"run.seed": "1", "augment.hflip_p": "2"},
            {"run.seed": "1", "split.test_modality": "XRAY"},
            {"run.seed": "1", "split.strict": "maybe"},
            {"run.seed": "1", "variant.name": "NIR"},
            {"run.seed": "1", "run.workers": "0"},
            {"run.seed": "1", "synth.patient_multiplicity": "10-2"},
        ],
    )
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            config_from_mapping(values)

    def test_values_and_paths(self, tmp_path):
        path = write_config(
            tmp_path / "c.conf",
            run__seed=5,
            dataset__root="data",
            dataset__manifest="m.tsv",
            augment__zoom=0.25,
            synth__patient_multiplicity="10:2, 11:2",
            split__strict="yes",
        )
        cfg = load_config(path)
        assert cfg.seed == 5
        assert cfg.manifest == tmp_path / "data" / "m.tsv"
        assert cfg.policy == AugPolicy(zoom=0.25)
        assert (cfg.multiplicity_for("10"), cfg.multiplicity_for("11"), cfg.multiplicity_for("5")) == (2, 2, 1)
        assert cfg.split_spec().strict

    def test_overrides(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.conf", run__seed=5))
        assert cfg.with_overrides(seed=9, variant=None).seed == 9
        with pytest.raises(ConfigError):
            cfg.with_overrides(variant="nope")


class TestTrainerExport:
    def test_default_contents(self, tmp_path):
        conf = write_config(tmp_path / "c.conf", run__seed=1, run__output=tmp_path / "o")
        assert main(["export-trainer", "--config", str(conf)]) == 0
        text = (tmp_path / "o" / "trainer.yaml").read_text()
        lines = text.splitlines()
        for line in ("batch: 16", "patience: 100", "imgsz: 640", "mosaic: 1.0", "scale: 0.5", "hsv_h: 0.015"):
            assert line in lines

    def test_round_trip(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.conf", run__seed=1, augment__hue=0.0123456789,
                                       trainer__batch=8))
        export = TrainerExport.from_config(cfg)
        back = parse_trainer_export(export.to_text())
        assert back == export
        assert back.policy.hue == 0.0123456789

    def test_incomplete(self):
        with pytest.raises(ConfigError):
            parse_trainer_export("batch: 16\n")


class TestExitCodes:
    def test_missing_seed_is_config_error(self, tmp_path, dataset, capsys):
        conf = write_config(tmp_path / "c.conf", dataset__manifest=dataset / "manifest.tsv")
        assert main(["split", "--config", str(conf)]) == 1
        assert "seed" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["augment", "--config", str(tmp_path / "none.conf")]) == 1

    def test_bad_arguments(self):
        assert main(["frobnicate"]) == 1
        assert main(["augment"]) == 1

    def test_missing_manifest(self, tmp_path):
        conf = write_config(tmp_path / "c.conf", run__seed=1, dataset__manifest="nope.tsv")
        assert main(["augment", "--config", str(conf)]) == 1

    def test_corrupt_label_is_data_error(self, tmp_path, dataset):
        data = tmp_path / "data"
        shutil.copytree(dataset, data)
        (data / "labels" / "p5_f0000.txt").write_text("0 banana 0.5 0.1 0.1\n")
        conf = config_for(tmp_path, data)
        assert main(["augment", "--config", str(conf)]) == 2


class TestAugmentCommand:
    def test_counts_and_log(self, tmp_path, dataset):
        conf = config_for(tmp_path, dataset, augment__multiplicity=2)
        assert main(["augment", "--config", str(conf)]) == 0
        out = tmp_path / "out" / "augment"
        assert len(list((out / "images").glob("*.ppm"))) == 20
        assert len(list((out / "labels").glob("*.txt"))) == 20
        rows = [json.loads(l) for l in (out / "augment_log.jsonl").read_text().splitlines()]
        assert {(r["input"], r["output"]) for r in rows} >= {("p5_f0000", "p5_f0000_aug0"), ("p5_f0000", "p5_f0000_aug1")}
        assert all(isinstance(r["seed"], int) for r in rows)
        assert len(read_manifest(out / "manifest.tsv")) == 20

    def test_deterministic_across_runs_and_workers(self, tmp_path, dataset):
        digests = []
        for run, workers in (("a", 1), ("b", 1), ("c", 8)):
            conf = config_for(tmp_path, dataset, run__output=tmp_path / run, run__workers=workers)
            assert main(["augment", "--config", str(conf)]) == 0
            digests.append(tree_digest(tmp_path / run))
        assert digests[0] == digests[1] == digests[2]

    def test_seed_override_changes_output(self, tmp_path, dataset):
        conf = config_for(tmp_path, dataset)
        main(["augment", "--config", str(conf), "--out", str(tmp_path / "s1")])
        main(["augment", "--config", str(conf), "--out", str(tmp_path / "s2"), "--seed", "8"])
        assert tree_digest(tmp_path / "s1") != tree_digest(tmp_path / "s2")

    def test_zero_policy_copies_inputs(self, tmp_path, dataset):
        zero = {f"augment__{k}": 0.0 for k in AugPolicy.__dataclass_fields__}
        cfg = load_config(config_for(tmp_path, dataset, **zero))
        res = cmd_augment(cfg)
        assert not res.failures
        src = (dataset / "images" / "p7_f0010.ppm").read_bytes()
        assert (res.out_dir / "images" / "p7_f0010_aug0.ppm").read_bytes() == src
        assert (res.out_dir / "labels" / "p7_f0010_aug0.txt").read_text() == (dataset / "labels" / "p7_f0010.txt").read_text()

    def test_unreadable_frame_is_skipped(self, tmp_path, dataset):
        data = tmp_path / "data"
        shutil.copytree(dataset, data)
        (data / "images" / "p5_f0000.ppm").write_bytes(b"P6\n3 3\n255\n")
        res = cmd_augment(load_config(config_for(tmp_path, data)))
        assert [r["input"] for r in res.failures] == ["p5_f0000"]
        assert len(res.records) == 9

    def test_all_unreadable_exits_2(self, tmp_path, dataset):
        data = tmp_path / "data"
        shutil.copytree(dataset, data)
        for p in (data / "images").glob("*.ppm"):
            p.write_bytes(b"garbage")
        assert main(["augment", "--config", str(config_for(tmp_path, data))]) == 2


class TestSynthCommand:
    def test_counts_and_multiplicity(self, tmp_path, dataset):
        conf = config_for(tmp_path, dataset, synth__patient_multiplicity="7:2")
        assert main(["synth", "--config", str(conf)]) == 0
        out = tmp_path / "out" / "synth"
        made = read_manifest(out / "manifest.tsv")
        assert len(made) == 4 + 2 + 8
        assert sum(f.patient_id == "7" for f in made) == 8
        assert "p7_f0000_gan2" in made.stems
        combined = read_manifest(out / "combined_manifest.tsv")
        assert len(combined) == 10 + 14
        # labels are inherited verbatim
        src = read_manifest(dataset / "manifest.tsv")
        by_stem = {f.stem: f.boxes for f in src}
        assert all(f.boxes == by_stem[f.source_stem] for f in made)

    def test_deterministic_across_runs_and_workers(self, tmp_path, dataset):
        digests = []
        for run, workers in (("a", 1), ("b", 1), ("c", 8)):
            conf = config_for(tmp_path, dataset, run__output=tmp_path / run, run__workers=workers)
            assert main(["synth", "--config", str(conf)]) == 0
            digests.append(tree_digest(tmp_path / run))
        assert digests[0] == digests[1] == digests[2]

    def test_no_wl_frames(self, tmp_path):
        data = tmp_path / "nir"
        from detkit.labels import Modality

        write_dataset(data, {"1": 2}, size=8, modality=Modality.NIR)
        assert main(["synth", "--config", str(config_for(tmp_path, data))]) == 2


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("t1")
    write_dataset(root, COHORT_WL, seed=0, size=8)
    return root


class TestSplitCommand:
    def test_wl_protocol(self, tmp_path, cohort, capsys):
        assert main(["split", "--config", str(config_for(tmp_path, cohort))]) == 0
        assert "train+val 182, test 20" in capsys.readouterr().out
        out = tmp_path / "out" / "split"
        test = read_manifest(out / "test.tsv")
        assert len(test) == 20 and sum(f.patient_id == "6" for f in test) == 7
        assert len(read_manifest(out / "trainval.tsv")) == 182
        assert "holdout patient: 6" in (out / "summary.txt").read_text()

    def test_strict(self, tmp_path, cohort):
        assert main(["split", "--config", str(config_for(tmp_path, cohort, split__strict="true"))]) == 0
        out = tmp_path / "out" / "split"
        tv = {f.patient_id for f in read_manifest(out / "trainval.tsv")}
        te = {f.patient_id for f in read_manifest(out / "test.tsv")}
        assert not tv & te

    def test_gan_variant_needs_synthetics(self, tmp_path, cohort):
        conf = config_for(tmp_path, cohort)
        assert main(["split", "--config", str(conf), "--variant", "WL+GAN"]) == 2


class TestEvalCommand:
    def test_echo_is_perfect(self, tmp_path, dataset):
        write_predictions(read_manifest(dataset / "manifest.tsv"), tmp_path / "pred")
        rc = main(["eval", "--manifest", f"Test={dataset / 'manifest.tsv'}", "--predictions", str(tmp_path / "pred"),
                   "--out", str(tmp_path / "rep")])
        assert rc == 0
        csv = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert csv == ["Phases,Precision,Recall,mAP50,mAP50-95,IoU", "Test,1.0000,1.0000,1.0000,1.0000,1.0000"]
        header = (tmp_path / "rep" / "report.txt").read_text().splitlines()[0].split()
        assert header == ["Phases", "Precision", "Recall", "mAP50", "mAP50-95", "IoU"]

    def test_missing_predictions_exit_2(self, tmp_path, dataset, capsys):
        (tmp_path / "pred").mkdir()
        rc = main(["eval", "--manifest", str(dataset / "manifest.tsv"), "--predictions", str(tmp_path / "pred"),
                   "--out", str(tmp_path / "rep")])
        assert rc == 2
        assert "allow-missing" in capsys.readouterr().err

    def test_allow_missing(self, tmp_path, dataset):
        (tmp_path / "pred").mkdir()
        rows = cmd_eval([("Test", dataset / "manifest.tsv")], tmp_path / "pred", tmp_path / "rep", allow_missing=True)
        rep = rows[0][1]
        assert (rep.precision, rep.recall) == (1.0, 0.0)

    def test_needs_inputs(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1

    def test_several_phases(self, tmp_path, dataset):
        write_predictions(read_manifest(dataset / "manifest.tsv"), tmp_path / "pred")
        rows = cmd_eval([("Val", dataset / "manifest.tsv"), ("Test", dataset / "manifest.tsv")],
                        tmp_path / "pred", tmp_path / "rep")
        csv = (tmp_path / "rep" / "report.csv").read_text().splitlines()
        assert [l.split(",")[0] for l in csv] == ["Phases", "Val", "Test"]
        assert json.loads((tmp_path / "rep" / "report.json").read_text())[1]["phase"] == "Test"
        assert len(rows) == 2

    def test_bundled_oracle_fixture(self, tmp_path):
        rows = cmd_eval([("Test", FIXTURE / "manifest.tsv")], FIXTURE / "predictions", tmp_path)
        expected = json.loads((FIXTURE / "expected.json").read_text())
        got = rows[0][1].as_dict()
        for key in EvalReport.FIELDS:
            assert got[key] == pytest.approx(expected[key], abs=1e-9), key

    def test_report_format(self):
        rep = EvalReport(0.5, 1 / 3, 0.25, 0.125, 2 / 3)
        assert format_report_csv([("Test", rep)]).splitlines()[1] == "Test,0.5000,0.3333,0.2500,0.1250,0.6667"
