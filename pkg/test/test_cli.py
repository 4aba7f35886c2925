from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import pytest

from gkdistill.cli import Analyze, Distill, Program, SweepOverlap, main, parse_program
from gkdistill.config import ExperimentConfig, config_hash, load_config, save_config
from gkdistill.model import MlpModel

from .testutils import parametrize


@pytest.fixture
def config_file(tmp_path: Path, tiny_config: ExperimentConfig) -> Path:
    path = tmp_path / "config.toml"
    save_config(tiny_config, path)
    return path


def _rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_parsing_builds_the_subcommand(config_file: Path):
    program = parse_program(["-vv", "distill", "--config", str(config_file), "--mode", "refilled-lkd", "--seed", "4"])
    assert isinstance(program, Program)
    assert program.verbose == 2
    assert isinstance(program.command, Distill)
    assert program.command.mode == "refilled-lkd"
    assert program.command.seed == 4
    assert program.command.config == config_file

    program = parse_program(["sweep-overlap", "--ratios", "0", "0.5", "--seeds", "1", "--jobs", "2"])
    assert isinstance(program.command, SweepOverlap)
    assert program.command.ratios == [0.0, 0.5]
    assert program.command.seeds == [1]
    assert program.command.jobs == 2

    program = parse_program(["analyze", "--study", "impostors"])
    assert isinstance(program.command, Analyze) and program.command.study == "impostors"


def test_unknown_choices_are_usage_errors():
    with pytest.raises(SystemExit) as excinfo:
        parse_program(["distill", "--mode", "magic"])
    assert excinfo.value.code == 2


def test_train_teacher(config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    assert main(["train-teacher", "--config", str(config_file), "--out", str(out)]) == 0
    for name in ("dataset.csv", "split.csv", "teacher_log.csv", "config.toml", "manifest.json"):
        assert (out / name).is_file(), name
    teacher = MlpModel.load(out / "teacher")
    assert teacher.frozen
    assert teacher.class_ids == (0, 1, 2, 3)

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train-teacher"
    assert manifest["seed"] == 0
    assert manifest["config_hash"] == config_hash(load_config(config_file))
    assert manifest["artifacts"]["teacher_checkpoint"] == "teacher"
    assert load_config(out / "config.toml") == load_config(config_file)

    log = _rows(out / "teacher_log.csv")
    assert [row["epoch"] for row in log] == ["1", "2"]
    assert {row["stage"] for row in log} == {"teacher"}


def test_outputs_are_never_overwritten(config_file: Path, tmp_path: Path, capsys):
    out = tmp_path / "run"
    assert main(["train-teacher", "--config", str(config_file), "--out", str(out)]) == 0
    before = (out / "teacher_log.csv").read_bytes()
    assert main(["train-teacher", "--config", str(config_file), "--out", str(out)]) == 1
    assert "refusing to overwrite" in capsys.readouterr().err
    assert (out / "teacher_log.csv").read_bytes() == before


def test_distill_with_a_saved_teacher(config_file: Path, tmp_path: Path, capsys):
    teacher_run = tmp_path / "teacher_run"
    assert main(["train-teacher", "--config", str(config_file), "--out", str(teacher_run)]) == 0
    out = tmp_path / "student_run"
    argv = ["distill", "--config", str(config_file), "--out", str(out), "--teacher", str(teacher_run / "teacher")]
    assert main([*argv, "--mode", "refilled"]) == 0
    assert "refilled: test accuracy" in capsys.readouterr().out

    (row,) = _rows(out / "result.csv")
    assert row["mode"] == "refilled" and row["seed"] == "0"
    assert 0.0 <= float(row["accuracy"]) <= 1.0
    student = MlpModel.load(out / "student")
    assert student.class_ids == (2, 3, 4, 5)
    assert not (out / "teacher").exists()
    stages = [r["stage"] for r in _rows(out / "student_log.csv")]
    assert stages == ["embedding", "embedding", "classifier", "classifier"]


def test_distill_is_deterministic(config_file: Path, tmp_path: Path):
    for name in ("a", "b"):
        assert main(["distill", "--config", str(config_file), "--out", str(tmp_path / name), "--mode", "one-stage"]) == 0

    def without_seconds(path: Path) -> list[dict[str, str]]:
        return [{k: v for k, v in row.items() if k != "seconds"} for row in _rows(path)]

    for name in ("result.csv", "dataset.csv", "split.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    for name in ("student_log.csv", "teacher_log.csv"):
        assert without_seconds(tmp_path / "a" / name) == without_seconds(tmp_path / "b" / name), name
    assert MlpModel.load(tmp_path / "a" / "student") == MlpModel.load(tmp_path / "b" / "student")


def test_seed_override(config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    assert main(["distill", "--config", str(config_file), "--out", str(out), "--mode", "vanilla", "--seed", "7"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7
    assert _rows(out / "result.csv")[0]["seed"] == "7"


def test_tuple_dumps(tiny_config: ExperimentConfig, tmp_path: Path):
    config_path = tmp_path / "dump.toml"
    tiny_config.output.dump_tuples = True
    save_config(tiny_config, config_path)
    out = tmp_path / "run"
    assert main(["distill", "--config", str(config_path), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "tuples").iterdir()) == ["tuples_epoch001.csv", "tuples_epoch002.csv"]
    assert json.loads((out / "manifest.json").read_text())["artifacts"]["tuple_dumps"] == "tuples"


def test_invalid_config_exits_with_2(tmp_path: Path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[optim]\nlearning_rate = 0.1\n")
    assert main(["distill", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    err = capsys.readouterr().err
    assert "optim.learning_rate" in err and "line 2" in err
    assert not (tmp_path / "run").exists()


def test_unattainable_ratio_exits_with_2(config_file: Path, tmp_path: Path):
    argv = ["sweep-overlap", "--config", str(config_file), "--out", str(tmp_path / "run"), "--ratios", "0.3"]
    assert main(argv) == 2


def test_missing_teacher_exits_with_3(config_file: Path, tmp_path: Path):
    argv = ["distill", "--config", str(config_file), "--out", str(tmp_path / "run"), "--teacher", str(tmp_path / "nope")]
    assert main(argv) == 3


def test_sweep_with_one_cell(config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    argv = ["sweep-overlap", "--config", str(config_file), "--out", str(out), "--ratios", "0.5", "--seeds", "0"]
    assert main([*argv, "--modes", "vanilla"]) == 0
    (row,) = _rows(out / "sweep.csv")
    assert (row["ratio"], row["seed"], row["mode"]) == ("0.5", "0", "vanilla")
    assert json.loads((out / "manifest.json").read_text())["command"] == "sweep-overlap"


def test_sweep_defaults_to_the_config_ratios(config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    argv = ["sweep-overlap", "--config", str(config_file), "--out", str(out), "--seeds", "0", "--modes", "vanilla"]
    assert parse_program(argv).command.ratios == []
    assert main(argv) == 0
    assert [row["ratio"] for row in _rows(out / "sweep.csv")] == ["0.5", "1"]


@parametrize(
    "study, outputs, header",
    [
        ("gradient-norms", ["gradient_norms.csv"], "class_count,kd_norm_diff,lkd_norm_diff"),
        ("weight-auc", ["weights.csv", "weight_auc.csv"], "flags,auc"),
        ("ncm-quality", ["ncm_quality.csv"], "model,ncm_accuracy"),
        ("incremental", ["incremental.csv"], "mode,old_to_all,new_to_all,overall,harmonic"),
        ("impostors", ["impostors.csv"], "max_impostors,ncm_accuracy"),
    ],
)
def test_analyze(study: str, outputs: list[str], header: str, config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    assert main(["analyze", "--config", str(config_file), "--out", str(out), "--study", study]) == 0
    for name in outputs:
        assert (out / name).is_file()
    assert (out / outputs[-1]).read_text().splitlines()[0] == header
    assert (out / "teacher").is_dir()


def test_impostor_rows(config_file: Path, tmp_path: Path):
    out = tmp_path / "run"
    assert main(["analyze", "--config", str(config_file), "--out", str(out), "--study", "impostors"]) == 0
    assert [row["max_impostors"] for row in _rows(out / "impostors.csv")] == ["1", "2", "4", "8", "unbounded"]


def test_verbosity_sets_the_package_log_level(config_file: Path, tmp_path: Path):
    main(["-v", "train-teacher", "--config", str(config_file), "--out", str(tmp_path / "run")])
    assert logging.getLogger("gkdistill").level == logging.INFO
