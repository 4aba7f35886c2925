"""The `gkdistill` command line: one subcommand dataclass per experiment, each with `execute()`."""
from __future__ import annotations

import csv
import logging
import sys
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import ClassVar, Iterable, Optional, Sequence, Union

from simple_parsing import ArgumentParser
from simple_parsing.helpers import Serializable, choice, field, list_field, subparsers

from gkdistill import experiments
from gkdistill.config import ExperimentConfig, config_hash, load_config, save_config
from gkdistill.datagen import save_dataset_csv, save_split_csv
from gkdistill.errors import GkdError, OutputExistsError
from gkdistill.experiments import ExperimentData
from gkdistill.model import MlpModel
from gkdistill.trainer import DISTILL_MODES, distill_student, train_teacher

logger = getLogger(__name__)

STUDIES = ("gradient-norms", "weight-auc", "ncm-quality", "incremental", "impostors")


@dataclass
class RunManifest(Serializable):
    """What a run did and where its outputs are, relative to the run directory."""

    command: str
    config_hash: str
    seed: int
    artifacts: dict[str, str] = field(default_factory=dict)


class RunDirectory:
    """Write-once output directory of a command."""

    def __init__(self, root: Path, command: str, config: ExperimentConfig):
        self.root = root
        self.manifest = RunManifest(command, config_hash(config), config.seed)
        self.config = config

    def path(self, name: str, kind: str | None = None) -> Path:
        """Reserves `name` inside the run directory; raises if something is already there."""
        target = self.root / name
        if target.exists():
            raise OutputExistsError(f"refusing to overwrite {target}")
        target.parent.mkdir(parents=True, exist_ok=True)
        self.manifest.artifacts[kind or name] = name
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self.path(name)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    def finish(self) -> Path:
        save_config(self.config, self.path("config.toml"))
        manifest_path = self.path("manifest.json")
        self.manifest.save_json(manifest_path, indent=2, sort_keys=True)
        logger.info(f"Wrote {len(self.manifest.artifacts)} artifacts to {self.root}")
        return manifest_path


def _fmt(value: float) -> str:
    return repr(float(value))


@dataclass
class Command:
    """Options shared by every command."""

    # TOML config file (defaults are used when omitted).
    config: Optional[Path] = None
    # Output directory (defaults to `output.directory` of the config).
    out: Optional[Path] = None
    # Overrides the `seed` of the config.
    seed: Optional[int] = None

    name: ClassVar[str] = ""

    def load(self) -> tuple[ExperimentConfig, RunDirectory]:
        config = load_config(self.config).with_seed(self.seed)
        root = self.out if self.out is not None else Path(config.output.directory)
        return config, RunDirectory(root, self.name, config)

    def load_teacher(
        self, path: Path | None, config: ExperimentConfig, data: ExperimentData, run: RunDirectory
    ) -> MlpModel:
        """Loads the teacher checkpoint at `path`, or trains one (saved in the run) when there is none."""
        if path is None:
            logger.info("No teacher checkpoint given; training one.")
            teacher, log = train_teacher(data.teacher_train, data.teacher_test, config.model, config.optim, config.seed)
            teacher.save(run.path("teacher", kind="teacher_checkpoint"), {"config_hash": run.manifest.config_hash})
            log.to_csv(run.path("teacher_log.csv"))
            return teacher
        teacher = MlpModel.load(path)
        data.check_teacher(teacher)
        run.manifest.artifacts["teacher_checkpoint"] = str(path)
        return teacher

    def write_data(self, data: ExperimentData, run: RunDirectory) -> None:
        save_dataset_csv(run.path("dataset.csv"), data.dataset)
        save_split_csv(run.path("split.csv"), data.split)

    def execute(self) -> int:
        raise NotImplementedError


@dataclass
class TrainTeacher(Command):
    """Trains a teacher on its class window with cross-entropy."""

    name: ClassVar[str] = "train-teacher"

    def execute(self) -> int:
        config, run = self.load()
        data = ExperimentData.prepare(config)
        self.write_data(data, run)
        teacher, log = train_teacher(data.teacher_train, data.teacher_test, config.model, config.optim, config.seed)
        teacher.save(run.path("teacher", kind="teacher_checkpoint"), {"config_hash": run.manifest.config_hash})
        log.to_csv(run.path("teacher_log.csv"))
        run.finish()
        return 0


@dataclass
class Distill(Command):
    """Trains a student on its class window with one of the distillation modes."""

    # Teacher checkpoint directory (a teacher is trained when omitted).
    teacher: Optional[Path] = None
    mode: str = choice(*DISTILL_MODES, default="refilled")

    name: ClassVar[str] = "distill"

    def execute(self) -> int:
        config, run = self.load()
        data = ExperimentData.prepare(config)
        self.write_data(data, run)
        teacher = self.load_teacher(self.teacher, config, data, run)
        tuple_dir = run.path("tuples", kind="tuple_dumps") if config.output.dump_tuples else None
        result = distill_student(
            self.mode,  # type: ignore[arg-type]
            teacher,
            data.student_train,
            data.student_test,
            config.model,
            config.optim,
            config.distill,
            config.seed,
            tuple_dump_dir=tuple_dir,
        )
        result.student.save(
            run.path("student", kind="student_checkpoint"),
            {"config_hash": run.manifest.config_hash, "mode": self.mode},
        )
        result.log.to_csv(run.path("student_log.csv"))
        run.write_csv("result.csv", ["mode", "seed", "accuracy"], [[self.mode, config.seed, _fmt(result.test_accuracy)]])
        run.finish()
        print(f"{self.mode}: test accuracy {result.test_accuracy:.4f}")
        return 0


@dataclass
class SweepOverlap(Command):
    """Accuracy of every mode over a grid of overlap ratios and seeds."""

    # Overlap ratios (default: `split.sweep_ratios` of the config).
    ratios: list[float] = list_field()
    seeds: list[int] = list_field(0, 1, 2, 3, 4)
    modes: list[str] = list_field(*experiments.DEFAULT_SWEEP_MODES)
    # Worker processes, one (ratio, seed) cell each.
    jobs: int = 1

    name: ClassVar[str] = "sweep-overlap"

    def execute(self) -> int:
        config, run = self.load()
        rows = experiments.run_sweep(config, self.ratios, self.seeds, self.modes, self.jobs)
        run.write_csv(
            "sweep.csv",
            ["ratio", "seed", "mode", "accuracy"],
            ([f"{r.ratio:g}", r.seed, r.mode, _fmt(r.accuracy)] for r in rows),
        )
        run.finish()
        return 0


@dataclass
class Analyze(Command):
    """Runs one of the analysis studies."""

    study: str = choice(*STUDIES, default="ncm-quality")
    # Teacher checkpoint directory (a teacher is trained when omitted).
    teacher: Optional[Path] = None
    # Student checkpoint, for the `ncm-quality` and `incremental` studies.
    student: Optional[Path] = None
    # Class counts of the gradient-norm study (default: 2, 4, ... up to the teacher's classes).
    grid: list[int] = list_field()

    name: ClassVar[str] = "analyze"

    def execute(self) -> int:
        config, run = self.load()
        data = ExperimentData.prepare(config)
        self.write_data(data, run)
        teacher = self.load_teacher(self.teacher, config, data, run)
        student = MlpModel.load(self.student) if self.student is not None else None

        if self.study == "gradient-norms":
            experiments.gradient_norms(config, teacher, data, self.grid).to_csv(run.path("gradient_norms.csv"))
        elif self.study == "weight-auc":
            result = experiments.weight_auc(config, teacher, data)
            result.study.to_csv(run.path("weights.csv"))
            run.write_csv(
                "weight_auc.csv",
                ["flags", "auc"],
                [["seen", _fmt(result.study.auc)], ["shuffled", _fmt(result.shuffled_auc)]],
            )
        elif self.study == "ncm-quality":
            rows = experiments.ncm_quality(config, teacher, data, student)
            run.write_csv("ncm_quality.csv", ["model", "ncm_accuracy"], ([m, _fmt(a)] for m, a in rows))
        elif self.study == "incremental":
            reports = experiments.incremental(config, teacher, data, student)
            run.write_csv(
                "incremental.csv",
                ["mode", "old_to_all", "new_to_all", "overall", "harmonic"],
                ([r.mode, _fmt(r.old_to_all), _fmt(r.new_to_all), _fmt(r.overall), _fmt(r.harmonic)] for r in reports),
            )
        else:
            rows = experiments.impostor_caps(config, teacher, data)
            run.write_csv(
                "impostors.csv",
                ["max_impostors", "ncm_accuracy"],
                ([cap or "unbounded", _fmt(a)] for cap, a in rows),
            )
        run.finish()
        return 0


@dataclass
class Program:
    """Generalized knowledge distillation experiments on synthetic class windows."""

    command: Union[TrainTeacher, Distill, SweepOverlap, Analyze] = subparsers(
        {
            "train-teacher": TrainTeacher,
            "distill": Distill,
            "sweep-overlap": SweepOverlap,
            "analyze": Analyze,
        }
    )
    # Logging verbosity (-v: INFO, -vv: DEBUG).
    verbose: int = field(default=0, alias="-v", action="count")

    def execute(self) -> int:
        return self.command.execute()


def setup_logging(verbose: int) -> None:
    package_logger = logging.getLogger("gkdistill")
    package_logger.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        logging.Formatter("%(levelname)s {%(pathname)s:%(lineno)d} - %(message)s", datefmt="%m-%d %H:%M:%S")
    )
    package_logger.addHandler(handler)
    package_logger.setLevel([logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)])


def parse_program(argv: Sequence[str] | None = None) -> Program:
    parser = ArgumentParser(prog="gkdistill", description=Program.__doc__)
    parser.add_arguments(Program, dest="program")
    args = parser.parse_args(argv)
    return args.program


def main(argv: Sequence[str] | None = None) -> int:
    """Runs the command line and returns the process exit code."""
    program = parse_program(argv)
    setup_logging(program.verbose)
    try:
        return program.execute()
    except GkdError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
