"""Experiment configuration: TOML files with one table per section, and only scalar or flat-array
values.

Every numeric field carries its admissible range in its metadata (see `bounded`); sections check
their ranges after construction.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import sys
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Any, ClassVar, NamedTuple

from simple_parsing.helpers import Serializable, choice, field, list_field

from gkdistill.datagen import attainable_ratios
from gkdistill.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = getLogger(__name__)


class Range(NamedTuple):
    low: float | None = None
    high: float | None = None
    low_open: bool = False
    high_open: bool = False

    def contains(self, value: float) -> bool:
        if self.low is not None and (value <= self.low if self.low_open else value < self.low):
            return False
        if self.high is not None and (value >= self.high if self.high_open else value > self.high):
            return False
        return True

    def __str__(self) -> str:
        low = "-inf" if self.low is None else f"{self.low:g}"
        high = "inf" if self.high is None else f"{self.high:g}"
        opening = "(" if self.low_open or self.low is None else "["
        closing = ")" if self.high_open or self.high is None else "]"
        return f"{opening}{low}, {high}{closing}"


def bounded(
    default: Any,
    low: float | None = None,
    high: float | None = None,
    *,
    low_open: bool = False,
    high_open: bool = False,
    **kwargs,
) -> Any:
    """A field whose value (or every item, for lists) must lie in the given range."""
    return field(default=default, metadata={"range": Range(low, high, low_open, high_open)}, **kwargs)


def bounded_list(*default_items: Any, low: float | None = None, high: float | None = None, **kwargs) -> Any:
    return list_field(*default_items, metadata={"range": Range(low, high)}, **kwargs)


@dataclass
class ConfigSection(Serializable):
    """Base class of the config sections: validates the ranges declared with `bounded`."""

    section: ClassVar[str] = ""

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value_range: Range | None = f.metadata.get("range")
            if value_range is None:
                continue
            value = getattr(self, f.name)
            for item in value if isinstance(value, list) else [value]:
                if not value_range.contains(item):
                    raise ConfigError(
                        f"value {item!r} is outside of {value_range}", key=f"{self.section}.{f.name}"
                    )


@dataclass
class DatasetConfig(ConfigSection):
    """Gaussian clusters the class windows are carved from."""

    section: ClassVar[str] = "dataset"

    classes: int = bounded(20, 2)
    dim: int = bounded(16, 1)
    per_class: int = bounded(60, 2)
    center_scale: float = bounded(1.0, 0, low_open=True)
    sigma: float = bounded(1.3, 0, low_open=True)
    # Dimension of the subspace holding the class centers (0 = all dimensions).
    informative_dim: int = bounded(0, 0)
    seed: int = 0


@dataclass
class SplitConfig(ConfigSection):
    section: ClassVar[str] = "split"

    window: int = bounded(8, 1)
    # Number of teacher classes (0 = same as `window`).
    teacher_window: int = bounded(0, 0)
    overlap_ratio: float = bounded(0.5, 0, 1)
    # Overlap ratios of `sweep-overlap` when none are given on the command line.
    sweep_ratios: list[float] = bounded_list(0.0, 0.25, 0.5, 0.75, 1.0, low=0, high=1)
    train_fraction: float = bounded(0.7, 0, 1, low_open=True, high_open=True)

    @property
    def resolved_teacher_window(self) -> int:
        return self.teacher_window or self.window


@dataclass
class ModelConfig(ConfigSection):
    section: ClassVar[str] = "model"

    teacher_widths: list[int] = bounded_list(64, 64, low=1)
    teacher_embed_dim: int = bounded(32, 1)
    student_widths: list[int] = bounded_list(32, low=1)
    student_embed_dim: int = bounded(16, 1)


@dataclass
class OptimConfig(ConfigSection):
    """SGD with momentum and a step schedule; balanced batches for the distillation stages."""

    section: ClassVar[str] = "optim"

    batch_size: int = bounded(32, 1)
    # Epochs of every training stage.
    epochs: int = bounded(60, 0)
    lr: float = bounded(0.1, 0, low_open=True)
    momentum: float = bounded(0.9, 0, 1, high_open=True)
    decay_epochs: list[int] = bounded_list(20, 40, low=0)
    decay_factor: float = bounded(0.2, 0, low_open=True)
    classes_per_batch: int = bounded(8, 1)
    instances_per_class: int = bounded(4, 2)
    # Only train the head during classifier distillation.
    freeze_embedding: bool = False

    @property
    def schedule(self) -> tuple[tuple[int, float], ...]:
        return tuple((epoch, self.decay_factor) for epoch in sorted(self.decay_epochs))


@dataclass
class DistillConfig(ConfigSection):
    section: ClassVar[str] = "distill"

    tau_teacher: float = bounded(2.0, 0, low_open=True)
    tau_student: float = bounded(1.0, 0, low_open=True)
    # Weight of local KD in the refilled objective.
    lam: float = bounded(2.0, 0)
    # Weight and teacher temperature of standard KD.
    kd_weight: float = bounded(1.0, 0)
    kd_temperature: float = bounded(4.0, 0, low_open=True)
    # Weight of comparison matching in one-stage training.
    gamma: float = bounded(1.0, 0)
    # Most impostors per tuple (0 = no limit).
    max_impostors: int = bounded(0, 0)
    # Temperature of the NCM teacher scores (cosine similarities) in the classifier stage.
    ncm_temperature: float = bounded(0.1, 0, low_open=True)
    weight_mode: str = choice("pl", "gap", "none", default="pl")
    per_anchor_mean: bool = False
    normalize_embeddings: bool = True
    # lambda used by the analysis studies.
    study_lambda: float = bounded(1.0, 0, low_open=True)


@dataclass
class OutputConfig(ConfigSection):
    section: ClassVar[str] = "output"

    directory: str = "runs"
    # Write the tuples mined on the first batch of every embedding epoch.
    dump_tuples: bool = False


SECTIONS: dict[str, type[ConfigSection]] = {
    cls.section: cls
    for cls in (DatasetConfig, SplitConfig, ModelConfig, OptimConfig, DistillConfig, OutputConfig)
}


@dataclass
class ExperimentConfig(Serializable):
    """All the hyperparameters of a run."""

    # Seed of model initialization and batch sampling.
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        teacher_window = self.split.resolved_teacher_window
        if teacher_window > self.dataset.classes:
            raise ConfigError(
                f"the teacher window ({teacher_window}) exceeds the {self.dataset.classes} classes",
                key="split.teacher_window" if self.split.teacher_window else "split.window",
            )
        if self.split.window > self.dataset.classes:
            raise ConfigError(
                f"the window ({self.split.window}) exceeds the {self.dataset.classes} classes", key="split.window"
            )
        attainable = attainable_ratios(self.dataset.classes, self.split.window, teacher_window)
        for key, ratios in (("overlap_ratio", [self.split.overlap_ratio]), ("sweep_ratios", self.split.sweep_ratios)):
            unattainable = [r for r in ratios if not any(abs(r - a) < 1e-9 for a in attainable)]
            if unattainable:
                raise ConfigError(
                    f"ratio {unattainable[0]:g} cannot be reached with {self.dataset.classes} classes and a "
                    f"window of {self.split.window} (attainable: {', '.join(f'{a:g}' for a in attainable)})",
                    key=f"split.{key}",
                )
        if self.dataset.informative_dim > self.dataset.dim:
            raise ConfigError(
                f"informative_dim ({self.dataset.informative_dim}) exceeds dim ({self.dataset.dim})",
                key="dataset.informative_dim",
            )

    def with_seed(self, seed: int | None) -> ExperimentConfig:
        return self if seed is None else dataclasses.replace(self, seed=seed)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


_TOML_LINE = re.compile(r"at line (\d+)")


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of `key` inside `[section]` (or of the section header when `key` is None)."""
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[\s*([^\]]+?)\s*\]", stripped)
        if header:
            current = header.group(1)
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return number
    return None


def _check_type(value: Any, default: Any, key: str) -> Any:
    """Checks a TOML value against the type of the field's default; ints are accepted for floats."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list) and any(isinstance(v, float) for v in default):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = [float(v) for v in value] if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"expected a value like {default!r}, got {value!r}", key=key)
    return value


def _field_defaults(cls: type) -> dict[str, Any]:
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            defaults[f.name] = f.default_factory()  # type: ignore[misc]
    return defaults


def parse_config(text: str) -> ExperimentConfig:
    """Parses and validates the TOML text of an experiment config."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ConfigError(f"invalid TOML: {e}", line=int(match.group(1)) if match else None) from None

    def located(error: ConfigError, section: str | None, key: str | None) -> ConfigError:
        if error.line is not None:
            return error
        return ConfigError(str(error).split(": ", 1)[-1], key=error.key, line=_line_of(text, section, key))

    sections: dict[str, ConfigSection] = {}
    seed = 0
    for name, table in data.items():
        if name == "seed":
            seed = _check_type(table, 0, "seed")
            continue
        if name not in SECTIONS:
            raise ConfigError(
                f"unknown section (expected one of {sorted(SECTIONS)})", key=name, line=_line_of(text, name, None)
            )
        if not isinstance(table, dict):
            raise ConfigError("expected a [section] table", key=name)
        cls = SECTIONS[name]
        defaults = _field_defaults(cls)
        values = {}
        for key, value in table.items():
            if key not in defaults:
                raise ConfigError(
                    f"unknown key (expected one of {sorted(defaults)})",
                    key=f"{name}.{key}",
                    line=_line_of(text, name, key),
                )
            try:
                values[key] = _check_type(value, defaults[key], f"{name}.{key}")
                if name == "distill" and key == "weight_mode" and value not in ("pl", "gap", "none"):
                    raise ConfigError(f"expected one of 'pl', 'gap', 'none', got {value!r}", key="distill.weight_mode")
            except ConfigError as e:
                raise located(e, name, key) from None
        try:
            sections[name] = cls(**values)
        except ConfigError as e:
            raise located(e, name, e.key.split(".", 1)[-1] if e.key else None) from None
    try:
        return ExperimentConfig(seed=seed, **sections)  # type: ignore[arg-type]
    except ConfigError as e:
        section, _, key = (e.key or "").partition(".")
        raise located(e, section or None, key or None) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Loads a config file; `None` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text())
    logger.debug(f"Loaded config from {path} (hash {config_hash(config)[:12]})")
    return config


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    """Writes `config` as TOML (through `Serializable.save`, which picks the format from the suffix)."""
    config.save(Path(path).with_suffix(".toml"))
