"""Text checkpoints: one file per named parameter, plus a JSON manifest.

Each parameter file starts with a "rows cols" line, followed by the row-major values (one matrix
row per line, printed with enough digits to round-trip exactly).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike
from simple_parsing.helpers import Serializable

from gkdistill.errors import MissingCheckpointError, OutputExistsError, ShapeMismatchError

from .matrix import Matrix

logger = getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class ParameterEntry(Serializable):
    name: str
    rows: int
    cols: int
    file: str


@dataclass
class CheckpointManifest(Serializable):
    """Lists the parameter files of a checkpoint, and optionally the class ids of its rows/columns."""

    parameters: list[ParameterEntry] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [entry.name for entry in self.parameters]


def write_matrix(path: Path, value: Matrix | ArrayLike) -> None:
    values = value.values if isinstance(value, Matrix) else Matrix(value).values
    rows, cols = values.shape
    np.savetxt(path, values, fmt="%.17g", header=f"{rows} {cols}", comments="")


def read_matrix(path: Path) -> Matrix:
    if not path.is_file():
        raise MissingCheckpointError(f"missing parameter file: {path}")
    with open(path) as f:
        header = f.readline().split()
        rows, cols = (int(v) for v in header)
        values = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if values.size != rows * cols:
        raise ShapeMismatchError(f"read_matrix({path.name})", values.shape, (rows, cols))
    return Matrix(values.reshape(rows, cols))


def save_checkpoint(
    directory: str | Path,
    parameters: Mapping[str, Matrix | ArrayLike],
    class_ids: list[int] | None = None,
    metadata: Mapping[str, str] | None = None,
) -> Path:
    """Writes `parameters` to `directory` and returns the path of the manifest.

    Checkpoints are write-once: an existing manifest raises `OutputExistsError`.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists():
        raise OutputExistsError(f"checkpoint already exists: {manifest_path}")
    directory.mkdir(parents=True, exist_ok=True)

    manifest = CheckpointManifest(
        class_ids=[int(c) for c in (class_ids or [])],
        metadata=dict(metadata or {}),
    )
    for name, value in parameters.items():
        matrix = value if isinstance(value, Matrix) else Matrix(value)
        file_name = f"{name}.txt"
        write_matrix(directory / file_name, matrix)
        manifest.parameters.append(
            ParameterEntry(name=name, rows=matrix.rows, cols=matrix.cols, file=file_name)
        )
    manifest.save_json(manifest_path, indent=2)
    logger.debug(f"Saved checkpoint with {len(manifest.parameters)} parameters to {directory}")
    return manifest_path


def load_checkpoint(directory: str | Path) -> tuple[dict[str, Matrix], CheckpointManifest]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingCheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = CheckpointManifest.load_json(manifest_path)
    parameters: dict[str, Matrix] = {}
    for entry in manifest.parameters:
        matrix = read_matrix(directory / entry.file)
        if matrix.shape != (entry.rows, entry.cols):
            raise ShapeMismatchError(f"load_checkpoint({entry.name})", matrix.shape, (entry.rows, entry.cols))
        parameters[entry.name] = matrix
    return parameters, manifest
