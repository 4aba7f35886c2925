"""Multi-layer perceptrons with an embedding map and a bias-free linear head."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from logging import getLogger
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.autodiff import Matrix, Node, ParamGraph, load_checkpoint, ops, save_checkpoint
from gkdistill.errors import FrozenModelError, StructuralError

logger = getLogger(__name__)

HEAD = "head.weight"
HIDDEN_BIAS = 0.01
_EMBED_PARAM = re.compile(r"^embed\.(\d+)\.(weight|bias)$")


def _layer_names(index: int) -> tuple[str, str]:
    return f"embed.{index}.weight", f"embed.{index}.bias"


@dataclass(frozen=True)
class MlpModel:
    """f = W o phi, where phi is a stack of affine + ReLU layers ending in a plain affine layer, and W
    is a `d x C` matrix.

    Models are immutable: training produces new instances through `with_parameters`.
    `class_ids` maps head columns to the original class ids of the dataset the model was trained on.
    """

    parameters: Mapping[str, Matrix]
    class_ids: tuple[int, ...] = ()
    frozen: bool = False
    # Fingerprint of the checkpoint/config this model came from, when known.
    origin: str = field(default="", compare=False)

    def __post_init__(self):
        if HEAD not in self.parameters:
            raise StructuralError(f"model has no '{HEAD}' parameter")
        layers = self.layer_count
        if layers == 0:
            raise StructuralError("model has no embedding layer")
        expected = {HEAD} | {name for i in range(layers) for name in _layer_names(i)}
        if set(self.parameters) != expected:
            raise StructuralError(f"unexpected parameter names: {sorted(self.parameters)}")
        width = self.parameters["embed.0.weight"].rows
        for i in range(layers):
            weight_name, bias_name = _layer_names(i)
            weight, bias = self.parameters[weight_name], self.parameters[bias_name]
            if weight.rows != width or bias.shape != (1, weight.cols):
                raise StructuralError(f"layer {i} has inconsistent shapes {weight.shape}, {bias.shape}")
            width = weight.cols
        if self.parameters[HEAD].rows != width:
            raise StructuralError(f"head expects {self.parameters[HEAD].rows} inputs, embedding has {width}")
        if self.class_ids and len(self.class_ids) != self.class_count:
            raise StructuralError(
                f"{len(self.class_ids)} class ids given for a head with {self.class_count} columns"
            )

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        widths: Sequence[int],
        embed_dim: int,
        class_count: int,
        seed: int,
        class_ids: Sequence[int] = (),
    ) -> MlpModel:
        """He-normal weights for the embedding layers, biases of 0.01 on the ReLU layers and 0 on the
        output layer, N(0, 1/d) for the head."""
        rng = np.random.default_rng(seed)
        parameters: dict[str, Matrix] = {}
        fan_in = input_dim
        for i, width in enumerate([*widths, embed_dim]):
            weight_name, bias_name = _layer_names(i)
            parameters[weight_name] = Matrix(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width)))
            parameters[bias_name] = Matrix(np.full((1, width), HIDDEN_BIAS if i < len(widths) else 0.0))
            fan_in = width
        parameters[HEAD] = Matrix(rng.normal(0.0, np.sqrt(1.0 / embed_dim), (embed_dim, class_count)))
        return cls(parameters=parameters, class_ids=tuple(int(c) for c in class_ids))

    @property
    def layer_count(self) -> int:
        return sum(1 for name in self.parameters if name.endswith(".weight") and name != HEAD)

    @property
    def input_dim(self) -> int:
        return self.parameters["embed.0.weight"].rows

    @property
    def embed_dim(self) -> int:
        return self.parameters[HEAD].rows

    @property
    def class_count(self) -> int:
        return self.parameters[HEAD].cols

    @property
    def embedding_parameter_names(self) -> list[str]:
        return [name for name in self.parameters if _EMBED_PARAM.match(name)]

    # ---- numpy evaluation -------------------------------------------------------------------

    def embed(self, x: ArrayLike) -> np.ndarray:
        hidden = np.asarray(x, dtype=np.float64)
        for i in range(self.layer_count):
            weight_name, bias_name = _layer_names(i)
            hidden = hidden @ self.parameters[weight_name].values + self.parameters[bias_name].values
            if i < self.layer_count - 1:
                hidden = np.maximum(hidden, 0.0)
        return hidden

    def logits(self, x: ArrayLike) -> np.ndarray:
        return self.embed(x) @ self.parameters[HEAD].values

    def predict(self, x: ArrayLike) -> np.ndarray:
        """Head column of the largest logit; `np.argmax` returns the first (lowest) on ties."""
        return np.argmax(self.logits(x), axis=1)

    # ---- differentiable evaluation ----------------------------------------------------------

    def graph(self) -> ParamGraph:
        if self.frozen:
            raise FrozenModelError("a frozen model cannot take part in gradient computation")
        graph = ParamGraph(self.parameters)
        graph.forward()
        return graph

    def embed_node(self, graph: ParamGraph, x: ArrayLike) -> Node:
        hidden: Node | np.ndarray = np.asarray(x, dtype=np.float64)
        for i in range(self.layer_count):
            weight_name, bias_name = _layer_names(i)
            hidden = ops.matmul(hidden, graph[weight_name])
            hidden = ops.add(hidden, graph[bias_name])
            if i < self.layer_count - 1:
                hidden = ops.relu(hidden)
        return hidden  # type: ignore[return-value]

    def logits_node(self, graph: ParamGraph, embedding: Node) -> Node:
        return ops.matmul(embedding, graph[HEAD])

    # ---- copies -----------------------------------------------------------------------------

    def with_parameters(self, updates: Mapping[str, Matrix | ArrayLike]) -> MlpModel:
        if self.frozen:
            raise FrozenModelError("a frozen model cannot be updated")
        parameters = dict(self.parameters)
        for name, value in updates.items():
            if name not in parameters:
                raise StructuralError(f"unknown parameter '{name}'")
            parameters[name] = value if isinstance(value, Matrix) else Matrix(value)
        return replace(self, parameters=parameters)

    def with_embedding_of(self, other: MlpModel) -> MlpModel:
        """Returns a copy of this model whose embedding layers are those of `other`."""
        return self.with_parameters({name: other.parameters[name] for name in other.embedding_parameter_names})

    def freeze(self) -> MlpModel:
        return replace(self, frozen=True)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.parameters):
            digest.update(name.encode())
            digest.update(self.parameters[name].values.tobytes())
        return digest.hexdigest()

    # ---- persistence ------------------------------------------------------------------------

    def save(self, directory: str | Path, metadata: Mapping[str, str] | None = None) -> Path:
        metadata = {"fingerprint": self.fingerprint(), "frozen": str(self.frozen).lower(), **(metadata or {})}
        return save_checkpoint(directory, self.parameters, class_ids=list(self.class_ids), metadata=metadata)

    @classmethod
    def load(cls, directory: str | Path) -> MlpModel:
        parameters, manifest = load_checkpoint(directory)
        model = cls(
            parameters=parameters,
            class_ids=tuple(manifest.class_ids),
            frozen=manifest.metadata.get("frozen") == "true",
            origin=manifest.metadata.get("fingerprint", ""),
        )
        logger.debug(f"Loaded a {model.layer_count}-layer model with {model.class_count} classes from {directory}")
        return model
