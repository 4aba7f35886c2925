"""Reverse-mode differentiation: the recording tape, its nodes, and parameter graphs."""
from __future__ import annotations

from logging import getLogger
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.errors import ShapeMismatchError, StaleTapeError

from .matrix import Matrix, as_readonly

logger = getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value recorded on a `Tape`.

    Nodes are created by the primitives in `gkdistill.autodiff.ops`, by `Tape.constant` and by
    `ParamGraph.forward` (for parameter leaves).
    """

    __slots__ = ("tape", "index", "value", "requires_grad", "op", "name", "flags")

    def __init__(
        self,
        tape: Tape,
        index: int,
        value: np.ndarray,
        requires_grad: bool,
        op: str,
        name: str | None = None,
    ):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        # Diagnostic flags set by loss builders, e.g. "empty-tuples".
        self.flags: frozenset[str] = frozenset()

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatchError("item", self.value.shape, (1, 1))
        return float(self.value[0, 0])

    def with_flags(self, *flags: str) -> Node:
        self.flags = self.flags | frozenset(flags)
        return self

    # Operator sugar; the primitives live in `ops`.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Node#{self.index}{label}(op={self.op}, shape={self.shape})"


class Tape:
    """Records primitive operations in execution order so they can be swept in reverse."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._backward_fns: dict[int, tuple[tuple[Node, ...], BackwardFn]] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self._nodes)

    def _new_node(self, value: np.ndarray, requires_grad: bool, op: str, name: str | None) -> Node:
        node = Node(self, len(self._nodes), value, requires_grad, op, name)
        self._nodes.append(node)
        return node

    def constant(self, value: ArrayLike, name: str | None = None) -> Node:
        """Adds a value that no gradient flows to."""
        return self._new_node(as_readonly(value), False, "constant", name)

    def leaf(self, value: ArrayLike, name: str) -> Node:
        return self._new_node(as_readonly(value), True, "leaf", name)

    def record(
        self,
        op: str,
        value: np.ndarray,
        parents: Sequence[Node],
        backward: BackwardFn,
    ) -> Node:
        """Records the output of a primitive along with its backward rule."""
        requires_grad = any(parent.requires_grad for parent in parents)
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        node = self._new_node(value, requires_grad, op, None)
        if requires_grad:
            self._backward_fns[node.index] = (tuple(parents), backward)
        return node

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Sweeps the tape in reverse from the scalar `loss` node.

        Returns the accumulated gradient of every node that requires one, keyed by node index.
        Gradients of a node used several times are summed in recording order.
        """
        if loss.tape is not self:
            raise StaleTapeError("the loss node was not recorded on this tape")
        if self.consumed:
            raise StaleTapeError(
                "backward was already called on this tape; run a new forward pass first"
            )
        if loss.value.shape != (1, 1):
            raise ShapeMismatchError("backward", loss.value.shape, (1, 1))
        self.consumed = True

        grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
        for index in range(loss.index, -1, -1):
            grad = grads.get(index)
            if grad is None or index not in self._backward_fns:
                continue
            parents, backward_fn = self._backward_fns[index]
            parent_grads = backward_fn(grad)
            for parent, parent_grad in zip(parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.value.shape:
                    raise ShapeMismatchError(
                        f"backward of {self._nodes[index].op}",
                        parent_grad.shape,
                        parent.value.shape,
                    )
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + parent_grad
                else:
                    grads[parent.index] = parent_grad
        return grads


class ParamGraph:
    """Named parameter leaves plus the tape of the current forward pass.

    Every call to `forward` starts a fresh tape and re-creates one leaf per parameter; the nodes
    of the previous tape are then stale.
    """

    def __init__(self, parameters: Mapping[str, Matrix | ArrayLike]):
        self._parameters: dict[str, Matrix] = {
            name: value if isinstance(value, Matrix) else Matrix(value)
            for name, value in parameters.items()
        }
        self._tape: Tape | None = None
        self._leaves: dict[str, Node] = {}

    @property
    def parameters(self) -> dict[str, Matrix]:
        return dict(self._parameters)

    @property
    def names(self) -> list[str]:
        return list(self._parameters)

    @property
    def tape(self) -> Tape:
        if self._tape is None:
            raise StaleTapeError("no forward pass was started on this graph")
        return self._tape

    def forward(self) -> Tape:
        self._tape = Tape()
        self._leaves = {
            name: self._tape.leaf(value.values, name=name)
            for name, value in self._parameters.items()
        }
        return self._tape

    def __getitem__(self, name: str) -> Node:
        if self._tape is None:
            raise StaleTapeError("call `forward()` before reading parameter nodes")
        return self._leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self._parameters

    def assign(self, name: str, value: Matrix | ArrayLike) -> None:
        new_value = value if isinstance(value, Matrix) else Matrix(value)
        old_value = self._parameters[name]
        if new_value.shape != old_value.shape:
            raise ShapeMismatchError("assign", new_value.shape, old_value.shape)
        self._parameters[name] = new_value


def grad(loss: Node, params: ParamGraph) -> dict[str, np.ndarray]:
    """Returns d(loss)/d(p) for every parameter of `params`, with the shape of each parameter.

    Parameters the loss does not depend on get a zero gradient.

    >>> import numpy as np
    >>> from gkdistill.autodiff import ops
    >>> graph = ParamGraph({"w": np.arange(6.0).reshape(2, 3)})
    >>> _ = graph.forward()
    >>> grad(ops.sum(graph["w"]), graph)["w"]
    array([[1., 1., 1.],
           [1., 1., 1.]])
    """
    if loss.tape is not params.tape:
        raise StaleTapeError("the loss was computed on a previous forward pass of this graph")
    node_grads = params.tape.backward(loss)
    gradients: dict[str, np.ndarray] = {}
    for name in params.names:
        leaf = params[name]
        gradients[name] = node_grads.get(leaf.index, np.zeros(leaf.value.shape))
    return gradients
