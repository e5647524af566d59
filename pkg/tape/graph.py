import contextvars
import logging
from dataclasses import dataclass

import numpy as np


logger = logging.getLogger(__name__)

_ACTIVE_TAPE = contextvars.ContextVar("active_tape", default=None)


class TapeError(Exception):
    """Base class for recording and differentiation failures."""


class ShapeMismatchError(TapeError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class ClosedTapeError(TapeError):
    pass


class NonFiniteError(TapeError, FloatingPointError):
    def __init__(self, op: str, kind: str = "cotangent"):
        self.op = op
        self.kind = kind
        super().__init__(f"non-finite {kind} first produced by primitive '{op}'")

    def __reduce__(self):
        return type(self), (self.op, self.kind)


class NodeBudgetExceeded(TapeError, MemoryError):
    def __init__(self, budget: int, count: int):
        self.budget = budget
        self.count = count
        super().__init__(f"tape node budget exceeded ({count} > {budget})")

    def __reduce__(self):
        return type(self), (self.budget, self.count)


class Node:
    """One recorded value and the primitive that produced it."""

    __slots__ = ("value", "op", "parents", "backward", "cotangent", "tape", "index", "tag", "origin")
    # ndarray op Node defers to the reflected operators installed by tape.ops
    __array_ufunc__ = None

    def __init__(self, value, op="const", parents=(), backward=None, tape=None, index=-1):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.backward = backward
        self.cotangent = None
        self.tape = tape
        self.index = index
        self.tag = None
        # primitive that first produced a non-finite value upstream of this node
        self.origin = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def recorded(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


@dataclass
class TapeStats:
    node_count: int = 0
    peak_node_count: int = 0
    vjp_count: int = 0


class Tape:
    """A recording session.

    Nodes are appended in creation order, which is a topological order of the
    graph, so a reverse sweep is a walk over recorded ancestors by descending
    index. Reverse sweeps count every traversed node tagged "T" (one
    application of the fixed-point operator) as a work unit.
    """

    def __init__(self, node_budget: int | None = None):
        self.nodes: list[Node] = []
        self.stats = TapeStats()
        self.node_budget = node_budget
        self.closed = False
        self._token = None

    def __enter__(self):
        if self.closed:
            raise ClosedTapeError("tape sessions cannot be reopened")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        self.closed = True
        return False

    @staticmethod
    def current():
        return _ACTIVE_TAPE.get()

    def _check_open(self):
        if self.closed:
            raise ClosedTapeError("tape is closed; record and sweep inside its session")

    def record(self, value, op: str, parents, backward) -> Node:
        self._check_open()
        if self.node_budget is not None and len(self.nodes) >= self.node_budget:
            raise NodeBudgetExceeded(self.node_budget, len(self.nodes) + 1)
        node = Node(value, op=op, parents=parents, backward=backward, tape=self, index=len(self.nodes))
        if not np.all(np.isfinite(node.value)):
            node.origin = next((p.origin for p in parents if isinstance(p, Node) and p.origin is not None), op)
            logger.debug("primitive '%s' recorded a non-finite value (origin '%s')", op, node.origin)
        self.nodes.append(node)
        self.stats.node_count = len(self.nodes)
        if self.stats.node_count > self.stats.peak_node_count:
            self.stats.peak_node_count = self.stats.node_count
        return node

    def variable(self, value) -> Node:
        """Record a leaf that gradients can be requested for."""
        return self.record(np.array(value, dtype=np.float64), "var", (), None)

    def count_work(self, units: int):
        self.stats.vjp_count += int(units)

    def _ancestors(self, root: Node) -> list[Node]:
        seen = {id(root)}
        stack = [root]
        found = [root]
        while stack:
            node = stack.pop()
            for parent in node.parents:
                if isinstance(parent, Node) and parent.tape is self and id(parent) not in seen:
                    seen.add(id(parent))
                    found.append(parent)
                    stack.append(parent)
        found.sort(key=lambda n: n.index, reverse=True)
        return found

    def vjp(self, root: Node, targets, cotangent=None) -> dict:
        """Pull `cotangent` back from `root` to every node in `targets`.

        Targets may be any recorded nodes; the accumulated cotangent at each
        one is returned. Targets outside the graph of `root` map to zeros.
        """
        self._check_open()
        targets = list(targets)
        if cotangent is None:
            cotangent = np.ones_like(root.value)
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != root.value.shape:
            raise ShapeMismatchError("vjp", root.value.shape, cotangent.shape)

        if root.tape is not self:
            return {t: np.zeros_like(t.value) for t in targets}

        order = self._ancestors(root)
        for node in order:
            node.cotangent = None
        root.cotangent = cotangent

        traversed = 0
        for node in order:
            g = node.cotangent
            if g is None:
                continue
            if node.origin is not None:
                raise NonFiniteError(node.origin, "value")
            if node.tag == "T":
                traversed += 1
            if node.backward is None:
                continue
            contributions = node.backward(g)
            for parent, pc in zip(node.parents, contributions):
                if pc is None or not isinstance(parent, Node) or parent.tape is not self:
                    continue
                if not np.all(np.isfinite(pc)):
                    raise NonFiniteError(node.op)
                parent.cotangent = pc if parent.cotangent is None else parent.cotangent + pc

        self.count_work(traversed)
        reachable = {id(n) for n in order}
        return {
            t: (t.cotangent.copy() if id(t) in reachable and t.cotangent is not None else np.zeros_like(t.value))
            for t in targets
        }


def vjp(root: Node, targets, cotangent=None) -> dict:
    tape = root.tape or Tape.current()
    if tape is None:
        raise TapeError("vjp needs a recorded root or an open tape")
    return tape.vjp(root, targets, cotangent)


def detach(x):
    """Same value, no parents: gradients stop here."""
    if isinstance(x, Node):
        return Node(x.value.copy(), op="detach")
    return np.array(x, dtype=np.float64)


def value_of(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)
