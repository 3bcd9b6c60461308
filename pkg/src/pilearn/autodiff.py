"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A define-by-run :class:`Tape` records a closed set of eight operations, which
is enough to express small multilayer perceptrons, the two-headed training
graphs, and the per-example residual logits used elsewhere in this package.
``stop_gradient`` is the one special primitive: its forward pass is the
identity and its backward pass transmits exactly zero adjoint, which is how
the no-PI head is prevented from updating the shared feature extractor.

Everything is 64-bit; tapes are rebuilt for every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OP_KINDS = (
    "matmul",
    "add_bias",
    "relu",
    "concat_cols",
    "scale",
    "add",
    "elementwise_mul",
    "log_softmax_rows",
)


class ShapeMismatchError(ValueError):
    """Raised when operation inputs have incompatible shapes."""

    def __init__(self, kind: str, *shapes: tuple[int, int]):
        self.kind = kind
        self.shapes = shapes
        super().__init__(f"{kind}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


@dataclass
class Node:
    """One record on the tape: an operation (or leaf) and its output value."""

    index: int
    kind: str  # one of OP_KINDS, "leaf", or "stop_gradient"
    inputs: tuple[int, ...]
    value: np.ndarray
    stop_gradient: bool = False
    factor: float | None = None  # scale only
    param: str | None = None  # leaf bound to a ParamStore entry
    param_rows: np.ndarray | None = None  # row indices for a per-example slice

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class ParamStore:
    """Named parameter arrays with persistent identity across steps.

    Holds, per parameter, the value, a gradient accumulator of the same shape
    and a momentum buffer; the accumulator is zeroed between optimizer steps.
    Parameters registered with ``weight_decay=False`` (biases, per-example
    residuals) are skipped by L2 regularization.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.weight_decay: dict[str, bool] = {}

    def register(self, name: str, value, weight_decay: bool = True) -> None:
        if name in self.values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = _as_matrix(value)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.momentum[name] = np.zeros_like(arr)
        self.weight_decay[name] = weight_decay

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, adjoint: np.ndarray, rows: np.ndarray | None = None) -> None:
        if rows is None:
            self.grads[name] += adjoint
        else:
            np.add.at(self.grads[name], rows, adjoint)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.values.items():
            other.register(name, value.copy(), weight_decay=self.weight_decay[name])
            other.momentum[name] = self.momentum[name].copy()
        return other

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.values.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self.values[name][...] = value

    def n_params(self, prefix: str = "") -> int:
        return sum(v.size for name, v in self.values.items() if name.startswith(prefix))


class Tape:
    """Append-only record of one forward pass; single-threaded."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_cache: dict[tuple[int, str], Node] = {}

    def _append(self, kind, inputs, value, stop_gradient=False, factor=None,
                param=None, param_rows=None) -> Node:
        node = Node(
            index=len(self.nodes),
            kind=kind,
            inputs=tuple(n.index for n in inputs),
            value=value,
            stop_gradient=stop_gradient,
            factor=factor,
            param=param,
            param_rows=param_rows,
        )
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, value) -> Node:
        """Record a constant/input leaf. The array is not copied."""
        return self._append("leaf", (), _as_matrix(value))

    def param(self, store: ParamStore, name: str) -> Node:
        """Leaf bound to a stored parameter; one node per (store, name) per tape."""
        key = (id(store), name)
        node = self._param_cache.get(key)
        if node is None:
            node = self._append("leaf", (), store.values[name], param=name)
            self._param_cache[key] = node
        return node

    def param_rows(self, store: ParamStore, name: str, rows) -> Node:
        """Leaf holding selected rows of a stored parameter.

        Backward scatter-adds the adjoint into the gradient accumulator at
        the same rows, so unused rows receive exactly zero gradient.
        """
        idx = np.asarray(rows, dtype=np.intp)
        return self._append("leaf", (), store.values[name][idx].copy(),
                            param=name, param_rows=idx)

    # -- operations ----------------------------------------------------------

    def apply(self, kind: str, *inputs: Node, factor: float | None = None) -> Node:
        if kind not in OP_KINDS:
            raise ValueError(f"unknown operation kind {kind!r}")
        vals = [n.value for n in inputs]
        if kind == "matmul":
            a, b = vals
            if a.shape[1] != b.shape[0]:
                raise ShapeMismatchError(kind, a.shape, b.shape)
            out = a @ b
        elif kind == "add_bias":
            x, b = vals
            if b.shape != (1, x.shape[1]):
                raise ShapeMismatchError(kind, x.shape, b.shape)
            out = x + b
        elif kind == "relu":
            (x,) = vals
            out = np.maximum(x, 0.0)
        elif kind == "concat_cols":
            a, b = vals
            if a.shape[0] != b.shape[0]:
                raise ShapeMismatchError(kind, a.shape, b.shape)
            out = np.concatenate([a, b], axis=1)
        elif kind == "scale":
            (x,) = vals
            if factor is None:
                raise ValueError("scale requires a factor")
            out = x * float(factor)
        elif kind == "add":
            a, b = vals
            if a.shape != b.shape:
                raise ShapeMismatchError(kind, a.shape, b.shape)
            out = a + b
        elif kind == "elementwise_mul":
            a, b = vals
            if a.shape != b.shape:
                raise ShapeMismatchError(kind, a.shape, b.shape)
            out = a * b
        else:  # log_softmax_rows
            (x,) = vals
            shifted = x - x.max(axis=1, keepdims=True)
            out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._append(kind, inputs, out, factor=factor)

    def matmul(self, a: Node, b: Node) -> Node:
        return self.apply("matmul", a, b)

    def add_bias(self, x: Node, b: Node) -> Node:
        return self.apply("add_bias", x, b)

    def relu(self, x: Node) -> Node:
        return self.apply("relu", x)

    def concat_cols(self, a: Node, b: Node) -> Node:
        return self.apply("concat_cols", a, b)

    def scale(self, x: Node, factor: float) -> Node:
        return self.apply("scale", x, factor=factor)

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", a, b)

    def elementwise_mul(self, a: Node, b: Node) -> Node:
        return self.apply("elementwise_mul", a, b)

    def log_softmax_rows(self, x: Node) -> Node:
        return self.apply("log_softmax_rows", x)

    def stop_gradient(self, x: Node) -> Node:
        """Identity forward; zero adjoint to the input on the backward pass."""
        return self._append("stop_gradient", (x,), x.value, stop_gradient=True)


def forward_op(tape: Tape, kind: str, inputs: list[Node], factor: float | None = None) -> Node:
    """Generic entry point used by the gradient-check loops."""
    return tape.apply(kind, *inputs, factor=factor)


def stop_gradient(tape: Tape, x: Node) -> Node:
    return tape.stop_gradient(x)


def cross_entropy(tape: Tape, logits: Node, targets) -> Node:
    """Mean cross-entropy between logit rows and target probability rows.

    Consumes the stabilized log-softmax directly; targets are constants (no
    gradient flows into them), so soft targets from a frozen teacher or
    smoothed labels can be passed as plain arrays.
    """
    t = _as_matrix(targets)
    n, k = logits.shape
    if t.shape != (n, k):
        raise ShapeMismatchError("cross_entropy", logits.shape, t.shape)
    if k < 2:
        raise ValueError(f"cross_entropy needs at least 2 classes, got {k}")
    row_sums = t.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"target row {i} is not normalized (sums to {row_sums[i]!r})")
    log_probs = tape.log_softmax_rows(logits)
    weighted = tape.elementwise_mul(log_probs, tape.leaf(t))
    left = tape.leaf(np.ones((1, n)))
    right = tape.leaf(np.ones((k, 1)))
    total = tape.matmul(tape.matmul(left, weighted), right)
    return tape.scale(total, -1.0 / n)


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns a map from node index to adjoint array. Parameter leaves that are
    unreachable from the loss (or cut off by stop_gradient) map to exact
    zeros.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss node, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    nodes = tape.nodes
    for node in reversed(nodes[: loss.index + 1]):
        grad = adjoints.get(node.index)
        if grad is None or node.kind == "leaf":
            continue
        if node.stop_gradient:
            continue
        ins = [nodes[i] for i in node.inputs]
        if node.kind == "matmul":
            a, b = ins
            _acc(adjoints, a, grad @ b.value.T, fresh=True)
            _acc(adjoints, b, a.value.T @ grad, fresh=True)
        elif node.kind == "add_bias":
            x, b = ins
            _acc(adjoints, x, grad, fresh=False)
            _acc(adjoints, b, grad.sum(axis=0, keepdims=True), fresh=True)
        elif node.kind == "relu":
            (x,) = ins
            _acc(adjoints, x, grad * (x.value > 0.0), fresh=True)
        elif node.kind == "concat_cols":
            a, b = ins
            split = a.shape[1]
            _acc(adjoints, a, grad[:, :split], fresh=False)
            _acc(adjoints, b, grad[:, split:], fresh=False)
        elif node.kind == "scale":
            (x,) = ins
            _acc(adjoints, x, grad * node.factor, fresh=True)
        elif node.kind == "add":
            a, b = ins
            _acc(adjoints, a, grad, fresh=False)
            _acc(adjoints, b, grad, fresh=False)
        elif node.kind == "elementwise_mul":
            a, b = ins
            _acc(adjoints, a, grad * b.value, fresh=True)
            _acc(adjoints, b, grad * a.value, fresh=True)
        elif node.kind == "log_softmax_rows":
            (x,) = ins
            softmax = np.exp(node.value)
            _acc(adjoints, x, grad - softmax * grad.sum(axis=1, keepdims=True), fresh=True)
        else:  # pragma: no cover - kinds are validated on the forward pass
            raise AssertionError(f"no backward rule for {node.kind!r}")
    for node in nodes:
        if node.param is not None and node.index not in adjoints:
            adjoints[node.index] = np.zeros_like(node.value)
    return adjoints


def _acc(adjoints: dict[int, np.ndarray], node: Node, grad: np.ndarray, fresh: bool) -> None:
    # Stored adjoints are always exclusively owned arrays, so += is safe;
    # pass-through grads (views or shared upstream buffers) are copied first.
    existing = adjoints.get(node.index)
    if existing is None:
        adjoints[node.index] = grad if fresh else grad.copy()
    else:
        existing += grad


def accumulate_param_grads(tape: Tape, adjoints: dict[int, np.ndarray], store: ParamStore) -> None:
    """Fold adjoints of parameter leaves into the store's accumulators."""
    for node in tape.nodes:
        if node.param is None:
            continue
        grad = adjoints.get(node.index)
        if grad is None:
            continue
        store.accumulate(node.param, grad, rows=node.param_rows)
