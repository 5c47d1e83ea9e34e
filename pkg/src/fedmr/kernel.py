"""Minimal reverse-mode differentiation kernel.

A Tape records primitive ops in execution order; backward() replays them in
strict reverse order exactly once and accumulates gradients into the Param
leaves. All compute is float64. There is no graph optimizer, no broadcasting
beyond the ops' documented rules, and no parallelism inside an op, so a fixed
op sequence always produces bitwise identical values.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic, shared by the tape op and eval paths."""
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows_values(x: np.ndarray) -> np.ndarray:
    """Max-shifted row softmax, shared by the tape op and eval paths."""
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


class Tensor:
    """Immutable float64 array wrapper used at module boundaries.

    Construction validates finiteness; the underlying buffer is marked
    read-only so a Tensor's values never change after creation.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Param:
    """A named learnable array with a gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = _as_f64(value).copy()
        if not np.isfinite(self.value).all():
            raise NonFiniteError(f"param {name} initialized with NaN or Inf")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def sgd_step(self, lr: float) -> None:
        self.value -= lr * self.grad

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def zero_grads(params: Sequence[Param]) -> None:
    for p in params:
        p.zero_grad()


class Node:
    """One recorded value on a tape."""

    __slots__ = ("value", "grad", "op", "_bwd", "needs_grad")

    def __init__(self, value, op, bwd, needs_grad):
        self.value = value
        self.grad = None
        self.op = op
        self._bwd = bwd
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _acc(node: Node, g: np.ndarray) -> None:
    # Copy on first write: backward rules may hand back a shared buffer
    # (e.g. the pass-through of add), and later in-place accumulation must
    # not corrupt a sibling's gradient.
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


class Tape:
    """Ordered record of primitive ops supporting one-pass reverse replay."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._param_leaves: list[tuple[Param, Node]] = []

    def _record(self, value, op, bwd, needs_grad) -> Node:
        node = Node(value, op, bwd, needs_grad)
        self._nodes.append(node)
        return node

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    # -- leaves ------------------------------------------------------------

    def constant(self, x) -> Node:
        if isinstance(x, Tensor):
            arr = x.data
        else:
            arr = _as_f64(x)
        return self._record(arr, "constant", None, needs_grad=False)

    def param(self, p: Param) -> Node:
        node = self._record(p.value.copy(), "param", None, needs_grad=True)
        self._param_leaves.append((p, node))
        return node

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", (av.shape, bv.shape))
        out = av @ bv

        def bwd(g):
            if a.needs_grad:
                _acc(a, g @ bv.T)
            if b.needs_grad:
                _acc(b, av.T @ g)

        return self._record(out, "matmul", bwd, a.needs_grad or b.needs_grad)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError("add", (a.value.shape, b.value.shape))
        out = a.value + b.value

        def bwd(g):
            if a.needs_grad:
                _acc(a, g)
            if b.needs_grad:
                _acc(b, g)

        return self._record(out, "add", bwd, a.needs_grad or b.needs_grad)

    def add_bias(self, m: Node, bias: Node) -> Node:
        """Row broadcast: (n, d) + (d,)."""
        mv, bv = m.value, bias.value
        if mv.ndim != 2 or bv.shape != (mv.shape[1],):
            raise ShapeError("add-broadcast", (mv.shape, bv.shape))
        out = mv + bv

        def bwd(g):
            if m.needs_grad:
                _acc(m, g)
            if bias.needs_grad:
                _acc(bias, g.sum(axis=0))

        return self._record(out, "add-broadcast", bwd, m.needs_grad or bias.needs_grad)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError("mul", (a.value.shape, b.value.shape))
        av, bv = a.value, b.value
        out = av * bv

        def bwd(g):
            if a.needs_grad:
                _acc(a, g * bv)
            if b.needs_grad:
                _acc(b, g * av)

        return self._record(out, "mul", bwd, a.needs_grad or b.needs_grad)

    def relu(self, a: Node) -> Node:
        av = a.value
        out = np.maximum(av, 0.0)

        def bwd(g):
            if a.needs_grad:
                _acc(a, g * (av > 0.0))

        return self._record(out, "relu", bwd, a.needs_grad)

    def sigmoid(self, a: Node) -> Node:
        av = a.value
        out = sigmoid_values(av)

        def bwd(g):
            if a.needs_grad:
                _acc(a, g * out * (1.0 - out))

        return self._record(out, "sigmoid", bwd, a.needs_grad)

    def softmax_rows(self, a: Node) -> Node:
        av = a.value
        if av.ndim != 2:
            raise ShapeError("softmax-row", (av.shape,))
        out = softmax_rows_values(av)

        def bwd(g):
            if a.needs_grad:
                inner = (g * out).sum(axis=1, keepdims=True)
                _acc(a, out * (g - inner))

        return self._record(out, "softmax-row", bwd, a.needs_grad)

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        if not parts:
            raise ShapeError("concat-cols", ())
        rows = parts[0].value.shape[0]
        for p in parts:
            if p.value.ndim != 2 or p.value.shape[0] != rows:
                raise ShapeError("concat-cols", tuple(p.value.shape for p in parts))
        out = np.concatenate([p.value for p in parts], axis=1)
        widths = [p.value.shape[1] for p in parts]

        def bwd(g):
            offset = 0
            for p, w in zip(parts, widths):
                if p.needs_grad:
                    _acc(p, g[:, offset:offset + w])
                offset += w

        return self._record(out, "concat-cols", bwd, any(p.needs_grad for p in parts))

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        av = a.value
        if av.ndim != 2 or not (0 <= start < stop <= av.shape[1]):
            raise ShapeError("slice-cols", (av.shape,), f"slice [{start}:{stop}]")
        out = av[:, start:stop].copy()

        def bwd(g):
            if a.needs_grad:
                full = np.zeros_like(av)
                full[:, start:stop] = g
                _acc(a, full)

        return self._record(out, "slice-cols", bwd, a.needs_grad)

    def gather_rows(self, a: Node, idx) -> Node:
        av = a.value
        index = np.asarray(idx, dtype=np.int64)
        if av.ndim != 2 or index.ndim != 1:
            raise ShapeError("gather-rows", (av.shape, index.shape))
        if index.size and (index.min() < 0 or index.max() >= av.shape[0]):
            raise ShapeError("gather-rows", (av.shape, index.shape), "index out of range")
        out = av[index]

        def bwd(g):
            if a.needs_grad:
                full = np.zeros_like(av)
                np.add.at(full, index, g)
                _acc(a, full)

        return self._record(out, "gather-rows", bwd, a.needs_grad)

    def mean_rows(self, a: Node) -> Node:
        av = a.value
        if av.ndim != 2 or av.shape[0] == 0:
            raise ShapeError("mean-rows", (av.shape,), "needs at least one row")
        out = av.mean(axis=0, keepdims=True)
        n = av.shape[0]

        def bwd(g):
            if a.needs_grad:
                _acc(a, np.repeat(g / n, n, axis=0))

        return self._record(out, "mean-rows", bwd, a.needs_grad)

    def repeat_rows(self, a: Node, n: int) -> Node:
        av = a.value
        if av.ndim != 2 or av.shape[0] != 1:
            raise ShapeError("repeat-rows", (av.shape,))
        out = np.repeat(av, n, axis=0)

        def bwd(g):
            if a.needs_grad:
                _acc(a, g.sum(axis=0, keepdims=True))

        return self._record(out, "repeat-rows", bwd, a.needs_grad)

    def scale_columns(self, col: Node, m: Node) -> Node:
        """(n, 1) gate column times (n, d) matrix, broadcast over d."""
        cv, mv = col.value, m.value
        if cv.ndim != 2 or cv.shape[1] != 1 or mv.ndim != 2 or cv.shape[0] != mv.shape[0]:
            raise ShapeError("scale-columns", (cv.shape, mv.shape))
        out = cv * mv

        def bwd(g):
            if col.needs_grad:
                _acc(col, (g * mv).sum(axis=1, keepdims=True))
            if m.needs_grad:
                _acc(m, g * cv)

        return self._record(out, "scale-columns", bwd, col.needs_grad or m.needs_grad)

    def weighted_sum(self, mats: Sequence[Node], weights: Node) -> Node:
        """sum_j w_j * M_j for a weight vector of length len(mats).

        Terms accumulate in list order, so the float result is a fixed
        function of the operand order.
        """
        wv = weights.value.reshape(-1)
        if len(mats) == 0 or wv.shape != (len(mats),):
            raise ShapeError(
                "weighted-sum",
                tuple(m.value.shape for m in mats) + (weights.value.shape,),
            )
        base = mats[0].value.shape
        for m in mats:
            if m.value.shape != base:
                raise ShapeError("weighted-sum", tuple(m.value.shape for m in mats))
        out = wv[0] * mats[0].value
        for j in range(1, len(mats)):
            out = out + wv[j] * mats[j].value

        def bwd(g):
            if weights.needs_grad:
                gw = np.array([(g * m.value).sum() for m in mats])
                _acc(weights, gw.reshape(weights.value.shape))
            for j, m in enumerate(mats):
                if m.needs_grad:
                    _acc(m, wv[j] * g)

        needs = weights.needs_grad or any(m.needs_grad for m in mats)
        return self._record(out, "weighted-sum", bwd, needs)

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        av = a.value
        try:
            out = av.reshape(shape).copy()
        except ValueError:
            raise ShapeError("reshape", (av.shape,), f"target {shape}")

        def bwd(g):
            if a.needs_grad:
                _acc(a, g.reshape(av.shape))

        return self._record(out, "reshape", bwd, a.needs_grad)

    def sum_all(self, a: Node) -> Node:
        out = np.asarray(a.value.sum())

        def bwd(g):
            if a.needs_grad:
                _acc(a, np.broadcast_to(g, a.value.shape))

        return self._record(out, "sum", bwd, a.needs_grad)

    def bce_with_logits_mean(self, logits: Node, labels) -> Node:
        """Mean binary cross-entropy over the batch, numerically stable.

        loss_i = max(z,0) - z*y + log(1 + exp(-|z|)); gradient (sigma(z)-y)/n.
        """
        z = logits.value
        y = _as_f64(labels)
        if z.shape != y.shape or z.size == 0:
            raise ShapeError("bce-with-logits", (z.shape, y.shape),
                             "labels must match logits and batch must be non-empty")
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        out = np.asarray(per.mean())
        n = z.size

        def bwd(g):
            if logits.needs_grad:
                _acc(logits, float(g) * (sigmoid_values(z) - y) / n)

        return self._record(out, "bce-with-logits", bwd, logits.needs_grad)

    # -- dispatch ------------------------------------------------------------

    _DISPATCH = {
        "matmul": "matmul",
        "add": "add",
        "add-broadcast": "add_bias",
        "mul": "mul",
        "relu": "relu",
        "sigmoid": "sigmoid",
        "softmax-row": "softmax_rows",
        "concat-cols": "concat_cols",
        "slice-cols": "slice_cols",
        "gather-rows": "gather_rows",
        "mean-rows": "mean_rows",
        "repeat-rows": "repeat_rows",
        "scale-columns": "scale_columns",
        "weighted-sum": "weighted_sum",
        "reshape": "reshape",
        "sum": "sum_all",
        "bce-with-logits": "bce_with_logits_mean",
    }

    def apply(self, op_kind: str, *args) -> Node:
        """Generic entry point: record one primitive by its kind string."""
        try:
            method = getattr(self, self._DISPATCH[op_kind])
        except KeyError:
            raise ShapeError(op_kind, (), "unknown op kind") from None
        return method(*args)

    # -- reverse pass ----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into every Param leaf on this tape.

        Gradients inside the tape are reset per call, but Param.grad is only
        ever added to; calling backward twice doubles every Param gradient.
        """
        if loss.value.shape != ():
            raise ShapeError("backward", (loss.value.shape,), "loss must be scalar")
        if not np.isfinite(loss.value):
            raise NonFiniteError("backward called on non-finite loss")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            if node._bwd is None or node.grad is None or not node.needs_grad:
                continue
            node._bwd(node.grad)
        for p, leaf in self._param_leaves:
            if leaf.grad is not None:
                p.grad += leaf.grad


def forward_primitive(op_kind: str, inputs: Sequence) -> Tensor:
    """Evaluate one primitive outside any training loop.

    The op is recorded on a throwaway tape; the result is returned as an
    immutable Tensor.
    """
    tape = Tape()
    nodes = [x if isinstance(x, Node) else tape.constant(x) for x in inputs]
    return Tensor(tape.apply(op_kind, *nodes).value)


def finite_diff_check(build_loss: Callable[[], tuple[Tape, Node]],
                      params: Sequence[Param],
                      eps: float = 1e-6,
                      scale_floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    build_loss must construct a fresh tape and return (tape, scalar loss node)
    as a pure function of the current param values. Every coordinate of every
    param is perturbed by +-eps.

    The error for one coordinate is |a - c| / max(|a|, |c|, scale_floor).
    Central differences of an O(1) loss at eps=1e-6 carry ~1e-10 of f64
    roundoff, so coordinates whose true gradient sits below the floor are
    held to an absolute bar (floor * tolerance) instead of drowning the
    report in quantization noise. Pass scale_floor=0 for the raw ratio.
    """
    zero_grads(params)
    tape, loss = build_loss()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        _, l = build_loss()
        v = float(l.value)
        if not np.isfinite(v):
            raise NonFiniteError("finite_diff_check: non-finite loss")
        return v

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat_v = p.value.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + eps
            up = value()
            flat_v[i] = orig - eps
            down = value()
            flat_v[i] = orig
            central = (up - down) / (2.0 * eps)
            denom = max(abs(flat_g[i]), abs(central), scale_floor, 1e-12)
            rel = abs(flat_g[i] - central) / denom
            if rel > worst:
                worst = rel
    return worst
