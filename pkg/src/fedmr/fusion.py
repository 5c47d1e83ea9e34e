"""Feature mixing: mapping layers, fusion strategies, router, mixture.

Raw modality features pass through per-modality affine maps into the shared
d-dimensional space; each fusion strategy combines mapped visual (V), mapped
text (C), and the ID embedding rows (D) into one item matrix; a user-local
router turns the pooled strategy outputs over that user's history into mix
weights on the probability simplex.

Every component exposes both a tape-building path (training) and a plain
numpy forward (evaluation, embedding dumps). The two share the same float
expressions, so their outputs are bitwise equal.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError
from .kernel import Node, Param, Tape, softmax_rows_values
from .kernel import sigmoid_values
from .rng import stream

STRATEGY_NAMES = ("sum", "mlp", "gate")


def _init_normal(seed: int, name: str, shape: tuple[int, ...], scale: float) -> Param:
    flat = stream(seed, "init", name).normals(int(np.prod(shape)))
    return Param(name, scale * flat.reshape(shape))


def _init_zeros(name: str, shape: tuple[int, ...]) -> Param:
    return Param(name, np.zeros(shape))


class FeatureMaps:
    """Affine raw_dim -> d map per modality; ID rows are already d-wide."""

    def __init__(self, raw_dim_v: int, raw_dim_c: int, d: int, seed: int):
        self.d = d
        self.v_weight = _init_normal(seed, "map_v.weight", (raw_dim_v, d), 1.0 / np.sqrt(raw_dim_v))
        self.v_bias = _init_zeros("map_v.bias", (d,))
        self.c_weight = _init_normal(seed, "map_c.weight", (raw_dim_c, d), 1.0 / np.sqrt(raw_dim_c))
        self.c_bias = _init_zeros("map_c.bias", (d,))

    def named_params(self) -> dict[str, Param]:
        return {
            "map_v.weight": self.v_weight,
            "map_v.bias": self.v_bias,
            "map_c.weight": self.c_weight,
            "map_c.bias": self.c_bias,
        }

    def build(self, tape: Tape, v_raw: Node, c_raw: Node) -> tuple[Node, Node]:
        v = tape.add_bias(tape.matmul(v_raw, tape.param(self.v_weight)), tape.param(self.v_bias))
        c = tape.add_bias(tape.matmul(c_raw, tape.param(self.c_weight)), tape.param(self.c_bias))
        return v, c

    def forward_np(self, v_raw: np.ndarray, c_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = (v_raw @ self.v_weight.value) + self.v_bias.value
        c = (c_raw @ self.c_weight.value) + self.c_bias.value
        return v, c


def map_features(tape: Tape, v_raw: Node, c_raw: Node, maps: FeatureMaps) -> tuple[Node, Node]:
    return maps.build(tape, v_raw, c_raw)


class SumStrategy:
    name = "sum"

    def __init__(self, d: int, seed: int):
        self.d = d

    def named_params(self) -> dict[str, Param]:
        return {}

    def build(self, tape: Tape, v: Node, c: Node, d: Node) -> Node:
        return tape.add(tape.add(v, c), d)

    def forward_np(self, v: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
        return (v + c) + d


class MlpStrategy:
    """Row-wise 3-layer network over concat(v, c, d)."""

    name = "mlp"

    def __init__(self, d: int, seed: int):
        self.d = d
        self.w1 = _init_normal(seed, "strategy.mlp.w1", (3 * d, d), 1.0 / np.sqrt(3 * d))
        self.b1 = _init_zeros("strategy.mlp.b1", (d,))
        self.w2 = _init_normal(seed, "strategy.mlp.w2", (d, d), 1.0 / np.sqrt(d))
        self.b2 = _init_zeros("strategy.mlp.b2", (d,))
        self.w3 = _init_normal(seed, "strategy.mlp.w3", (d, d), 1.0 / np.sqrt(d))
        self.b3 = _init_zeros("strategy.mlp.b3", (d,))

    def named_params(self) -> dict[str, Param]:
        return {
            "strategy.mlp.w1": self.w1, "strategy.mlp.b1": self.b1,
            "strategy.mlp.w2": self.w2, "strategy.mlp.b2": self.b2,
            "strategy.mlp.w3": self.w3, "strategy.mlp.b3": self.b3,
        }

    def build(self, tape: Tape, v: Node, c: Node, d: Node) -> Node:
        h = tape.concat_cols([v, c, d])
        h = tape.relu(tape.add_bias(tape.matmul(h, tape.param(self.w1)), tape.param(self.b1)))
        h = tape.relu(tape.add_bias(tape.matmul(h, tape.param(self.w2)), tape.param(self.b2)))
        return tape.add_bias(tape.matmul(h, tape.param(self.w3)), tape.param(self.b3))

    def forward_np(self, v: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
        h = np.concatenate([v, c, d], axis=1)
        h = np.maximum((h @ self.w1.value) + self.b1.value, 0.0)
        h = np.maximum((h @ self.w2.value) + self.b2.value, 0.0)
        return (h @ self.w3.value) + self.b3.value


class GateStrategy:
    """Per-item source gates: scalar per source by default, or one gate per
    coordinate with elementwise=True."""

    name = "gate"

    def __init__(self, d: int, seed: int, elementwise: bool = False):
        self.d = d
        self.elementwise = elementwise
        width = 3 * d if elementwise else 3
        self.weight = _init_normal(seed, "strategy.gate.weight", (3 * d, width), 1.0 / np.sqrt(3 * d))
        self.bias = _init_zeros("strategy.gate.bias", (width,))

    def named_params(self) -> dict[str, Param]:
        return {"strategy.gate.weight": self.weight, "strategy.gate.bias": self.bias}

    def build(self, tape: Tape, v: Node, c: Node, d: Node) -> Node:
        cat = tape.concat_cols([v, c, d])
        gates = tape.sigmoid(tape.add_bias(
            tape.matmul(cat, tape.param(self.weight)), tape.param(self.bias)))
        if self.elementwise:
            dd = self.d
            out = tape.mul(tape.slice_cols(gates, 0, dd), v)
            out = tape.add(out, tape.mul(tape.slice_cols(gates, dd, 2 * dd), c))
            return tape.add(out, tape.mul(tape.slice_cols(gates, 2 * dd, 3 * dd), d))
        out = tape.scale_columns(tape.slice_cols(gates, 0, 1), v)
        out = tape.add(out, tape.scale_columns(tape.slice_cols(gates, 1, 2), c))
        return tape.add(out, tape.scale_columns(tape.slice_cols(gates, 2, 3), d))

    def forward_np(self, v: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
        cat = np.concatenate([v, c, d], axis=1)
        gates = sigmoid_values((cat @ self.weight.value) + self.bias.value)
        if self.elementwise:
            dd = self.d
            return (gates[:, :dd] * v + gates[:, dd:2 * dd] * c) + gates[:, 2 * dd:] * d
        return (gates[:, 0:1] * v + gates[:, 1:2] * c) + gates[:, 2:3] * d


def make_strategy(name: str, d: int, seed: int, gate_elementwise: bool = False):
    if name == "sum":
        return SumStrategy(d, seed)
    if name == "mlp":
        return MlpStrategy(d, seed)
    if name == "gate":
        return GateStrategy(d, seed, elementwise=gate_elementwise)
    raise ValidationError(f"unknown fusion strategy {name!r}")


def fuse(tape: Tape, strategy, v: Node, c: Node, d: Node) -> Node:
    return strategy.build(tape, v, c, d)


class Router:
    """User-local gate over strategies: pooled history rows -> softmax."""

    def __init__(self, n_strategies: int, d: int, name_prefix: str = "router"):
        self.n_strategies = n_strategies
        self.d = d
        # zero init: every user starts at the uniform mixture
        self.weight = _init_zeros(f"{name_prefix}.weight", (n_strategies * d, n_strategies))
        self.bias = _init_zeros(f"{name_prefix}.bias", (n_strategies,))

    def named_params(self) -> dict[str, Param]:
        return {"router.weight": self.weight, "router.bias": self.bias}

    def build(self, tape: Tape, fs: list[Node], pool_rows: np.ndarray) -> Node:
        if len(fs) != self.n_strategies:
            raise ShapeError("route", (len(fs), self.n_strategies), "strategy count mismatch")
        if np.asarray(pool_rows).size == 0:
            raise ValidationError("route: empty interaction set")
        pools = [tape.mean_rows(tape.gather_rows(f, pool_rows)) for f in fs]
        logits = tape.add_bias(
            tape.matmul(tape.concat_cols(pools), tape.param(self.weight)),
            tape.param(self.bias))
        return tape.softmax_rows(logits)

    def forward_np(self, fs: list[np.ndarray], pool_rows: np.ndarray) -> np.ndarray:
        if np.asarray(pool_rows).size == 0:
            raise ValidationError("route: empty interaction set")
        pools = [f[pool_rows].mean(axis=0, keepdims=True) for f in fs]
        logits = (np.concatenate(pools, axis=1) @ self.weight.value) + self.bias.value
        return softmax_rows_values(logits)


class FrozenRouter:
    """Constant mix weights; no parameters, no pooling."""

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError("frozen router weights must lie on the simplex")
        self.weights = w
        self.n_strategies = w.shape[1]

    def named_params(self) -> dict[str, Param]:
        return {}

    def build(self, tape: Tape, fs: list[Node], pool_rows: np.ndarray) -> Node:
        return tape.constant(self.weights)

    def forward_np(self, fs: list[np.ndarray], pool_rows: np.ndarray) -> np.ndarray:
        return self.weights.copy()


def route(tape: Tape, fs: list[Node], pool_rows: np.ndarray, router) -> Node:
    return router.build(tape, fs, pool_rows)


def mix(tape: Tape, fs: list[Node], weights: Node) -> Node:
    if weights.value.reshape(-1).shape != (len(fs),):
        raise ShapeError("mix", (weights.value.shape, len(fs)))
    return tape.weighted_sum(fs, weights)


def mix_np(fs: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(fs),):
        raise ShapeError("mix", (w.shape, len(fs)))
    out = w[0] * fs[0]
    for j in range(1, len(fs)):
        out = out + w[j] * fs[j]
    return out


class FusionBundle:
    """Globally shared fusion state: maps plus the active strategies."""

    def __init__(self, d: int, raw_dim_v: int, raw_dim_c: int,
                 strategy_names: tuple[str, ...], seed: int,
                 gate_elementwise: bool = False):
        if not strategy_names:
            raise ValidationError("need at least one fusion strategy")
        if len(set(strategy_names)) != len(strategy_names):
            raise ValidationError("duplicate fusion strategies")
        self.d = d
        self.raw_dim_v = raw_dim_v
        self.raw_dim_c = raw_dim_c
        self.strategy_names = tuple(strategy_names)
        self.gate_elementwise = gate_elementwise
        self.seed = seed
        self.maps = FeatureMaps(raw_dim_v, raw_dim_c, d, seed)
        self.strategies = [make_strategy(n, d, seed, gate_elementwise) for n in strategy_names]

    def named_params(self) -> dict[str, Param]:
        out = dict(self.maps.named_params())
        for s in self.strategies:
            out.update(s.named_params())
        return out

    def value_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_params().items()}

    def load_values(self, values: dict[str, np.ndarray], partial: bool = False) -> None:
        for name, p in self.named_params().items():
            if partial and name not in values:
                continue
            p.value[...] = values[name]

    def clone(self) -> "FusionBundle":
        other = FusionBundle(self.d, self.raw_dim_v, self.raw_dim_c,
                             self.strategy_names, self.seed, self.gate_elementwise)
        other.load_values(self.value_dict())
        return other

    def build_item_features(self, tape: Tape, v_raw: Node, c_raw: Node, d_rows: Node,
                            drop_v: bool = False, drop_c: bool = False,
                            drop_d: bool = False) -> list[Node]:
        """Mapped, optionally ablated inputs through every strategy."""
        v, c = self.maps.build(tape, v_raw, c_raw)
        n = v.value.shape[0]
        zeros = None
        if drop_v or drop_c or drop_d:
            zeros = tape.constant(np.zeros((n, self.d)))
        if drop_v:
            v = zeros
        if drop_c:
            c = zeros
        d_node = zeros if drop_d else d_rows
        return [s.build(tape, v, c, d_node) for s in self.strategies]

    def item_features_np(self, v_raw: np.ndarray, c_raw: np.ndarray, d_values: np.ndarray,
                         drop_v: bool = False, drop_c: bool = False,
                         drop_d: bool = False) -> list[np.ndarray]:
        v, c = self.maps.forward_np(v_raw, c_raw)
        if drop_v:
            v = np.zeros_like(v)
        if drop_c:
            c = np.zeros_like(c)
        d = np.zeros_like(d_values) if drop_d else d_values
        return [s.forward_np(v, c, d) for s in self.strategies]
