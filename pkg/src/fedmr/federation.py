"""Federated training: client sampling, local updates, server aggregation.

The server owns the item ID table D and the fusion globals (mapping layers
plus per-strategy parameters). Each round a sampled client subset trains
local copies for A epochs and uploads sparse D row-deltas plus accumulated
strategy gradients. Personal parameters (scoring head, router) never leave
the client. All randomness comes from stateless streams keyed by round and
client id, so checkpoints carry no generator state at all.
"""
from __future__ import annotations

import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, NoiseConfig
from .data import InteractionMatrix, NegativeSamples, Split
from .errors import AccumulationError, FedmrError, NonFiniteError, ValidationError
from .evaluation import heldout_rank, metrics_from_ranks
from .fusion import FrozenRouter, FusionBundle, Router, mix, mix_np, route
from .kernel import Param, Tape
from .model import make_head, recon_loss
from .rng import stream

CHECKPOINT_MAGIC = b"FMRC"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# round planning

@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    client_ids: np.ndarray  # ascending
    alphas: np.ndarray      # aligned, positive, sums to 1

    def alpha_of(self, client_id: int) -> float:
        pos = int(np.searchsorted(self.client_ids, client_id))
        if pos >= len(self.client_ids) or self.client_ids[pos] != client_id:
            raise ValidationError(f"client {client_id} is not in this round's plan")
        return float(self.alphas[pos])


def sample_clients(n: int, ratio: float, seed: int, round_index: int,
                   previous: np.ndarray | None = None, avoid_repeat: bool = False,
                   sizes: np.ndarray | None = None,
                   scheme: str = "uniform") -> RoundPlan:
    """Uniform sample of ceil(ratio*n) clients, weights renormalized over it."""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError("sampling ratio must lie in (0, 1]")
    n_s = max(1, math.ceil(ratio * n - 1e-9))
    pool = np.arange(n)
    if avoid_repeat and previous is not None and len(previous) > 0:
        if n_s > n - len(previous):
            raise ValidationError(
                f"cannot pick {n_s} of {n} clients while avoiding "
                f"{len(previous)} previous participants")
        keep = np.ones(n, dtype=bool)
        keep[np.asarray(previous, dtype=np.int64)] = False
        pool = pool[keep]
    rng = stream(seed, "plan", round_index)
    picked = pool[np.asarray(rng.sample(len(pool), n_s), dtype=np.int64)]
    ids = np.sort(picked)
    if scheme == "uniform":
        alphas = np.full(n_s, 1.0 / n_s)
    elif scheme == "size":
        if sizes is None:
            raise ValidationError("size-proportional weights need client sizes")
        w = np.asarray(sizes, dtype=np.float64)[ids]
        if (w <= 0).any():
            raise ValidationError("size-proportional weights need positive sizes")
        alphas = w / w.sum()
    else:
        raise ValidationError(f"unknown alpha scheme {scheme!r}")
    return RoundPlan(round_index, ids, alphas)


# --------------------------------------------------------------------------
# client state and reports

@dataclass
class ClientState:
    """Per-user state that persists across rounds and never leaves the client."""

    user_id: int
    head: object
    router: Router | FrozenRouter | None
    positives: np.ndarray          # train item rows, interaction order
    pool_rows: np.ndarray          # sorted unique train rows (router input, eval mask)
    negatives: np.ndarray          # (n_positives, ratio), aligned with positives
    local_map_values: dict[str, np.ndarray] | None = None  # when maps stay local

    def personal_params(self) -> dict[str, Param]:
        out = dict(self.head.named_params())
        if isinstance(self.router, Router):
            out.update(self.router.named_params())
        return out


@dataclass
class ClientReport:
    """Upload surface of one local run plus local-only diagnostics."""

    client_id: int
    epochs: int
    d_rows: np.ndarray                      # sorted rows the client trained
    d_delta: np.ndarray                     # (len(d_rows), d)
    gamma_grads: dict[str, np.ndarray]      # accumulated per-step gradients
    # diagnostics below stay on the client; to_payload() drops them
    step_losses: list[float] = field(default_factory=list, repr=False)
    gamma_start: dict[str, np.ndarray] | None = field(default=None, repr=False)
    gamma_end: dict[str, np.ndarray] | None = field(default=None, repr=False)
    gamma_trace: list[dict[str, np.ndarray]] | None = field(default=None, repr=False)

    def to_payload(self) -> dict:
        """Exactly what crosses the wire: no head, no router, no raw history."""
        return {
            "client_id": self.client_id,
            "epochs": self.epochs,
            "d_rows": self.d_rows,
            "d_delta": self.d_delta,
            "gamma_grads": self.gamma_grads,
        }


def _gamma_names(bundle: FusionBundle, aggregate_maps: bool) -> list[str]:
    names = []
    for name in bundle.named_params():
        if name.startswith("strategy."):
            names.append(name)
        elif aggregate_maps:
            names.append(name)
    return sorted(names)


def client_update(state: ClientState, bundle: FusionBundle, d_values: np.ndarray,
                  v_raw: np.ndarray, c_raw: np.ndarray, cfg: ExperimentConfig,
                  round_index: int, record_gamma_trace: bool = False,
                  loss_scale: float | None = None) -> ClientReport:
    """Run A local epochs for one client and build its upload report.

    `bundle` and `d_values` are the server snapshot; both are copied before
    any update. The pair shuffle is keyed by (seed, user, round, epoch), so
    the trajectory is a pure function of the config and the round index.
    """
    u = state.user_id
    n_pos = len(state.positives)
    if n_pos == 0:
        raise ValidationError(f"client {u} has no train positives")
    if state.negatives.shape[0] != n_pos:
        raise ValidationError(f"client {u}: negatives misaligned with positives")

    gamma_names = _gamma_names(bundle, cfg.aggregate_maps)
    if cfg.eta == 0.0:
        # nothing can move; the zero report is observationally identical
        zeros = {name: np.zeros_like(bundle.named_params()[name].value)
                 for name in gamma_names}
        return ClientReport(u, cfg.local_epochs, np.zeros(0, np.int64),
                            np.zeros((0, cfg.d)), zeros,
                            gamma_start={k: v.copy() for k, v in zeros.items()},
                            gamma_end={k: v.copy() for k, v in zeros.items()},
                            gamma_trace=[] if record_gamma_trace else None)

    local_bundle = bundle.clone()
    if state.local_map_values is not None:
        local_bundle.load_values(state.local_map_values, partial=True)
    local_d = Param("id_embedding", d_values)
    local_params = list(local_bundle.named_params().values()) + [local_d]
    local_params += list(state.personal_params().values())

    gamma_params = {name: local_bundle.named_params()[name] for name in gamma_names}
    gamma_start = {name: p.value.copy() for name, p in gamma_params.items()}
    gamma_acc = {name: np.zeros_like(p.value) for name, p in gamma_params.items()}
    trace: list[dict[str, np.ndarray]] | None = [] if record_gamma_trace else None

    live_router = isinstance(state.router, Router)
    pairs_per_batch = max(1, cfg.batch_size // (1 + cfg.negative_ratio))
    touched = np.zeros(0, dtype=np.int64)
    losses: list[float] = []

    for epoch in range(cfg.local_epochs):
        order = np.arange(n_pos)
        stream(cfg.seed, "shuffle", u, round_index, epoch).shuffle(order)
        for start in range(0, n_pos, pairs_per_batch):
            sel = order[start:start + pairs_per_batch]
            batch_items = np.concatenate([state.positives[sel],
                                          state.negatives[sel].ravel()])
            labels = np.zeros(batch_items.size)
            labels[:sel.size] = 1.0
            rows_step = np.unique(
                np.concatenate([batch_items, state.pool_rows])
                if live_router else batch_items)
            batch_pos = np.searchsorted(rows_step, batch_items)

            tape = Tape()
            d_node = tape.gather_rows(tape.param(local_d), rows_step)
            fs = local_bundle.build_item_features(
                tape, tape.constant(v_raw[rows_step]),
                tape.constant(c_raw[rows_step]), d_node,
                drop_v=cfg.drop_v, drop_c=cfg.drop_c, drop_d=cfg.drop_d)
            if state.router is None:
                mixed = fs[0]
            elif live_router:
                pool_pos = np.searchsorted(rows_step, state.pool_rows)
                weights = route(tape, fs, pool_pos, state.router)
                mixed = mix(tape, fs, weights)
            else:  # frozen weights ignore the pool entirely
                weights = state.router.build(tape, fs, state.pool_rows)
                mixed = mix(tape, fs, weights)
            scores = state.head.build_scores(tape, tape.gather_rows(mixed, batch_pos))
            loss = recon_loss(tape, scores, labels)
            if loss_scale is not None:
                loss = tape.mul(loss, tape.constant(np.asarray(loss_scale)))
            try:
                tape.backward(loss)
            except NonFiniteError as exc:
                raise FedmrError(
                    f"non-finite loss for client {u} at round {round_index}, "
                    f"epoch {epoch}, step {start // pairs_per_batch}") from exc

            for name, p in gamma_params.items():
                gamma_acc[name] += p.grad
            if trace is not None:
                trace.append({name: p.grad.copy() for name, p in gamma_params.items()})
            for p in local_params:
                p.sgd_step(cfg.eta)
                p.zero_grad()
            losses.append(float(loss.value))
            touched = np.union1d(touched, rows_step)

    if state.local_map_values is not None:
        for name in state.local_map_values:
            state.local_map_values[name] = local_bundle.named_params()[name].value.copy()

    delta = local_d.value[touched] - d_values[touched]
    return ClientReport(
        u, cfg.local_epochs, touched, delta, gamma_acc,
        step_losses=losses, gamma_start=gamma_start,
        gamma_end={name: p.value.copy() for name, p in gamma_params.items()},
        gamma_trace=trace)


def accumulate_gamma_check(gamma0: dict[str, np.ndarray],
                           gamma_t: dict[str, np.ndarray], eta: float,
                           per_step_grads: list[dict[str, np.ndarray]],
                           tol: float = 1e-9) -> float:
    """Verify that summed per-step gradients equal (gamma0 - gamma_t) / eta.

    Plain SGD forces the identity; any optimizer state or reordering breaks
    it. Returns the max deviation, raises if it exceeds `tol`.
    """
    if eta <= 0:
        raise ValidationError("the accumulated-gradient identity needs eta > 0")
    worst = 0.0
    for name, g0 in gamma0.items():
        acc = np.zeros_like(g0)
        for step in per_step_grads:
            acc += step[name]
        dev = float(np.abs(acc - (g0 - gamma_t[name]) / eta).max()) if g0.size else 0.0
        worst = max(worst, dev)
    if worst > tol:
        raise AccumulationError(
            f"accumulated gradients drift from (gamma0 - gamma_t)/eta by "
            f"{worst:.3e} (tolerance {tol:.1e})")
    return worst


def apply_noise(report: ClientReport, noise: NoiseConfig,
                round_index: int) -> ClientReport:
    """Add seeded N(0, sigma^2) to the upload surfaces before they leave."""
    if not noise.enabled or noise.variance == 0.0:
        return report
    sigma = math.sqrt(noise.variance)
    rng = stream(noise.seed, "noise", round_index, report.client_id)
    grads = {}
    for name in sorted(report.gamma_grads):
        g = report.gamma_grads[name]
        if noise.on_strategy_grads:
            g = g + sigma * rng.normals(g.size).reshape(g.shape)
        grads[name] = g
    delta = report.d_delta
    if noise.on_id_rows and delta.size:
        delta = delta + sigma * rng.normals(delta.size).reshape(delta.shape)
    return ClientReport(report.client_id, report.epochs, report.d_rows, delta,
                        grads, step_losses=report.step_losses,
                        gamma_start=report.gamma_start,
                        gamma_end=report.gamma_end,
                        gamma_trace=report.gamma_trace)


def aggregate(bundle: FusionBundle, d_matrix: Param, reports: list[ClientReport],
              plan: RoundPlan, eta: float, aggregate_maps: bool = True) -> None:
    """Fold client reports into the server state, in ascending client order.

    D rows touched by at least one report move to the alpha-weighted mean of
    the uploaded copies (weights renormalized over the touching clients);
    untouched rows keep their value. Strategy and mapping parameters take one
    SGD step with the alpha-weighted summed accumulated gradients.
    """
    planned = set(int(i) for i in plan.client_ids)
    seen = set()
    for r in reports:
        if r.client_id not in planned:
            raise ValidationError(f"report from unplanned client {r.client_id}")
        if r.client_id in seen:
            raise ValidationError(f"duplicate report from client {r.client_id}")
        seen.add(r.client_id)
    if seen != planned:
        raise ValidationError(f"missing reports from clients {sorted(planned - seen)}")

    reports = sorted(reports, key=lambda r: r.client_id)
    gamma_names = _gamma_names(bundle, aggregate_maps)

    acc = np.zeros_like(d_matrix.value)
    weight = np.zeros(d_matrix.value.shape[0])
    for r in reports:
        alpha = plan.alpha_of(r.client_id)
        if r.d_rows.size:
            acc[r.d_rows] += alpha * r.d_delta
            weight[r.d_rows] += alpha
    rows = weight > 0
    d_matrix.value[rows] += acc[rows] / weight[rows, None]

    params = bundle.named_params()
    for name in gamma_names:
        total = np.zeros_like(params[name].value)
        for r in reports:
            if name not in r.gamma_grads:
                raise ValidationError(
                    f"client {r.client_id} report lacks gradients for {name}")
            total += plan.alpha_of(r.client_id) * r.gamma_grads[name]
        params[name].value -= eta * total

    for name, p in params.items():
        if not np.isfinite(p.value).all():
            raise NonFiniteError(f"server parameter {name} went non-finite")
    if not np.isfinite(d_matrix.value).all():
        raise NonFiniteError("server ID table went non-finite")


# --------------------------------------------------------------------------
# training loop

@dataclass
class RunData:
    """Everything a run needs after preprocessing."""

    interactions: InteractionMatrix
    split: Split
    negatives: NegativeSamples
    v_raw: np.ndarray
    c_raw: np.ndarray


def build_clients(cfg: ExperimentConfig, split: Split,
                  negatives: NegativeSamples) -> list[ClientState]:
    strategies = cfg.effective_strategies()
    clients = []
    for u, train in enumerate(split.train.items):
        if cfg.fusion_mode != "mix":
            router = None
        elif cfg.freeze_router is not None:
            router = FrozenRouter(cfg.freeze_router)
        else:
            router = Router(len(strategies), cfg.d)
        clients.append(ClientState(
            user_id=u,
            head=make_head(cfg.backbone, cfg.d, cfg.seed, u),
            router=router,
            positives=np.asarray(train, dtype=np.int64),
            pool_rows=np.unique(np.asarray(train, dtype=np.int64)),
            negatives=negatives.negatives[u],
        ))
    return clients


class Trainer:
    """Round loop: sample, fan out client updates, aggregate, evaluate."""

    def __init__(self, cfg: ExperimentConfig, data: RunData):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        n_items = data.interactions.n_items
        strategies = cfg.effective_strategies()
        self.bundle = FusionBundle(
            cfg.d, data.v_raw.shape[1], data.c_raw.shape[1], strategies,
            cfg.seed, gate_elementwise=cfg.gate_elementwise)
        g = stream(cfg.seed, "init", "id_embedding")
        self.d_matrix = Param(
            "id_embedding", 0.1 * g.normals(n_items * cfg.d).reshape(n_items, cfg.d))
        self.clients = build_clients(cfg, data.split, data.negatives)
        if not cfg.aggregate_maps:
            for state in self.clients:
                state.local_map_values = {
                    name: p.value.copy()
                    for name, p in self.bundle.named_params().items()
                    if name.startswith("map_")}
        self.sizes = np.array([len(c.positives) for c in self.clients])
        self.round_next = 0
        self.prev_ids: np.ndarray | None = None
        self.history: list[dict] = []
        self.best: dict | None = None
        self.stale = 0
        self.test_metrics: dict[int, dict] | None = None

    # -- one round ----------------------------------------------------------

    def run_round(self) -> dict:
        t = self.round_next
        started = time.perf_counter()
        plan = sample_clients(
            len(self.clients), self.cfg.sampling_ratio, self.cfg.seed, t,
            previous=self.prev_ids, avoid_repeat=self.cfg.avoid_repeat,
            sizes=self.sizes, scheme=self.cfg.alpha_scheme)

        d_snapshot = self.d_matrix.value.copy()
        selected = [self.clients[int(i)] for i in plan.client_ids]

        def one(state: ClientState) -> ClientReport:
            scale = (plan.alpha_of(state.user_id)
                     if self.cfg.alpha_scales_loss else None)
            report = client_update(
                state, self.bundle, d_snapshot, self.data.v_raw, self.data.c_raw,
                self.cfg, t, loss_scale=scale)
            return apply_noise(report, self.cfg.noise, t)

        workers = self.cfg.workers
        if workers != 1 and len(selected) > 1:
            max_workers = workers if workers > 0 else (min(8, len(selected)))
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                by_id = {r.client_id: r for r in pool.map(one, selected)}
            reports = [by_id[int(i)] for i in plan.client_ids]
        else:
            reports = [one(s) for s in selected]

        aggregate(self.bundle, self.d_matrix, reports, plan, self.cfg.eta,
                  aggregate_maps=self.cfg.aggregate_maps)

        loss = 0.0
        for r in reports:
            if r.step_losses:
                loss += plan.alpha_of(r.client_id) * float(np.mean(r.step_losses))
        self.prev_ids = plan.client_ids
        self.round_next = t + 1
        return {"round": t, "loss": loss,
                "seconds": time.perf_counter() - started}

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, which: str = "val") -> dict[int, dict]:
        """Full-catalog masked ranking; returns {K: {"hr":…, "ndcg":…}}."""
        if which == "val":
            held = self.data.split.val_item
        elif which == "test":
            held = self.data.split.test_item
        else:
            raise ValidationError(f"unknown split {which!r}")
        fs = self.bundle.item_features_np(
            self.data.v_raw, self.data.c_raw, self.d_matrix.value,
            drop_v=self.cfg.drop_v, drop_c=self.cfg.drop_c, drop_d=self.cfg.drop_d)
        n_items = self.d_matrix.value.shape[0]
        ranks = np.empty(len(self.clients), dtype=np.int64)
        for u, state in enumerate(self.clients):
            if state.local_map_values is not None:
                local = self.bundle.clone()
                local.load_values(state.local_map_values, partial=True)
                fs_u = local.item_features_np(
                    self.data.v_raw, self.data.c_raw, self.d_matrix.value,
                    drop_v=self.cfg.drop_v, drop_c=self.cfg.drop_c,
                    drop_d=self.cfg.drop_d)
            else:
                fs_u = fs
            if state.router is None:
                mixed = fs_u[0]
            else:
                w = state.router.forward_np(fs_u, state.pool_rows)[0]
                mixed = mix_np(fs_u, w)
            scores = state.head.forward_np(mixed)
            mask = np.zeros(n_items, dtype=bool)
            mask[state.pool_rows] = True
            ranks[u] = heldout_rank(scores, mask, int(held[u]))
        out = {}
        for k in self.cfg.k_list:
            hr, ndcg = metrics_from_ranks(ranks, k)
            out[int(k)] = {"hr": hr, "ndcg": ndcg}
        return out

    # -- full run -----------------------------------------------------------

    def run(self) -> list[dict]:
        k0 = int(self.cfg.k_list[0])
        while self.round_next < self.cfg.rounds:
            record = self.run_round()
            record["val"] = self.evaluate("val")
            self.history.append(record)
            metric = record["val"][k0]["hr"]
            if self.best is None or metric > self.best["metric"]:
                self.best = {"round": record["round"], "metric": metric,
                             "values": self.collect_values()}
                self.stale = 0
            else:
                self.stale += 1
                if self.cfg.patience > 0 and self.stale >= self.cfg.patience:
                    break
        if self.best is not None:
            current = self.collect_values()
            self.restore_values(self.best["values"])
            self.test_metrics = self.evaluate("test")
            self.restore_values(current)
        else:
            self.test_metrics = self.evaluate("test")
        return self.history

    @property
    def best_round(self) -> int:
        return -1 if self.best is None else int(self.best["round"])

    # -- state capture ------------------------------------------------------

    def _registry(self) -> dict[str, Param]:
        out = {"server/id_embedding": self.d_matrix}
        for name, p in self.bundle.named_params().items():
            out[f"server/{name}"] = p
        for state in self.clients:
            for name, p in state.personal_params().items():
                out[f"client/{state.user_id}/{name}"] = p
        return out

    def collect_values(self) -> dict[str, np.ndarray]:
        out = {name: p.value.copy() for name, p in self._registry().items()}
        for state in self.clients:
            if state.local_map_values is not None:
                for name, v in state.local_map_values.items():
                    out[f"client/{state.user_id}/{name}"] = v.copy()
        return out

    def restore_values(self, values: dict[str, np.ndarray]) -> None:
        registry = self._registry()
        for name, p in registry.items():
            p.value[...] = values[name]
        for state in self.clients:
            if state.local_map_values is not None:
                for name in state.local_map_values:
                    state.local_map_values[name] = (
                        values[f"client/{state.user_id}/{name}"].copy())

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        """Versioned binary snapshot; resuming reproduces the run bitwise.

        Streams are derived from (seed, round, client), so no generator
        state is stored: the round counter alone pins future randomness.
        """
        values = self.collect_values()
        if self.best is not None:
            for name, v in self.best["values"].items():
                values[f"best/{name}"] = v
        names = sorted(values)
        header = {
            "config_hash": self.cfg.config_hash(),
            "round_next": self.round_next,
            "prev_ids": None if self.prev_ids is None else self.prev_ids.tolist(),
            "stale": self.stale,
            "best_round": None if self.best is None else self.best["round"],
            "best_metric": None if self.best is None else self.best["metric"],
            "history": self.history,
            "arrays": [[name, list(values[name].shape)] for name in names],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in names:
                fh.write(np.ascontiguousarray(values[name], dtype=np.float64)
                         .tobytes())

    @classmethod
    def load_checkpoint(cls, path: str | Path, cfg: ExperimentConfig,
                        data: RunData) -> "Trainer":
        raw = Path(path).read_bytes()
        if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        version, = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16:16 + hlen].decode())
        if header["config_hash"] != cfg.config_hash():
            raise ValidationError(
                f"{path}: checkpoint was written by config "
                f"{header['config_hash']}, current is {cfg.config_hash()}")
        trainer = cls(cfg, data)
        offset = 16 + hlen
        values = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            values[name] = arr.reshape(shape).copy()
            offset += count * 8
        if offset != len(raw):
            raise ValidationError(f"{path}: trailing bytes after checkpoint arrays")
        best_values = {name[len("best/"):]: v for name, v in values.items()
                       if name.startswith("best/")}
        live = {name: v for name, v in values.items()
                if not name.startswith("best/")}
        trainer.restore_values(live)
        trainer.round_next = int(header["round_next"])
        trainer.prev_ids = (None if header["prev_ids"] is None
                            else np.asarray(header["prev_ids"], dtype=np.int64))
        trainer.stale = int(header["stale"])
        history = header["history"]
        for record in history:  # JSON stringifies the integer K keys
            if "val" in record:
                record["val"] = {int(k): v for k, v in record["val"].items()}
        trainer.history = history
        if header["best_round"] is not None:
            trainer.best = {"round": int(header["best_round"]),
                            "metric": float(header["best_metric"]),
                            "values": best_values}
        return trainer
