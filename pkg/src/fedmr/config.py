"""Experiment configuration: typed, validated, hashable.

A config is a frozen dataclass tree. `config_hash` covers every field that
can change training results; execution details (output dir, worker count)
are excluded so reruns and parallel runs of the same science hash alike.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError

STRATEGY_NAMES = ("sum", "mlp", "gate")

# fields that do not affect computed results, kept out of the hash
_NON_SCIENCE_FIELDS = ("out_dir", "workers")


@dataclass(frozen=True)
class NoiseConfig:
    """Client-side Gaussian noise on uploads."""

    enabled: bool = False
    variance: float = 0.0
    seed: int = 0
    # which upload surfaces get noised (both, per the decided reading)
    on_id_rows: bool = True
    on_strategy_grads: bool = True

    def validate(self) -> None:
        if self.variance < 0:
            raise ValidationError(f"noise variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class SynthConfig:
    """Built-in synthetic dataset generator settings."""

    n_users: int = 200
    n_items: int = 500
    raw_dim: int = 32
    signal_mix: float = 0.8
    latent_dim: int = 8
    target_degree: int = 18
    feature_noise: float = 0.05

    def validate(self) -> None:
        if not 0.0 <= self.signal_mix <= 1.0:
            raise ValidationError("signal_mix must lie in [0, 1]")
        if self.n_users < 1 or self.n_items < 16:
            raise ValidationError("synthetic datasets need >= 1 user and >= 16 items")
        if self.raw_dim < 1 or self.latent_dim < 1:
            raise ValidationError("synthetic dims must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset: exactly one of data_dir (prepared files) or synth
    data_dir: str | None = None
    synth: SynthConfig | None = None

    d: int = 64
    strategies: tuple[str, ...] = STRATEGY_NAMES
    fusion_mode: str = "mix"  # "mix" or one strategy name
    freeze_router: tuple[float, ...] | None = None  # fixed mix weights, skips routing
    backbone: str = "dot"
    alpha_scheme: str = "uniform"  # or "size"

    eta: float = 0.1
    rounds: int = 10
    local_epochs: int = 10
    batch_size: int = 2048
    negative_ratio: int = 4
    sampling_ratio: float = 1.0
    avoid_repeat: bool = False
    patience: int = 0  # 0 disables early stop

    noise: NoiseConfig = field(default_factory=NoiseConfig)

    drop_v: bool = False
    drop_c: bool = False
    drop_d: bool = False

    k_list: tuple[int, ...] = (50,)
    seed: int = 0
    min_interactions: int = 5
    fill_mode: str = "mean"

    # decided-rule switches, defaults match the written-down readings
    alpha_scales_loss: bool = False
    aggregate_maps: bool = True
    fill_before_filter: bool = False
    gate_elementwise: bool = False

    out_dir: str = "runs/out"
    workers: int = 1

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if (self.data_dir is None) == (self.synth is None):
            raise ValidationError("config needs exactly one of data_dir or synth")
        if self.synth is not None:
            self.synth.validate()
        self.noise.validate()
        if self.d < 1:
            raise ValidationError("d must be positive")
        if not self.strategies:
            raise ValidationError("strategies must be non-empty")
        if len(set(self.strategies)) != len(self.strategies):
            raise ValidationError("strategies must be distinct")
        for s in self.strategies:
            if s not in STRATEGY_NAMES:
                raise ValidationError(f"unknown strategy {s!r}")
        if self.fusion_mode != "mix":
            if self.fusion_mode not in self.strategies:
                raise ValidationError(
                    f"fusion_mode {self.fusion_mode!r} is not in strategies")
            if self.freeze_router is not None:
                raise ValidationError("freeze_router only applies to mix mode")
        if self.freeze_router is not None:
            w = self.freeze_router
            if len(w) != len(self.strategies):
                raise ValidationError("freeze_router length must match strategies")
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ValidationError("freeze_router weights must be a simplex point")
        if self.backbone not in ("dot", "mlp"):
            raise ValidationError(f"unknown backbone {self.backbone!r}")
        if self.alpha_scheme not in ("uniform", "size"):
            raise ValidationError(f"unknown alpha scheme {self.alpha_scheme!r}")
        if self.eta < 0:
            raise ValidationError("eta must be >= 0")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValidationError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.negative_ratio < 1:
            raise ValidationError("negative_ratio must be >= 1")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ValidationError("sampling_ratio must lie in (0, 1]")
        if self.patience < 0:
            raise ValidationError("patience must be >= 0")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ValidationError("k_list must hold positive cutoffs")
        if self.min_interactions < 1:
            raise ValidationError("min_interactions must be >= 1")
        if self.fill_mode not in ("mean", "designated"):
            raise ValidationError(f"unknown fill_mode {self.fill_mode!r}")
        if self.workers < 0:
            raise ValidationError("workers must be >= 0")

    # the strategy set a run actually instantiates
    def effective_strategies(self) -> tuple[str, ...]:
        if self.fusion_mode == "mix":
            return self.strategies
        return (self.fusion_mode,)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if self.synth is None:
            out.pop("synth")
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a JSON object")
        raw = dict(raw)
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
        if "noise" in raw:
            kwargs["noise"] = _sub_config(NoiseConfig, raw.pop("noise"), "noise")
        if "synth" in raw and raw["synth"] is not None:
            kwargs["synth"] = _sub_config(SynthConfig, raw.pop("synth"), "synth")
        for key, value in raw.items():
            if key in ("strategies", "k_list") and value is not None:
                value = tuple(value)
            if key == "freeze_router" and value is not None:
                value = tuple(float(x) for x in value)
            kwargs[key] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    # -- hashing ------------------------------------------------------------

    def config_hash(self, exclude: tuple[str, ...] = ()) -> str:
        """12-hex digest of the science-relevant fields.

        `exclude` drops additional top-level fields; ablation sweeps use it
        to verify variants differ only along the swept axis.
        """
        payload = self.to_dict()
        for name in _NON_SCIENCE_FIELDS + tuple(exclude):
            payload.pop(name, None)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _sub_config(cls, raw, label):
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ValidationError(f"config key {label!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ValidationError(f"unknown config key {label}.{key}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ValidationError(f"bad {label} config: {exc}") from exc
