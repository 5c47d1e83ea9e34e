"""Experiment runner.

Commands: prepare, run, ablate, dump-embeddings, synth. A run is fully
determined by (config JSON, seed): metrics files are bitwise reproducible.
Config precedence: FEDMR_SEED env var > --set overrides > config file.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, SynthConfig
from .data import (
    Index,
    InteractionMatrix,
    Split,
    align_table_to_items,
    fill_missing,
    filter_min_interactions,
    leave_one_out_split,
    load_interactions,
    load_modality_table,
    load_sidecar,
    sample_negatives,
    sparsity,
    synth_dataset,
    write_modality_table,
    write_sidecar,
)
from .errors import FedmrError, ValidationError
from .federation import RunData, Trainer
from .fusion import mix_np

METRICS_HEADER = "v1,round,split,K,HR,NDCG,loss,seconds"

# fields each ablation axis is allowed to vary
ABLATION_AXES = {
    "modality": ("drop_v", "drop_c", "drop_d"),
    "strategy": ("fusion_mode", "freeze_router"),
    "noise": ("noise",),
    "sampling": ("sampling_ratio",),
}


# --------------------------------------------------------------------------
# config assembly

def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValidationError(f"--set expects key=value, got {assignment!r}")
    key, _, text = assignment.partition("=")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ValidationError(f"cannot set {key!r}: {part!r} is not an object")
        node = nxt
    node[parts[-1]] = value


def _load_config(args, default_data_dir: str | None = None) -> ExperimentConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    for assignment in getattr(args, "set", None) or []:
        _apply_override(raw, assignment)
    if getattr(args, "out_dir", None):
        raw["out_dir"] = args.out_dir
    if default_data_dir and not raw.get("data_dir") and not raw.get("synth"):
        raw["data_dir"] = default_data_dir
    env_seed = os.environ.get("FEDMR_SEED")
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError as exc:
            raise ValidationError(f"FEDMR_SEED must be an integer, got {env_seed!r}") from exc
    return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------------------
# dataset assembly

def _assemble_synth(cfg: ExperimentConfig) -> tuple[RunData, dict]:
    s = cfg.synth
    ds = synth_dataset(s.n_users, s.n_items, s.raw_dim, cfg.seed, s.signal_mix,
                       latent_dim=s.latent_dim, target_degree=s.target_degree,
                       feature_noise=s.feature_noise)
    split = leave_one_out_split(ds.interactions, cfg.seed)
    negs = sample_negatives(split, cfg.negative_ratio, cfg.seed)
    stats = {
        "users": ds.interactions.n_users,
        "items": ds.interactions.n_items,
        "interactions": ds.interactions.n_interactions,
        "sparsity": sparsity(ds.interactions),
    }
    return RunData(ds.interactions, split, negs, ds.visual.data, ds.text.data), stats


def _load_index_file(path: Path) -> list[str]:
    if not path.exists():
        raise ValidationError(f"missing index file {path}")
    ids = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1] or not parts[0].isdigit():
            raise ValidationError(f"{path}:{line_no}: expected index<TAB>id")
        if int(parts[0]) != line_no - 1:
            raise ValidationError(f"{path}:{line_no}: indices must be dense and ordered")
        ids.append(parts[1])
    return ids


def _assemble_prepared(cfg: ExperimentConfig) -> tuple[RunData, dict]:
    root = Path(cfg.data_dir)
    if not root.is_dir():
        raise ValidationError(f"data_dir {root} is not a directory")
    user_ids = _load_index_file(root / "user_index.tsv")
    item_ids = _load_index_file(root / "item_index.tsv")
    item_index = Index()
    for ext in item_ids:
        item_index.add(ext)
    user_index = Index()
    for ext in user_ids:
        user_index.add(ext)

    per_user: list[list[int]] = [[] for _ in user_ids]
    inter_path = root / "interactions.tsv"
    if not inter_path.exists():
        raise ValidationError(f"missing interactions file {inter_path}")
    for line_no, line in enumerate(inter_path.read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{inter_path}:{line_no}: expected user<TAB>item")
        per_user[user_index.index_of(parts[0])].append(item_index.index_of(parts[1]))
    matrix = InteractionMatrix(
        len(user_ids), len(item_ids),
        [np.array(sorted(row), dtype=np.int64) for row in per_user])
    matrix.validate()

    split_doc = json.loads((root / "split.json").read_text())
    val = np.asarray(split_doc["val_item"], dtype=np.int64)
    test = np.asarray(split_doc["test_item"], dtype=np.int64)
    train_rows = []
    for u, row in enumerate(matrix.items):
        keep = row[(row != val[u]) & (row != test[u])]
        train_rows.append(keep)
    train = InteractionMatrix(matrix.n_users, matrix.n_items, train_rows)
    split = Split(train, val, test)

    visual = load_modality_table(root / "visual.fmr", expected_rows=len(item_ids))
    text = load_modality_table(root / "text.fmr", expected_rows=len(item_ids))
    if visual.missing.any() or text.missing.any():
        raise ValidationError(f"{root}: prepared tables must have no missing rows")
    negs = sample_negatives(split, cfg.negative_ratio, cfg.seed)
    stats = {
        "users": matrix.n_users,
        "items": matrix.n_items,
        "interactions": matrix.n_interactions,
        "sparsity": sparsity(matrix),
    }
    return RunData(matrix, split, negs, visual.data, text.data), stats


def _assemble(cfg: ExperimentConfig) -> tuple[RunData, dict]:
    if cfg.synth is not None:
        return _assemble_synth(cfg)
    return _assemble_prepared(cfg)


# --------------------------------------------------------------------------
# metrics output

def _metrics_lines(cfg: ExperimentConfig, history: list[dict],
                   test_metrics: dict, best_round: int) -> list[str]:
    lines = [f"# config_hash={cfg.config_hash()}", METRICS_HEADER]
    for record in history:
        for k in cfg.k_list:
            m = record["val"][int(k)]
            lines.append(f"v1,{record['round']},val,{k},{m['hr']!r},{m['ndcg']!r},"
                         f"{record['loss']!r},0.000")
    best_loss = 0.0
    for record in history:
        if record["round"] == best_round:
            best_loss = record["loss"]
    for k in cfg.k_list:
        m = test_metrics[int(k)]
        lines.append(f"v1,{best_round},test,{k},{m['hr']!r},{m['ndcg']!r},"
                     f"{best_loss!r},0.000")
    return lines


def _write_run_outputs(cfg: ExperimentConfig, trainer: Trainer, stats: dict,
                       total_seconds: float) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = _metrics_lines(cfg, trainer.history, trainer.test_metrics,
                           trainer.best_round)
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    server_params = int(trainer.d_matrix.value.size) + sum(
        int(p.value.size) for p in trainer.bundle.named_params().values())
    per_client = sum(int(p.value.size)
                     for p in trainer.clients[0].personal_params().values())
    summary = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "dataset": stats,
        "param_counts": {"server": server_params, "per_client": per_client,
                         "clients": len(trainer.clients)},
        "best_round": trainer.best_round,
        "test": {str(k): v for k, v in trainer.test_metrics.items()},
        "history": [
            {"round": r["round"], "loss": r["loss"],
             "val": {str(k): v for k, v in r["val"].items()},
             "seconds": r["seconds"]}
            for r in trainer.history],
        "total_seconds": total_seconds,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    trainer.save_checkpoint(out / "checkpoint.fmrc")
    return out


# --------------------------------------------------------------------------
# commands

def cmd_run(args) -> int:
    cfg = _load_config(args)
    data, stats = _assemble(cfg)
    started = time.perf_counter()
    if getattr(args, "resume", None):
        trainer = Trainer.load_checkpoint(args.resume, cfg, data)
    else:
        trainer = Trainer(cfg, data)
    trainer.run()
    total = time.perf_counter() - started
    out = _write_run_outputs(cfg, trainer, stats, total)
    k0 = int(cfg.k_list[0])
    test = trainer.test_metrics[k0]
    print(f"run complete: {len(trainer.history)} rounds, best round "
          f"{trainer.best_round}, test HR@{k0} {test['hr']:.4f} "
          f"NDCG@{k0} {test['ndcg']:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if cfg.synth is None:
        raise ValidationError("synth command needs a synth block in the config")
    s = cfg.synth
    ds = synth_dataset(s.n_users, s.n_items, s.raw_dim, cfg.seed, s.signal_mix,
                       latent_dim=s.latent_dim, target_degree=s.target_degree,
                       feature_noise=s.feature_noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for u, items in enumerate(ds.interactions.items):
        for i in items:
            rows.append(f"u{u}\ti{int(i)}")
    (out / "interactions.tsv").write_text("\n".join(rows) + "\n")
    item_ids = [f"i{i}" for i in range(ds.interactions.n_items)]
    write_modality_table(out / "visual.fmr", ds.visual.data, ds.visual.missing)
    write_sidecar(out / "visual_items.tsv", item_ids)
    write_modality_table(out / "text.fmr", ds.text.data, ds.text.missing)
    write_sidecar(out / "text_items.tsv", item_ids)
    write_modality_table(out / "truth.fmr", ds.truth,
                         np.zeros(ds.truth.shape[0], dtype=bool))
    print(f"synthetic dataset in {out}: {ds.interactions.n_users} users, "
          f"{ds.interactions.n_items} items, "
          f"{ds.interactions.n_interactions} interactions")
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_config(args, default_data_dir=args.out)
    raw_matrix, _, item_index = load_interactions(args.interactions)

    def load_aligned(fmr_path, sidecar_path, label):
        if not Path(fmr_path).exists():
            raise ValidationError(f"missing {label} table {fmr_path}")
        if not Path(sidecar_path).exists():
            raise ValidationError(f"missing {label} sidecar {sidecar_path}")
        table = load_modality_table(fmr_path)
        return align_table_to_items(table, load_sidecar(sidecar_path), item_index)

    visual = load_aligned(args.visual, args.visual_items, "visual")
    text = load_aligned(args.text, args.text_items, "text")

    if cfg.fill_before_filter:
        visual = fill_missing(visual, cfg.fill_mode)
        text = fill_missing(text, cfg.fill_mode)

    result = filter_min_interactions(raw_matrix, cfg.min_interactions)
    matrix = result.matrix
    # re-align modality rows to the filtered item space
    old_of_new = np.empty(matrix.n_items, dtype=np.int64)
    for old, new in result.item_old_to_new.items():
        old_of_new[new] = old
    visual = type(visual)(matrix.n_items, visual.raw_dim,
                          visual.data[old_of_new], visual.missing[old_of_new])
    text = type(text)(matrix.n_items, text.raw_dim,
                      text.data[old_of_new], text.missing[old_of_new])
    if not cfg.fill_before_filter:
        visual = fill_missing(visual, cfg.fill_mode)
        text = fill_missing(text, cfg.fill_mode)

    split = leave_one_out_split(matrix, cfg.seed)

    # names in the new index spaces
    raw_user_ids = _invert_index(args.interactions, which="user")
    new_user_ids = [None] * matrix.n_users
    for old, new in result.user_old_to_new.items():
        new_user_ids[new] = raw_user_ids[old]
    new_item_ids = [item_index.id_of(int(old_of_new[i]))
                    for i in range(matrix.n_items)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for u, items in enumerate(matrix.items):
        for i in items:
            rows.append(f"{new_user_ids[u]}\t{new_item_ids[int(i)]}")
    (out / "interactions.tsv").write_text("\n".join(rows) + "\n")
    (out / "user_index.tsv").write_text(
        "\n".join(f"{i}\t{x}" for i, x in enumerate(new_user_ids)) + "\n")
    (out / "item_index.tsv").write_text(
        "\n".join(f"{i}\t{x}" for i, x in enumerate(new_item_ids)) + "\n")
    (out / "split.json").write_text(json.dumps({
        "seed": cfg.seed,
        "val_item": split.val_item.tolist(),
        "test_item": split.test_item.tolist(),
    }, sort_keys=True) + "\n")
    write_modality_table(out / "visual.fmr", visual.data, visual.missing)
    write_modality_table(out / "text.fmr", text.data, text.missing)

    stats = {
        "users": matrix.n_users,
        "items": matrix.n_items,
        "interactions": matrix.n_interactions,
        "sparsity": sparsity(matrix),
        "min_interactions": cfg.min_interactions,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"users {stats['users']}  items {stats['items']}  "
          f"interactions {stats['interactions']}  "
          f"sparsity {100.0 * stats['sparsity']:.2f}%")
    return 0


def _invert_index(interactions_path: str, which: str) -> list[str]:
    # replays first-appearance order; avoids carrying Index objects around
    seen: dict[str, int] = {}
    order: list[str] = []
    col = 0 if which == "user" else 1
    for line in Path(interactions_path).read_text().splitlines():
        parts = line.split("\t")
        key = parts[col]
        if key not in seen:
            seen[key] = len(order)
            order.append(key)
    return order


def cmd_ablate(args) -> int:
    base = _load_config(args)
    axis = args.axis
    if axis not in ABLATION_AXES:
        raise ValidationError(
            f"unknown ablation axis {axis!r}; pick one of {sorted(ABLATION_AXES)}")
    variants: list[tuple[str, ExperimentConfig]] = []
    if axis == "modality":
        clean = base.replace(drop_v=False, drop_c=False, drop_d=False)
        variants = [("full", clean),
                    ("no_v", clean.replace(drop_v=True)),
                    ("no_c", clean.replace(drop_c=True)),
                    ("no_d", clean.replace(drop_d=True))]
    elif axis == "strategy":
        variants = [("mix", base.replace(fusion_mode="mix", freeze_router=None))]
        for s in base.strategies:
            variants.append((s, base.replace(fusion_mode=s, freeze_router=None)))
    elif axis == "noise":
        sigma2 = base.noise.variance if base.noise.variance > 0 else 0.1
        off = base.replace(noise=base.noise.__class__(
            enabled=False, variance=0.0, seed=base.noise.seed))
        on = base.replace(noise=base.noise.__class__(
            enabled=True, variance=sigma2, seed=base.noise.seed))
        variants = [("clean", off), (f"sigma2_{sigma2}", on)]
    elif axis == "sampling":
        for ratio in (0.1, 0.3, 0.5, 1.0):
            variants.append((f"ratio_{ratio}", base.replace(sampling_ratio=ratio)))

    excluded = ABLATION_AXES[axis]
    base_hash = variants[0][1].config_hash(exclude=excluded)
    for label, cfg in variants:
        if cfg.config_hash(exclude=excluded) != base_hash:
            raise ValidationError(
                f"ablation variant {label!r} differs outside the {axis} axis")

    out_root = Path(base.out_dir)
    rows = [f"# base_hash={base_hash}", "axis,label,K,split,HR,NDCG,config_hash"]
    for label, cfg in variants:
        run_cfg = cfg.replace(out_dir=str(out_root / axis / label))
        data, stats = _assemble(run_cfg)
        started = time.perf_counter()
        trainer = Trainer(run_cfg, data)
        trainer.run()
        _write_run_outputs(run_cfg, trainer, stats, time.perf_counter() - started)
        for k in run_cfg.k_list:
            m = trainer.test_metrics[int(k)]
            rows.append(f"{axis},{label},{k},test,{m['hr']!r},{m['ndcg']!r},"
                        f"{run_cfg.config_hash()}")
        print(f"{axis}/{label}: test HR@{run_cfg.k_list[0]} "
              f"{trainer.test_metrics[int(run_cfg.k_list[0])]['hr']:.4f}")
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / f"{axis}_comparison.csv").write_text("\n".join(rows) + "\n")
    print(f"comparison written to {out_root / (axis + '_comparison.csv')}")
    return 0


def cmd_dump_embeddings(args) -> int:
    cfg = _load_config(args)
    data, _ = _assemble(cfg)
    trainer = Trainer.load_checkpoint(args.checkpoint, cfg, data)
    try:
        users = [int(u) for u in args.users]
    except ValueError as exc:
        raise ValidationError(f"user ids must be integers: {exc}") from exc
    for u in users:
        if not 0 <= u < len(trainer.clients):
            raise ValidationError(f"unknown user index {u}")
    v_mapped, c_mapped = trainer.bundle.maps.forward_np(data.v_raw, data.c_raw)
    d_values = trainer.d_matrix.value
    fs = trainer.bundle.item_features_np(
        data.v_raw, data.c_raw, d_values,
        drop_v=cfg.drop_v, drop_c=cfg.drop_c, drop_d=cfg.drop_d)

    lines = [f"# config_hash={cfg.config_hash()}",
             "item,source," + ",".join(f"c{i}" for i in range(cfg.d))]

    def block(tag, matrix):
        for i in range(matrix.shape[0]):
            lines.append(f"{i},{tag}," + ",".join(repr(float(x)) for x in matrix[i]))

    block("V", v_mapped)
    block("C", c_mapped)
    block("D", d_values)
    for u in users:
        state = trainer.clients[u]
        if state.router is None:
            mixed = fs[0]
        else:
            w = state.router.forward_np(fs, state.pool_rows)[0]
            mixed = mix_np(fs, w)
        block(f"FBAR:{u}", mixed)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 2} embedding rows to {args.out}")
    return 0


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmr",
        description="federated multimodal recommendation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted paths allowed)")
        p.add_argument("--out-dir", help="override the output directory")

    p = sub.add_parser("prepare", help="filter, split and pack a raw dataset")
    common(p)
    p.add_argument("--interactions", required=True, help="raw user/item[/ts] TSV")
    p.add_argument("--visual", required=True, help="visual FMR1 table")
    p.add_argument("--visual-items", required=True, help="visual sidecar TSV")
    p.add_argument("--text", required=True, help="text FMR1 table")
    p.add_argument("--text-items", required=True, help="text sidecar TSV")
    p.add_argument("--out", required=True, help="prepared dataset directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    common(p)
    p.add_argument("--resume", help="continue from a checkpoint file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run one ablation axis and compare")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=sorted(ABLATION_AXES), help="what to vary")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="export V/C/D and mixed features")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--users", nargs="*", default=[],
                   help="user indices whose mixed features to export")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FedmrError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
