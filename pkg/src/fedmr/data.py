"""Dataset ingestion, preprocessing, splits, and the synthetic generator.

Interaction logs arrive as TSV (user_id, item_id, optional integer
timestamp). Modality features arrive as FMR1 binary tables with a sidecar
mapping row order to external item ids. Everything downstream works on dense
indices assigned in first-appearance order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    MalformedLineError,
    RowCountMismatchError,
    TruncatedPayloadError,
    ValidationError,
)
from .rng import stream

_MAGIC = b"FMR1"
_HEADER = struct.Struct("<III")  # version, rows, dim


class Index:
    """Bijection between external string ids and dense indices from 0."""

    def __init__(self, ids=()):
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        for i in ids:
            self.add(i)

    def add(self, ext_id: str) -> int:
        idx = self._pos.get(ext_id)
        if idx is None:
            idx = len(self._ids)
            self._ids.append(ext_id)
            self._pos[ext_id] = idx
        return idx

    def index_of(self, ext_id: str) -> int:
        try:
            return self._pos[ext_id]
        except KeyError:
            raise ValidationError(f"unknown id: {ext_id!r}") from None

    def id_of(self, idx: int) -> str:
        return self._ids[idx]

    def __contains__(self, ext_id: str) -> bool:
        return ext_id in self._pos

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)


@dataclass
class InteractionMatrix:
    """Per-user sorted arrays of interacted item indices."""

    n_users: int
    n_items: int
    items: list[np.ndarray]
    timestamps: list[np.ndarray] | None = None

    def validate(self) -> None:
        if len(self.items) != self.n_users:
            raise ValidationError("user row count mismatch")
        for u, row in enumerate(self.items):
            if row.size:
                if row.min() < 0 or row.max() >= self.n_items:
                    raise ValidationError(f"user {u}: item index out of range")
                if not (np.diff(row) > 0).all():
                    raise ValidationError(f"user {u}: items not strictly increasing")
            if self.timestamps is not None and self.timestamps[u].shape != row.shape:
                raise ValidationError(f"user {u}: timestamp misalignment")

    @property
    def n_interactions(self) -> int:
        return int(sum(row.size for row in self.items))


@dataclass
class ModalityTable:
    """One modality's item features, widened to float64 for compute."""

    n_items: int
    raw_dim: int
    data: np.ndarray
    missing: np.ndarray

    def validate(self) -> None:
        if self.data.shape != (self.n_items, self.raw_dim):
            raise ValidationError("modality table shape mismatch")
        if self.missing.shape != (self.n_items,):
            raise ValidationError("missing mask shape mismatch")
        present = self.data[~self.missing]
        if present.size and not np.isfinite(present).all():
            raise ValidationError("non-finite values in present rows")


@dataclass
class Split:
    train: InteractionMatrix
    val_item: np.ndarray
    test_item: np.ndarray


@dataclass
class NegativeSamples:
    """negatives[u] has shape (n_train_positives(u), ratio)."""

    ratio: int
    negatives: list[np.ndarray]


@dataclass
class FilterResult:
    matrix: InteractionMatrix
    user_old_to_new: dict[int, int]
    item_old_to_new: dict[int, int]


@dataclass
class SynthDataset:
    interactions: InteractionMatrix
    visual: ModalityTable
    text: ModalityTable
    truth: np.ndarray  # n_users x n_items interaction probabilities


# -- interaction log ingestion -------------------------------------------------


def load_interactions(path: str) -> tuple[InteractionMatrix, Index, Index]:
    """Parse a user/item[/timestamp] TSV into a dense matrix plus indices.

    Duplicate (user, item) pairs collapse to one interaction keeping the
    largest timestamp. Column count must be consistent across the file.
    """
    users = Index()
    items = Index()
    seen: dict[tuple[int, int], int | None] = {}
    n_cols = None
    any_line = False
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            any_line = True
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise MalformedLineError(path, line_no, f"expected 2 or 3 columns, got {len(parts)}")
            if n_cols is None:
                n_cols = len(parts)
            elif len(parts) != n_cols:
                raise MalformedLineError(path, line_no, "inconsistent column count")
            if not parts[0] or not parts[1]:
                raise MalformedLineError(path, line_no, "empty id field")
            ts = None
            if len(parts) == 3:
                try:
                    ts = int(parts[2])
                except ValueError:
                    raise MalformedLineError(path, line_no, f"bad timestamp {parts[2]!r}") from None
            key = (users.add(parts[0]), items.add(parts[1]))
            if key in seen:
                prev = seen[key]
                if ts is not None and (prev is None or ts > prev):
                    seen[key] = ts
            else:
                seen[key] = ts
    if not any_line:
        raise ValidationError(f"{path}: empty interaction file")

    per_user: list[list[tuple[int, int | None]]] = [[] for _ in range(len(users))]
    for (u, i), ts in seen.items():
        per_user[u].append((i, ts))
    rows, stamps = [], []
    for entries in per_user:
        entries.sort(key=lambda e: e[0])
        rows.append(np.array([e[0] for e in entries], dtype=np.int64))
        stamps.append(np.array([e[1] if e[1] is not None else 0 for e in entries], dtype=np.int64))
    matrix = InteractionMatrix(
        n_users=len(users),
        n_items=len(items),
        items=rows,
        timestamps=stamps if n_cols == 3 else None,
    )
    matrix.validate()
    return matrix, users, items


def filter_min_interactions(matrix: InteractionMatrix, k: int) -> FilterResult:
    """Drop users with fewer than k interactions, to a fixpoint.

    Items left with zero interactions are dropped and the survivors are
    reindexed preserving order. Removing a user never changes another user's
    count, so the loop converges after one pass; it is still written as a
    fixpoint for robustness.
    """
    if k < 1:
        raise ValidationError("filter threshold must be >= 1")
    keep_user = [row.size >= k for row in matrix.items]
    changed = True
    while changed:
        changed = False
        for u, ok in enumerate(keep_user):
            if ok and matrix.items[u].size < k:
                keep_user[u] = False
                changed = True
    kept_users = [u for u, ok in enumerate(keep_user) if ok]
    if not kept_users:
        raise ValidationError("dataset exhausted: no users survive the filter")

    used = np.zeros(matrix.n_items, dtype=bool)
    for u in kept_users:
        used[matrix.items[u]] = True
    kept_items = np.flatnonzero(used)
    item_map = {int(old): new for new, old in enumerate(kept_items)}
    remap = np.full(matrix.n_items, -1, dtype=np.int64)
    remap[kept_items] = np.arange(kept_items.size)

    rows, stamps = [], []
    for u in kept_users:
        old = matrix.items[u]
        new = remap[old]
        order = np.argsort(new, kind="stable")
        rows.append(new[order])
        if matrix.timestamps is not None:
            stamps.append(matrix.timestamps[u][order])
    out = InteractionMatrix(
        n_users=len(kept_users),
        n_items=int(kept_items.size),
        items=rows,
        timestamps=stamps if matrix.timestamps is not None else None,
    )
    out.validate()
    return FilterResult(
        matrix=out,
        user_old_to_new={old: new for new, old in enumerate(kept_users)},
        item_old_to_new=item_map,
    )


def sparsity(matrix: InteractionMatrix) -> float:
    if matrix.n_users <= 0 or matrix.n_items <= 0:
        raise ValidationError("sparsity needs a non-empty matrix")
    return 1.0 - matrix.n_interactions / (matrix.n_users * matrix.n_items)


# -- splits and negatives -------------------------------------------------------


def leave_one_out_split(matrix: InteractionMatrix, seed: int) -> Split:
    """Hold out one test and one validation item per user.

    With timestamps: test is the latest event, validation the second latest,
    ties broken by (timestamp, item index). Without timestamps: two distinct
    seeded draws per user.
    """
    val = np.empty(matrix.n_users, dtype=np.int64)
    test = np.empty(matrix.n_users, dtype=np.int64)
    rows, stamps = [], []
    for u in range(matrix.n_users):
        items = matrix.items[u]
        n = items.size
        if n < 3:
            raise ValidationError(f"user {u} has {n} interactions, need >= 3 to split")
        if matrix.timestamps is not None:
            ts = matrix.timestamps[u]
            order = np.lexsort((items, ts))
            pos_test, pos_val = order[-1], order[-2]
        else:
            g = stream(seed, "split", u)
            pos_test = g.randbelow(n)
            j = g.randbelow(n - 1)
            pos_val = j + (1 if j >= pos_test else 0)
        test[u] = items[pos_test]
        val[u] = items[pos_val]
        mask = np.ones(n, dtype=bool)
        mask[[pos_test, pos_val]] = False
        rows.append(items[mask])
        if matrix.timestamps is not None:
            stamps.append(matrix.timestamps[u][mask])
    train = InteractionMatrix(
        n_users=matrix.n_users,
        n_items=matrix.n_items,
        items=rows,
        timestamps=stamps if matrix.timestamps is not None else None,
    )
    train.validate()
    return Split(train=train, val_item=val, test_item=test)


def sample_negatives(split: Split, ratio: int, seed: int) -> NegativeSamples:
    """ratio distinct uniform negatives per train positive, per user.

    Negatives avoid the user's full interaction set, train and held-out
    alike. Requires at least ratio candidate items per user.
    """
    if ratio < 1:
        raise ValidationError("negative ratio must be >= 1")
    n_items = split.train.n_items
    out = []
    for u in range(split.train.n_users):
        interacted = np.zeros(n_items, dtype=bool)
        interacted[split.train.items[u]] = True
        interacted[split.val_item[u]] = True
        interacted[split.test_item[u]] = True
        allowed = np.flatnonzero(~interacted)
        if allowed.size < ratio:
            raise ValidationError(
                f"user {u}: only {allowed.size} candidate negatives, need {ratio}"
            )
        g = stream(seed, "negatives", u)
        n_pos = split.train.items[u].size
        picks = np.empty((n_pos, ratio), dtype=np.int64)
        for p in range(n_pos):
            chosen: list[int] = []
            while len(chosen) < ratio:
                c = g.randbelow(allowed.size)
                if c not in chosen:
                    chosen.append(c)
            picks[p] = allowed[chosen]
        out.append(picks)
    return NegativeSamples(ratio=ratio, negatives=out)


# -- FMR1 binary tables ----------------------------------------------------------


def write_modality_table(path: str, data: np.ndarray, missing: np.ndarray) -> None:
    """Write one modality table: f32 payload plus one mask byte per row."""
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.ndim != 2:
        raise ValidationError("modality data must be 2-D")
    mask = np.asarray(missing, dtype=bool)
    if mask.shape != (arr.shape[0],):
        raise ValidationError("missing mask must have one entry per row")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(1, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
        fh.write(mask.astype(np.uint8).tobytes())


def load_modality_table(path: str, expected_rows: int | None = None) -> ModalityTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not an FMR1 file")
    if len(blob) < 4 + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, rows, dim = _HEADER.unpack_from(blob, 4)
    if version != 1:
        raise ValidationError(f"{path}: unsupported FMR1 version {version}")
    body = blob[4 + _HEADER.size:]
    need = rows * dim * 4 + rows
    if len(body) < need:
        raise TruncatedPayloadError(f"{path}: payload truncated ({len(body)} of {need} bytes)")
    if len(body) > need:
        raise ValidationError(f"{path}: {len(body) - need} trailing bytes after payload")
    if expected_rows is not None and rows != expected_rows:
        raise RowCountMismatchError(f"{path}: {rows} rows, expected {expected_rows}")
    raw = np.frombuffer(body, dtype="<f4", count=rows * dim).reshape(rows, dim)
    mask_bytes = np.frombuffer(body, dtype=np.uint8, offset=rows * dim * 4)
    if mask_bytes.size and mask_bytes.max() > 1:
        raise ValidationError(f"{path}: mask bytes must be 0 or 1")
    table = ModalityTable(
        n_items=rows,
        raw_dim=dim,
        data=raw.astype(np.float64),
        missing=mask_bytes.astype(bool).copy(),
    )
    table.validate()
    return table


def write_sidecar(path: str, ids: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, ext_id in enumerate(ids):
            fh.write(f"{row}\t{ext_id}\n")


def load_sidecar(path: str) -> list[str]:
    ids = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLineError(path, line_no, "expected row_index<TAB>item_id")
            try:
                row = int(parts[0])
            except ValueError:
                raise MalformedLineError(path, line_no, f"bad row index {parts[0]!r}") from None
            if row != len(ids):
                raise MalformedLineError(path, line_no, f"row index {row} out of order")
            ids.append(parts[1])
    return ids


def align_table_to_items(table: ModalityTable, sidecar_ids: list[str],
                         item_index: Index) -> ModalityTable:
    """Reorder/select table rows so row i describes item_index's item i."""
    if table.n_items != len(sidecar_ids):
        raise RowCountMismatchError(
            f"table has {table.n_items} rows but sidecar lists {len(sidecar_ids)}"
        )
    pos = {ext: row for row, ext in enumerate(sidecar_ids)}
    sel = np.empty(len(item_index), dtype=np.int64)
    for idx in range(len(item_index)):
        ext = item_index.id_of(idx)
        if ext not in pos:
            raise ValidationError(f"item {ext!r} missing from modality sidecar")
        sel[idx] = pos[ext]
    out = ModalityTable(
        n_items=len(item_index),
        raw_dim=table.raw_dim,
        data=table.data[sel].copy(),
        missing=table.missing[sel].copy(),
    )
    out.validate()
    return out


def fill_missing(table: ModalityTable, mode: str,
                 fill_vector: np.ndarray | None = None) -> ModalityTable:
    """Replace masked rows: column means ("mean") or a given vector ("designated")."""
    data = table.data.copy()
    if table.missing.any():
        if mode == "mean":
            present = data[~table.missing]
            if present.shape[0] == 0:
                raise ValidationError("cannot mean-fill: every row is missing")
            data[table.missing] = present.mean(axis=0)
        elif mode == "designated":
            if fill_vector is None:
                raise ValidationError("designated fill requires a fill vector")
            vec = np.asarray(fill_vector, dtype=np.float64).reshape(-1)
            if vec.shape != (table.raw_dim,):
                raise ValidationError(
                    f"fill vector has dim {vec.shape[0]}, table has {table.raw_dim}"
                )
            data[table.missing] = vec
        else:
            raise ValidationError(f"unknown fill mode {mode!r}")
    elif mode not in ("mean", "designated"):
        raise ValidationError(f"unknown fill mode {mode!r}")
    out = ModalityTable(
        n_items=table.n_items,
        raw_dim=table.raw_dim,
        data=data,
        missing=np.zeros(table.n_items, dtype=bool),
    )
    out.validate()
    return out


# -- synthetic generator -----------------------------------------------------------


def synth_dataset(n_users: int, n_items: int, raw_dim: int, seed: int,
                  signal_mix: float, latent_dim: int = 8,
                  target_degree: int = 18,
                  feature_noise: float = 0.05) -> SynthDataset:
    """Generate a dataset with a planted, tunable multimodal signal.

    User/item latents drive interaction probabilities; modality features are
    noisy linear views of the item latents. signal_mix is the fraction of
    preference signal living in those latents; the remainder comes from an
    independent residual factor invisible to the modality features. Every
    user ends up with at least 5 interactions.
    """
    if not 0.0 <= signal_mix <= 1.0:
        raise ValidationError(f"signal_mix must be in [0, 1], got {signal_mix}")
    if n_users < 1 or n_items < 16:
        raise ValidationError("need n_users >= 1 and n_items >= 16")
    if n_users * n_items > 10_000_000:
        raise ValidationError("synthetic instance exceeds desk scale")

    k = latent_dim
    scale = 1.0 / np.sqrt(k)
    z_user = stream(seed, "synth", "user-latent").normals(n_users * k).reshape(n_users, k)
    z_item = stream(seed, "synth", "item-latent").normals(n_items * k).reshape(n_items, k)
    r_user = stream(seed, "synth", "user-residual").normals(n_users * k).reshape(n_users, k)
    r_item = stream(seed, "synth", "item-residual").normals(n_items * k).reshape(n_items, k)

    score = signal_mix * (z_user @ z_item.T) * scale \
        + (1.0 - signal_mix) * (r_user @ r_item.T) * scale
    density = min(max(target_degree, 8) / n_items, 0.5)
    threshold = np.quantile(score, 1.0 - density)
    spread = score.std()
    if spread <= 0.0:
        spread = 1.0
    prob = 1.0 / (1.0 + np.exp(-4.0 * (score - threshold) / spread))

    rows = []
    for u in range(n_users):
        draws = stream(seed, "synth", "draws", u).uniforms(n_items)
        chosen = draws < prob[u]
        if chosen.sum() < 5:
            order = np.argsort(-prob[u], kind="stable")
            for idx in order:
                if not chosen[idx]:
                    chosen[idx] = True
                    if chosen.sum() >= 5:
                        break
        rows.append(np.flatnonzero(chosen).astype(np.int64))
    interactions = InteractionMatrix(n_users=n_users, n_items=n_items, items=rows)
    interactions.validate()

    proj_v = stream(seed, "synth", "proj-visual").normals(k * raw_dim).reshape(k, raw_dim)
    proj_c = stream(seed, "synth", "proj-text").normals(k * raw_dim).reshape(k, raw_dim)
    noise_v = stream(seed, "synth", "noise-visual").normals(n_items * raw_dim).reshape(n_items, raw_dim)
    noise_c = stream(seed, "synth", "noise-text").normals(n_items * raw_dim).reshape(n_items, raw_dim)
    visual_raw = (z_item @ proj_v) * scale + feature_noise * noise_v
    text_raw = (z_item @ proj_c) * scale + feature_noise * noise_c

    def as_table(arr: np.ndarray) -> ModalityTable:
        # round through file precision so in-memory runs match file-based runs
        narrowed = arr.astype(np.float32).astype(np.float64)
        return ModalityTable(
            n_items=n_items,
            raw_dim=raw_dim,
            data=narrowed,
            missing=np.zeros(n_items, dtype=bool),
        )

    return SynthDataset(
        interactions=interactions,
        visual=as_table(visual_raw),
        text=as_table(text_raw),
        truth=prob,
    )
