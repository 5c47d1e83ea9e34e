import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmr.data import (
    Index,
    InteractionMatrix,
    ModalityTable,
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
from fedmr.errors import (
    BadMagicError,
    MalformedLineError,
    RowCountMismatchError,
    TruncatedPayloadError,
    ValidationError,
)
from fedmr.rng import stream


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def random_matrix(seed, max_users=8, max_items=20):
    g = stream(seed, "test", "matrix")
    n_users = 1 + g.randbelow(max_users)
    n_items = 5 + g.randbelow(max_items - 4)
    rows = []
    for _ in range(n_users):
        size = 1 + g.randbelow(n_items)
        rows.append(np.array(sorted(g.sample(n_items, size)), dtype=np.int64))
    return InteractionMatrix(n_users=n_users, n_items=n_items, items=rows)


# -- load_interactions ---------------------------------------------------------


def test_load_dedup(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\na\tx\n")
    matrix, users, items = load_interactions(path)
    assert matrix.n_users == 1
    assert matrix.n_items == 1
    assert matrix.n_interactions == 1


def test_load_disjoint_items(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\nb\ty\nc\tz\n")
    matrix, users, items = load_interactions(path)
    assert matrix.n_users == 3
    assert matrix.n_items == 3
    assert users.ids == ["a", "b", "c"]
    assert items.ids == ["x", "y", "z"]


def test_load_first_appearance_order(tmp_path):
    path = write(tmp_path, "r.tsv", "u2\ti9\nu1\ti9\nu2\ti1\n")
    matrix, users, items = load_interactions(path)
    assert users.index_of("u2") == 0 and users.index_of("u1") == 1
    assert items.index_of("i9") == 0 and items.index_of("i1") == 1
    assert np.array_equal(matrix.items[0], [0, 1])


def test_load_dedup_keeps_latest_timestamp(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\t5\na\ty\t9\na\tx\t7\na\tz\t1\n")
    matrix, _, items = load_interactions(path)
    row = matrix.items[0]
    ts = matrix.timestamps[0]
    assert ts[list(row).index(items.index_of("x"))] == 7


def test_load_malformed_line_numbered(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\nbroken\n")
    with pytest.raises(MalformedLineError) as exc:
        load_interactions(path)
    assert exc.value.line_no == 2


def test_load_inconsistent_columns(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\t1\nb\ty\n")
    with pytest.raises(MalformedLineError):
        load_interactions(path)


def test_load_bad_timestamp(tmp_path):
    path = write(tmp_path, "r.tsv", "a\tx\tnever\n")
    with pytest.raises(MalformedLineError):
        load_interactions(path)


def test_load_empty_file(tmp_path):
    path = write(tmp_path, "r.tsv", "")
    with pytest.raises(ValidationError):
        load_interactions(path)


def test_index_bijection():
    idx = Index(["a", "b"])
    assert idx.add("a") == 0
    assert idx.add("c") == 2
    assert idx.id_of(idx.index_of("b")) == "b"
    assert "c" in idx and "z" not in idx
    with pytest.raises(ValidationError):
        idx.index_of("z")


# -- filter --------------------------------------------------------------------


def naive_filter(matrix, k):
    """Repeated-pass reference: refilter from scratch until nothing changes."""
    keep = list(range(matrix.n_users))
    while True:
        new_keep = [u for u in keep if matrix.items[u].size >= k]
        if new_keep == keep:
            break
        keep = new_keep
    used = set()
    for u in keep:
        used.update(matrix.items[u].tolist())
    items_kept = sorted(used)
    remap = {old: new for new, old in enumerate(items_kept)}
    rows = [np.array([remap[i] for i in matrix.items[u]], dtype=np.int64) for u in keep]
    return keep, items_kept, rows


def test_filter_identity_when_all_pass():
    m = InteractionMatrix(2, 4, [np.array([0, 1, 2]), np.array([1, 2, 3])])
    res = filter_min_interactions(m, 3)
    assert res.matrix.n_users == 2 and res.matrix.n_items == 4
    assert all(np.array_equal(a, b) for a, b in zip(res.matrix.items, m.items))
    assert res.item_old_to_new == {0: 0, 1: 1, 2: 2, 3: 3}


def test_filter_removes_short_user_and_orphan_items():
    m = InteractionMatrix(2, 5, [np.array([0, 1, 2, 3, 4]), np.array([0, 1, 2, 3])])
    res = filter_min_interactions(m, 5)
    assert res.matrix.n_users == 1
    assert res.matrix.n_items == 5
    assert res.user_old_to_new == {0: 0}


def test_filter_reindexes_orphans():
    m = InteractionMatrix(2, 6, [np.array([0, 5]), np.array([1, 2, 3])])
    res = filter_min_interactions(m, 3)
    assert res.matrix.n_users == 1
    assert res.matrix.n_items == 3
    assert np.array_equal(res.matrix.items[0], [0, 1, 2])
    assert res.item_old_to_new == {1: 0, 2: 1, 3: 2}


def test_filter_exhausted():
    m = InteractionMatrix(1, 5, [np.array([0])])
    with pytest.raises(ValidationError):
        filter_min_interactions(m, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 6))
def test_filter_matches_naive_oracle(seed, k):
    m = random_matrix(seed)
    try:
        res = filter_min_interactions(m, k)
    except ValidationError:
        keep, _, _ = naive_filter(m, k)
        assert not keep
        return
    keep, items_kept, rows = naive_filter(m, k)
    assert res.matrix.n_users == len(keep)
    assert res.matrix.n_items == len(items_kept)
    for got, want in zip(res.matrix.items, rows):
        assert np.array_equal(got, want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 6))
def test_filter_idempotent(seed, k):
    m = random_matrix(seed)
    try:
        once = filter_min_interactions(m, k).matrix
    except ValidationError:
        return
    twice = filter_min_interactions(once, k).matrix
    assert twice.n_users == once.n_users and twice.n_items == once.n_items
    for a, b in zip(once.items, twice.items):
        assert np.array_equal(a, b)


# -- sparsity --------------------------------------------------------------------


def counts_matrix(n_users, n_items, n_interactions):
    base, extra = divmod(n_interactions, n_users)
    rows = []
    for u in range(n_users):
        size = base + (1 if u < extra else 0)
        row = sorted((u * 7 + j) % n_items for j in range(size))
        rows.append(np.array(row, dtype=np.int64))
    m = InteractionMatrix(n_users, n_items, rows)
    m.validate()
    assert m.n_interactions == n_interactions
    return m


def test_sparsity_published_dataset_values():
    # 204 users / 560 items / 3488 interactions -> 96.95%
    assert abs(sparsity(counts_matrix(204, 560, 3488)) - 0.9695) <= 1e-4
    # 10231 users / 1676 items / 80086 interactions -> 99.53%
    assert abs(sparsity(counts_matrix(10231, 1676, 80086)) - 0.9953) <= 1e-4


def test_sparsity_full_matrix():
    rows = [np.arange(3, dtype=np.int64), np.arange(3, dtype=np.int64)]
    assert sparsity(InteractionMatrix(2, 3, rows)) == 0.0


def test_sparsity_empty_rejected():
    with pytest.raises(ValidationError):
        sparsity(InteractionMatrix(0, 0, []))


# -- leave-one-out ------------------------------------------------------------------


def test_split_timestamp_ordering():
    m = InteractionMatrix(
        1, 4,
        [np.array([1, 2, 3])],
        timestamps=[np.array([10, 20, 30])],
    )
    split = leave_one_out_split(m, seed=0)
    assert split.test_item[0] == 3
    assert split.val_item[0] == 2
    assert np.array_equal(split.train.items[0], [1])


def test_split_deterministic_without_timestamps():
    m = random_matrix(4242)
    big = InteractionMatrix(
        m.n_users, m.n_items,
        [row if row.size >= 3 else np.arange(3, dtype=np.int64) for row in m.items],
    )
    a = leave_one_out_split(big, seed=9)
    b = leave_one_out_split(big, seed=9)
    assert np.array_equal(a.val_item, b.val_item)
    assert np.array_equal(a.test_item, b.test_item)
    c = leave_one_out_split(big, seed=10)
    different = (not np.array_equal(a.val_item, c.val_item)) or (
        not np.array_equal(a.test_item, c.test_item))
    assert different


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9))
def test_split_union_reconstructs(seed):
    m = random_matrix(seed)
    rows = [row if row.size >= 3 else np.arange(3, dtype=np.int64) for row in m.items]
    big = InteractionMatrix(m.n_users, m.n_items, rows)
    split = leave_one_out_split(big, seed=seed)
    for u in range(big.n_users):
        rebuilt = np.sort(np.concatenate([
            split.train.items[u],
            [split.val_item[u], split.test_item[u]],
        ]))
        assert np.array_equal(rebuilt, rows[u])
        assert split.val_item[u] != split.test_item[u]
        assert split.val_item[u] not in split.train.items[u]
        assert split.test_item[u] not in split.train.items[u]


def test_split_rejects_tiny_user():
    m = InteractionMatrix(1, 5, [np.array([0, 1])])
    with pytest.raises(ValidationError):
        leave_one_out_split(m, seed=0)


# -- negatives ---------------------------------------------------------------------


def small_split(n_items=12, train_items=(0, 1, 2, 3, 4, 5), val=6, test=7):
    train = InteractionMatrix(1, n_items, [np.array(train_items, dtype=np.int64)])
    return Split(
        train=train,
        val_item=np.array([val], dtype=np.int64),
        test_item=np.array([test], dtype=np.int64),
    )


def test_negatives_forced_set():
    split = small_split(n_items=10, train_items=(0, 1, 2, 3, 4, 5), val=6, test=7)
    ns = sample_negatives(split, ratio=2, seed=1)
    for row in ns.negatives[0]:
        assert sorted(row.tolist()) == [8, 9]


def test_negatives_never_interacted_exhaustive():
    split = small_split(n_items=30, train_items=tuple(range(10)), val=10, test=11)
    forbidden = set(range(12))
    for seed in range(25):
        ns = sample_negatives(split, ratio=4, seed=seed)
        picks = ns.negatives[0]
        assert picks.shape == (10, 4)
        for row in picks:
            assert len(set(row.tolist())) == 4
            assert not (set(row.tolist()) & forbidden)


def test_negatives_uniform_chi_square():
    split = small_split(n_items=40, train_items=tuple(range(8)), val=8, test=9)
    counts = np.zeros(40)
    draws = 0
    for seed in range(500):
        ns = sample_negatives(split, ratio=4, seed=seed)
        flat = ns.negatives[0].reshape(-1)
        counts += np.bincount(flat, minlength=40)
        draws += flat.size
    assert draws >= 10**4
    cells = counts[10:]
    expected = draws / 30.0
    chi2 = ((cells - expected) ** 2 / expected).sum()
    df = 29
    assert chi2 < df + 3.0 * np.sqrt(2 * df)
    assert counts[:10].sum() == 0


def test_negatives_precondition_error_names_user():
    split = small_split(n_items=10, train_items=tuple(range(7)), val=7, test=8)
    with pytest.raises(ValidationError) as exc:
        sample_negatives(split, ratio=2, seed=0)
    assert "user 0" in str(exc.value)


# -- FMR1 ---------------------------------------------------------------------------


def test_fmr1_roundtrip_bit_identical(tmp_path):
    g = stream(0, "test", "fmr1")
    data = g.normals(24).reshape(6, 4).astype(np.float32)
    missing = np.array([0, 1, 0, 0, 1, 0], dtype=bool)
    p1 = str(tmp_path / "a.fmr")
    p2 = str(tmp_path / "b.fmr")
    write_modality_table(p1, data, missing)
    table = load_modality_table(p1)
    assert table.n_items == 6 and table.raw_dim == 4
    assert np.array_equal(table.missing, missing)
    assert np.array_equal(table.data.astype(np.float32), data)
    write_modality_table(p2, table.data, table.missing)
    assert (tmp_path / "a.fmr").read_bytes() == (tmp_path / "b.fmr").read_bytes()


def test_fmr1_bad_magic(tmp_path):
    path = tmp_path / "bad.fmr"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(BadMagicError):
        load_modality_table(str(path))


def test_fmr1_truncated(tmp_path):
    path = str(tmp_path / "t.fmr")
    write_modality_table(path, np.ones((4, 3), dtype=np.float32), np.zeros(4, dtype=bool))
    blob = open(path, "rb").read()
    short = tmp_path / "short.fmr"
    short.write_bytes(blob[:-5])
    with pytest.raises(TruncatedPayloadError):
        load_modality_table(str(short))


def test_fmr1_trailing_bytes(tmp_path):
    path = str(tmp_path / "t.fmr")
    write_modality_table(path, np.ones((2, 2), dtype=np.float32), np.zeros(2, dtype=bool))
    long = tmp_path / "long.fmr"
    long.write_bytes(open(path, "rb").read() + b"xx")
    with pytest.raises(ValidationError):
        load_modality_table(str(long))


def test_fmr1_row_count_mismatch(tmp_path):
    path = str(tmp_path / "t.fmr")
    write_modality_table(path, np.ones((4, 2), dtype=np.float32), np.zeros(4, dtype=bool))
    with pytest.raises(RowCountMismatchError):
        load_modality_table(path, expected_rows=5)


def test_fmr1_mask_flags_missing(tmp_path):
    path = str(tmp_path / "t.fmr")
    write_modality_table(path, np.ones((3, 2)), np.array([0, 1, 0], dtype=bool))
    table = load_modality_table(path)
    assert table.missing.tolist() == [False, True, False]


def test_sidecar_roundtrip(tmp_path):
    path = str(tmp_path / "t.tsv")
    write_sidecar(path, ["a", "b", "c"])
    assert load_sidecar(path) == ["a", "b", "c"]


def test_align_table_reorders(tmp_path):
    table = ModalityTable(
        n_items=3, raw_dim=2,
        data=np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]),
        missing=np.array([False, True, False]),
    )
    idx = Index(["c", "a"])
    aligned = align_table_to_items(table, ["a", "b", "c"], idx)
    assert np.array_equal(aligned.data, [[3.0, 3.0], [1.0, 1.0]])
    assert aligned.missing.tolist() == [False, False]
    with pytest.raises(ValidationError):
        align_table_to_items(table, ["a", "b", "c"], Index(["zzz"]))
    with pytest.raises(RowCountMismatchError):
        align_table_to_items(table, ["a", "b"], idx)


# -- fill_missing ----------------------------------------------------------------------


def make_table(data, missing):
    arr = np.asarray(data, dtype=np.float64)
    return ModalityTable(arr.shape[0], arr.shape[1], arr, np.asarray(missing, dtype=bool))


def test_fill_mean_arithmetic():
    table = make_table([[1.0, 3.0], [3.0, 5.0], [0.0, 0.0]], [False, False, True])
    filled = fill_missing(table, "mean")
    assert np.array_equal(filled.data[2], [2.0, 4.0])
    assert not filled.missing.any()


def test_fill_identity_when_nothing_missing():
    table = make_table([[1.0, 2.0]], [False])
    filled = fill_missing(table, "mean")
    assert np.array_equal(filled.data, table.data)


def test_fill_designated_verbatim():
    table = make_table([[1.0, 2.0], [0.0, 0.0]], [False, True])
    vec = np.array([7.25, -3.5])
    filled = fill_missing(table, "designated", fill_vector=vec)
    assert np.array_equal(filled.data[1], vec)
    assert np.array_equal(filled.data[0], [1.0, 2.0])


def test_fill_all_missing_rejected():
    table = make_table([[0.0, 0.0]], [True])
    with pytest.raises(ValidationError):
        fill_missing(table, "mean")


def test_fill_bad_mode_and_bad_vector():
    table = make_table([[0.0, 0.0]], [True])
    with pytest.raises(ValidationError):
        fill_missing(table, "median")
    with pytest.raises(ValidationError):
        fill_missing(table, "designated", fill_vector=np.ones(3))


# -- synthetic generator -------------------------------------------------------------------


def test_synth_every_user_has_five():
    ds = synth_dataset(30, 60, 12, seed=5, signal_mix=0.5)
    assert all(row.size >= 5 for row in ds.interactions.items)
    assert ds.truth.shape == (30, 60)
    assert not ds.visual.missing.any()


def test_synth_bitwise_deterministic():
    a = synth_dataset(20, 40, 8, seed=3, signal_mix=0.7)
    b = synth_dataset(20, 40, 8, seed=3, signal_mix=0.7)
    assert np.array_equal(a.visual.data, b.visual.data)
    assert np.array_equal(a.text.data, b.text.data)
    assert np.array_equal(a.truth, b.truth)
    for x, y in zip(a.interactions.items, b.interactions.items):
        assert np.array_equal(x, y)


def test_synth_rejects_bad_mix():
    with pytest.raises(ValidationError):
        synth_dataset(10, 20, 4, seed=0, signal_mix=1.5)
    with pytest.raises(ValidationError):
        synth_dataset(10, 20, 4, seed=0, signal_mix=-0.1)


def content_auc(ds, perm=None):
    """AUC of a training-free content scorer: mean cosine similarity to the
    user's other items. A pure modality-signal oracle."""
    feats = np.concatenate([ds.visual.data, ds.text.data], axis=1)
    if perm is not None:
        feats = feats[perm]
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.maximum(norms, 1e-12)
    sim = unit @ unit.T
    aucs = []
    for u in range(ds.interactions.n_users):
        pos = ds.interactions.items[u]
        if pos.size < 2 or pos.size > ds.interactions.n_items - 2:
            continue
        mask = np.zeros(ds.interactions.n_items, dtype=bool)
        mask[pos] = True
        scores = sim[:, pos].sum(axis=1)
        scores[pos] -= sim[pos, pos]  # leave self out
        scores[pos] /= pos.size - 1
        scores[~mask] /= pos.size
        pos_scores = scores[mask]
        neg_scores = scores[~mask]
        wins = (pos_scores[:, None] > neg_scores[None, :]).sum()
        ties = (pos_scores[:, None] == neg_scores[None, :]).sum()
        aucs.append((wins + 0.5 * ties) / (pos_scores.size * neg_scores.size))
    return float(np.mean(aucs))


def test_synth_signal_mix_zero_permutation_invariant():
    ds = synth_dataset(60, 120, 16, seed=11, signal_mix=0.0)
    auc = content_auc(ds)
    g = stream(11, "test", "perm")
    perm = np.array(g.sample(120, 120))
    auc_shuffled = content_auc(ds, perm=perm)
    assert abs(auc - 0.5) < 0.05
    assert abs(auc - auc_shuffled) < 0.05


def test_synth_signal_mix_one_carries_signal():
    ds = synth_dataset(60, 120, 16, seed=11, signal_mix=1.0)
    auc = content_auc(ds)
    g = stream(12, "test", "perm")
    perm = np.array(g.sample(120, 120))
    auc_shuffled = content_auc(ds, perm=perm)
    assert auc > auc_shuffled + 0.05
    assert auc > 0.6
