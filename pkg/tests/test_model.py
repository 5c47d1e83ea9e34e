import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmr.errors import ValidationError
from fedmr.kernel import Tape, finite_diff_check
from fedmr.model import DotHead, MlpHead, make_head, predict_scores, recon_loss
from fedmr.rng import stream


def rand(seed, *shape):
    g = stream(seed, "test", "model", *shape)
    return g.normals(int(np.prod(shape))).reshape(shape)


def test_dot_basis_vector_selects_column():
    head = DotHead(4, seed=0, user=0)
    head.user_vec.value[...] = np.array([[1.0], [0.0], [0.0], [0.0]])
    items = rand(1, 6, 4)
    scores = head.forward_np(items)
    assert np.array_equal(scores, items[:, 0])


def test_dot_zero_item_scores_zero():
    head = DotHead(3, seed=1, user=2)
    items = rand(2, 4, 3)
    items[2] = 0.0
    assert head.forward_np(items)[2] == 0.0


def test_dot_positive_scaling_preserves_order():
    head = DotHead(5, seed=3, user=0)
    items = rand(3, 9, 5)
    s1 = head.forward_np(items)
    s2 = head.forward_np(items * 3.5)
    assert np.array_equal(np.argsort(-s1, kind="stable"),
                          np.argsort(-s2, kind="stable"))


def test_mlp_head_matches_hand_rolled():
    head = MlpHead(3, seed=4, user=7)
    items = rand(4, 3, 3)
    u = head.user_vec.value
    h = np.concatenate([np.repeat(u, 3, axis=0), items], axis=1)
    h = np.maximum(h @ head.w1.value + head.b1.value, 0.0)
    h = np.maximum(h @ head.w2.value + head.b2.value, 0.0)
    expected = (h @ head.w3.value + head.b3.value)[:, 0]
    assert np.allclose(head.forward_np(items), expected, atol=1e-15)


def test_heads_tape_matches_np_bitwise():
    items = rand(5, 7, 4)
    for backbone in ("dot", "mlp"):
        head = make_head(backbone, 4, seed=6, user=3)
        tape = Tape()
        node = head.build_scores(tape, tape.constant(items))
        assert np.array_equal(node.value, head.forward_np(items))


def test_predict_scores_subset():
    head = DotHead(3, seed=8, user=0)
    items = rand(6, 10, 3)
    full = predict_scores(head, items)
    sub = predict_scores(head, items, item_subset=np.array([2, 5, 9]))
    assert np.array_equal(sub, full[[2, 5, 9]])


def test_loss_zero_logits_is_ln2():
    tape = Tape()
    scores = tape.constant(np.zeros(8))
    loss = recon_loss(tape, scores, np.array([1, 0, 1, 0, 1, 0, 1, 0], float))
    assert abs(float(loss.value) - np.log(2.0)) < 1e-12


def test_loss_saturated_correct_is_tiny():
    tape = Tape()
    scores = tape.constant(np.array([40.0, -40.0]))
    loss = recon_loss(tape, scores, np.array([1.0, 0.0]))
    assert float(loss.value) < 1e-12


def test_loss_matches_naive_loop():
    g = stream(9, "test", "loss")
    z = g.normals(40) * 3.0
    y = (g.uniforms(40) < 0.4).astype(float)
    naive = 0.0
    for zi, yi in zip(z, y):
        p = 1.0 / (1.0 + np.exp(-zi))
        naive += -(yi * np.log(p) + (1 - yi) * np.log(1 - p))
    naive /= 40.0
    tape = Tape()
    loss = recon_loss(tape, tape.constant(z), y)
    assert abs(float(loss.value) - naive) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9))
def test_loss_batch_permutation_invariant(seed):
    g = stream(seed, "test", "perm")
    n = 5 + g.randbelow(20)
    z = g.normals(n) * 2.0
    y = (g.uniforms(n) < 0.5).astype(float)
    perm = np.arange(n)
    g.shuffle(perm)
    t1, t2 = Tape(), Tape()
    l1 = recon_loss(t1, t1.constant(z), y)
    l2 = recon_loss(t2, t2.constant(z[perm]), y[perm])
    assert abs(float(l1.value) - float(l2.value)) < 1e-12


def test_loss_rejects_bad_labels_and_empty():
    tape = Tape()
    with pytest.raises(ValidationError):
        recon_loss(tape, tape.constant(np.array([0.0])), np.array([0.5]))
    with pytest.raises(ValidationError):
        recon_loss(tape, tape.constant(np.zeros(0)), np.zeros(0))


def test_fd_through_dot_head():
    items = rand(10, 5, 4)
    y = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
    head = DotHead(4, seed=11, user=0)

    def build():
        tape = Tape()
        scores = head.build_scores(tape, tape.constant(items))
        return tape, recon_loss(tape, scores, y)

    assert finite_diff_check(build, list(head.named_params().values()), eps=1e-6) < 1e-6


def test_fd_through_mlp_head():
    items = rand(12, 5, 3)
    y = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    head = MlpHead(3, seed=13, user=1)

    def build():
        tape = Tape()
        scores = head.build_scores(tape, tape.constant(items))
        return tape, recon_loss(tape, scores, y)

    assert finite_diff_check(build, list(head.named_params().values()), eps=1e-6) < 1e-5


def test_unknown_backbone():
    with pytest.raises(ValidationError):
        make_head("transformer", 4, seed=0, user=0)


def test_head_init_depends_on_user_and_seed():
    a = DotHead(4, seed=0, user=0).user_vec.value
    b = DotHead(4, seed=0, user=1).user_vec.value
    c = DotHead(4, seed=1, user=0).user_vec.value
    a2 = DotHead(4, seed=0, user=0).user_vec.value
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(a, a2)
