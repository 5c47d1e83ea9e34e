import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmr.errors import ValidationError
from fedmr.fusion import (
    FeatureMaps,
    FrozenRouter,
    FusionBundle,
    Router,
    fuse,
    make_strategy,
    mix,
    mix_np,
    route,
)
from fedmr.kernel import Param, Tape, finite_diff_check
from fedmr.rng import stream


def rand(seed, *shape):
    g = stream(seed, "test", "fusion", *shape)
    return g.normals(int(np.prod(shape))).reshape(shape)


def test_map_identity():
    maps = FeatureMaps(3, 3, 3, seed=0)
    maps.v_weight.value[...] = np.eye(3)
    maps.v_bias.value[...] = 0.0
    x = rand(1, 4, 3)
    v, _ = maps.forward_np(x, np.zeros((4, 3)))
    assert np.array_equal(v, x)


def test_map_zero():
    maps = FeatureMaps(5, 5, 3, seed=0)
    maps.c_weight.value[...] = 0.0
    _, c = maps.forward_np(np.zeros((2, 5)), rand(2, 2, 5))
    assert np.array_equal(c, np.zeros((2, 3)))


def test_map_gradients_pass_fd():
    maps = FeatureMaps(4, 4, 3, seed=2)
    v_raw, c_raw = rand(3, 5, 4), rand(4, 5, 4)
    params = list(maps.named_params().values())

    def build():
        tape = Tape()
        v, c = maps.build(tape, tape.constant(v_raw), tape.constant(c_raw))
        s = tape.add(v, c)
        return tape, tape.sum_all(tape.mul(s, s))

    assert finite_diff_check(build, params, eps=1e-6) < 1e-5


def test_fuse_sum_reduces_to_id():
    strat = make_strategy("sum", 4, seed=0)
    d = rand(5, 6, 4)
    out = strat.forward_np(np.zeros((6, 4)), np.zeros((6, 4)), d)
    assert np.array_equal(out, d)


def test_fuse_gate_half_when_zeroed():
    strat = make_strategy("gate", 4, seed=0)
    strat.weight.value[...] = 0.0
    strat.bias.value[...] = 0.0
    v, c, d = rand(6, 3, 4), rand(7, 3, 4), rand(8, 3, 4)
    out = strat.forward_np(v, c, d)
    assert np.allclose(out, 0.5 * (v + c + d), atol=1e-15)


def test_fuse_mlp_zero_weights_gives_zero():
    strat = make_strategy("mlp", 4, seed=0)
    for p in strat.named_params().values():
        p.value[...] = 0.0
    out = strat.forward_np(rand(9, 3, 4), rand(10, 3, 4), rand(11, 3, 4))
    assert np.array_equal(out, np.zeros((3, 4)))


def test_unknown_strategy():
    with pytest.raises(ValidationError):
        make_strategy("attention", 4, seed=0)


def test_route_zero_init_is_uniform():
    router = Router(3, 4)
    fs = [rand(20 + j, 6, 4) for j in range(3)]
    w = router.forward_np(fs, np.array([0, 2, 4]))
    assert np.allclose(w, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_route_saturates_one_hot():
    router = Router(3, 4)
    router.bias.value[...] = [50.0, 0.0, 0.0]
    fs = [rand(30 + j, 6, 4) for j in range(3)]
    w = router.forward_np(fs, np.array([1, 3]))[0]
    assert abs(w[0] - 1.0) < 1e-6
    assert w[1] < 1e-6 and w[2] < 1e-6


def test_route_pool_order_irrelevant():
    router = Router(2, 3)
    router.weight.value[...] = rand(40, 6, 2)
    router.bias.value[...] = rand(41, 2)
    fs = [rand(42 + j, 8, 3) for j in range(2)]
    w1 = router.forward_np(fs, np.array([1, 4, 6]))
    w2 = router.forward_np(fs, np.array([6, 1, 4]))
    assert np.abs(w1 - w2).max() < 1e-12


def test_route_empty_history_rejected():
    router = Router(2, 3)
    with pytest.raises(ValidationError):
        router.forward_np([rand(50, 4, 3), rand(51, 4, 3)], np.array([], dtype=np.int64))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9))
def test_route_simplex_property(seed):
    g = stream(seed, "test", "simplex")
    router = Router(3, 4)
    router.weight.value[...] = g.normals(36).reshape(12, 3) * 3.0
    router.bias.value[...] = g.normals(3)
    fs = [g.normals(24).reshape(6, 4) * 5.0 for _ in range(3)]
    rows = np.array(sorted(g.sample(6, 1 + g.randbelow(5))))
    w = router.forward_np(fs, rows)[0]
    assert (w >= 0.0).all()
    assert abs(w.sum() - 1.0) < 1e-12


def test_mix_one_hot_exact():
    fs = [rand(60 + j, 5, 3) for j in range(3)]
    out = mix_np(fs, np.array([0.0, 1.0, 0.0]))
    assert np.array_equal(out, fs[1])


def test_mix_identical_inputs_convex():
    f = rand(70, 5, 3)
    out = mix_np([f, f, f], np.array([0.2, 0.5, 0.3]))
    assert np.allclose(out, f, atol=1e-12)


def test_mix_matches_elementwise_loop():
    fs = [rand(80 + j, 4, 3) for j in range(3)]
    w = np.array([0.1, 0.6, 0.3])
    naive = np.zeros((4, 3))
    for j in range(3):
        for r in range(4):
            for c in range(3):
                naive[r, c] += w[j] * fs[j][r, c]
    assert np.allclose(mix_np(fs, w), naive, atol=1e-14)


def test_mix_linear_in_each_slot():
    fs = [rand(90 + j, 4, 3) for j in range(3)]
    w = np.array([0.25, 0.5, 0.25])
    delta = rand(94, 4, 3)
    bumped = [fs[0], fs[1] + delta, fs[2]]
    diff = mix_np(bumped, w) - mix_np(fs, w)
    assert np.allclose(diff, w[1] * delta, atol=1e-12)


def test_mix_row_permutation_equivariant():
    fs = [rand(95 + j, 6, 3) for j in range(3)]
    w = np.array([0.3, 0.3, 0.4])
    perm = np.array([5, 0, 3, 1, 4, 2])
    assert np.array_equal(mix_np([f[perm] for f in fs], w), mix_np(fs, w)[perm])


def test_mix_length_mismatch():
    with pytest.raises(Exception):
        mix_np([np.zeros((2, 2))], np.array([0.5, 0.5]))


def test_ablation_all_dropped_forces_zero():
    bundle = FusionBundle(d=4, raw_dim_v=6, raw_dim_c=6,
                          strategy_names=("sum", "mlp", "gate"), seed=3)
    v_raw, c_raw = rand(100, 5, 6), rand(101, 5, 6)
    d_values = rand(102, 5, 4)
    fs = bundle.item_features_np(v_raw, c_raw, d_values,
                                 drop_v=True, drop_c=True, drop_d=True)
    for f in fs:
        assert np.array_equal(f, np.zeros((5, 4)))


def test_end_to_end_fd_through_route_fuse_map():
    bundle = FusionBundle(d=3, raw_dim_v=4, raw_dim_c=4,
                          strategy_names=("sum", "mlp", "gate"), seed=7)
    router = Router(3, 3)
    router.weight.value[...] = rand(110, 9, 3) * 0.3
    router.bias.value[...] = rand(111, 3) * 0.1
    v_raw, c_raw = rand(112, 6, 4), rand(113, 6, 4)
    d_param = Param("id_embedding", rand(114, 6, 3))
    pool_rows = np.array([0, 2, 5])
    params = (list(bundle.named_params().values())
              + list(router.named_params().values()) + [d_param])

    def build():
        tape = Tape()
        d_node = tape.param(d_param)
        fs = bundle.build_item_features(
            tape, tape.constant(v_raw), tape.constant(c_raw), d_node)
        w = route(tape, fs, pool_rows, router)
        mixed = mix(tape, fs, w)
        return tape, tape.sum_all(tape.mul(mixed, mixed))

    assert finite_diff_check(build, params, eps=1e-6) < 1e-5


def test_tape_and_np_forwards_bitwise_equal():
    bundle = FusionBundle(d=5, raw_dim_v=7, raw_dim_c=6,
                          strategy_names=("sum", "mlp", "gate"), seed=9)
    router = Router(3, 5)
    router.weight.value[...] = rand(120, 15, 3)
    router.bias.value[...] = rand(121, 3)
    v_raw, c_raw = rand(122, 8, 7), rand(123, 8, 6)
    d_values = rand(124, 8, 5)
    pool_rows = np.array([1, 3, 4])

    tape = Tape()
    fs_nodes = bundle.build_item_features(
        tape, tape.constant(v_raw), tape.constant(c_raw), tape.constant(d_values))
    w_node = route(tape, fs_nodes, pool_rows, router)
    mixed_node = mix(tape, fs_nodes, w_node)

    fs_np = bundle.item_features_np(v_raw, c_raw, d_values)
    w_np = router.forward_np(fs_np, pool_rows)
    mixed_np = mix_np(fs_np, w_np[0])

    for node, arr in zip(fs_nodes, fs_np):
        assert np.array_equal(node.value, arr)
    assert np.array_equal(w_node.value, w_np)
    assert np.array_equal(mixed_node.value, mixed_np)


def test_bundle_clone_roundtrip():
    bundle = FusionBundle(d=3, raw_dim_v=4, raw_dim_c=4,
                          strategy_names=("sum", "gate"), seed=5)
    clone = bundle.clone()
    for name, p in bundle.named_params().items():
        assert np.array_equal(clone.named_params()[name].value, p.value)
    clone.named_params()["strategy.gate.weight"].value[...] = 0.0
    assert not np.array_equal(
        bundle.named_params()["strategy.gate.weight"].value,
        clone.named_params()["strategy.gate.weight"].value,
    )


def test_frozen_router_constant_and_validated():
    frozen = FrozenRouter([1.0, 0.0, 0.0])
    fs = [rand(130 + j, 4, 2) for j in range(3)]
    w = frozen.forward_np(fs, np.array([], dtype=np.int64))
    assert np.array_equal(w, [[1.0, 0.0, 0.0]])
    with pytest.raises(ValidationError):
        FrozenRouter([0.5, 0.2])
    with pytest.raises(ValidationError):
        FrozenRouter([-0.5, 1.5])


def test_bundle_rejects_bad_strategy_lists():
    with pytest.raises(ValidationError):
        FusionBundle(4, 4, 4, (), seed=0)
    with pytest.raises(ValidationError):
        FusionBundle(4, 4, 4, ("sum", "sum"), seed=0)
