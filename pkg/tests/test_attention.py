import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from dpnet import counting, ops
from dpnet.attention import (AttentionConfig, LscmWeights, lccm_bu_forward, lccm_td_forward, lscm_forward,
                             lscm_macs)
from dpnet.gradcheck import finite_diff_check
from dpnet.tensor import ShapeError, Tensor
from dpnet.weights import init_store

NAMES = ("sp_k", "sp_q", "sp_o", "ch_k", "ch_q", "ch_o", "ln_sp_gamma", "ln_sp_beta", "ln_ch_gamma", "ln_ch_beta")

TINY_F = np.array([[[0.1, 0.5], [-0.3, 0.9]], [[0.4, -0.2], [0.7, 0.05]]])

# fixed weights for the cross-scale tiny cases (C=2, k=1, r=1)
CROSS_W = {
    "sp_k": np.array([[0.1, -0.2], [0.3, 0.05]]),
    "sp_q": np.array([[0.2, 0.1], [-0.1, 0.4]]),
    "sp_o": np.array([[0.7]]),
    "ch_k": np.array([[0.3, -0.1], [0.2, 0.25]]),
    "ch_q": np.array([[-0.15, 0.35], [0.05, 0.2]]),
    "ch_o": np.array([[0.6], [-0.4]]),
    "ln_sp_gamma": np.array([1.2]), "ln_sp_beta": np.array([0.1]),
    "ln_ch_gamma": np.array([0.8]), "ln_ch_beta": np.array([-0.2]),
}
F_HIGH = ((np.arange(32).reshape(2, 4, 4) * 5) % 11 - 5) / 4.0
F_LOW = ((np.arange(8).reshape(2, 2, 2) * 3) % 7 - 3) / 3.0

# frozen from tests/oracles.py (loop-level f64 evaluation)
LSCM_TINY_OUT = [[[0.09968243646851141, 0.48994910671747066], [-0.29650738556022366, 0.9313881593210788]],
                 [[0.39872974587404564, -0.19597964268698828], [0.6918505663071886, 0.051743786628948824]]]
LSCM_TINY_SP = [0.496824364685114, 0.4798982134349413, 0.4883579518674122, 0.5348757325789764]
TD_TINY_OUT = [
    [[-2.047145987290167, 0.0, 2.8778783309309834, -0.4571485991413574],
     [2.2717447892112674, -0.887013276698981, 1.6770005320644745, -1.2926714657251703],
     [1.0019558038247347, -1.6779911686073077, 0.48626966555865236, -2.047145987290167],
     [0.0, 2.8778783309309834, -0.4571485991413574, 2.2717447892112674]],
    [[-0.8292380713308444, 1.4301440576171158, -1.7422965131807564, 0.9246768746974925],
     [-2.2925041420408228, 0.44869647655687933, -2.820950077811068, 0.0],
     [2.530838700598781, -0.4246876303592157, 1.9658380150641646, -0.8292380713308444],
     [1.4301440576171158, -1.7422965131807564, 0.9246768746974925, -2.2925041420408228]]]
BU_TINY_OUT = [[[-1.7860374445405964, 0.0], [2.0167389467986014, -0.6201308578118994]],
               [[1.2045311982467677, -1.467028673188271], [0.6791660998760521, -1.8811519262652536]]]


def weights_from(arrays, requires_grad=False):
    return LscmWeights(**{n: Tensor(np.asarray(arrays[n], dtype=np.float64), requires_grad=requires_grad)
                          for n in NAMES})


def random_weights(cfg, seed):
    rng = np.random.default_rng(seed)
    store = init_store(LscmWeights.slots("a", cfg), seed=seed, dtype=np.float64)
    arrays = {n: store[f"a.{n}"].data.copy() for n in NAMES}
    arrays["sp_o"] = rng.normal(size=arrays["sp_o"].shape)
    arrays["ch_o"] = rng.normal(size=arrays["ch_o"].shape)
    for n in ("ln_sp_gamma", "ln_ch_gamma"):
        arrays[n] = rng.uniform(0.5, 1.5, size=1)
    for n in ("ln_sp_beta", "ln_ch_beta"):
        arrays[n] = rng.uniform(-0.5, 0.5, size=1)
    return arrays


def neutral_weights(cfg, seed):
    arrays = random_weights(cfg, seed)
    arrays["sp_o"][:] = 0.0
    arrays["ch_o"][:] = 0.0
    arrays["ln_sp_beta"][:] = 0.0
    arrays["ln_ch_beta"][:] = 0.0
    return arrays


# -- tiny fixed-weight cases ------------------------------------------------------------


def test_lscm_tiny_case_frozen():
    cfg = AttentionConfig(channels=2, k=1, r=1)
    arrays = {n: np.full(s, 0.1) for n, s in
              (("sp_k", (2, 2)), ("sp_q", (2, 2)), ("sp_o", (1, 1)), ("ch_k", (2, 2)), ("ch_q", (2, 2)),
               ("ch_o", (2, 1)))}
    arrays.update(ln_sp_gamma=[1.0], ln_sp_beta=[0.0], ln_ch_gamma=[1.0], ln_ch_beta=[0.0])
    out, s_sp, s_ch = lscm_forward(Tensor(TINY_F), cfg, weights_from(arrays), return_gates=True)
    np.testing.assert_allclose(out.data, LSCM_TINY_OUT, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s_sp.data.ravel(), LSCM_TINY_SP, rtol=0, atol=1e-10)
    # channel logits are equal, so LN sends both to 0
    np.testing.assert_allclose(s_ch.data.ravel(), [0.5, 0.5], rtol=0, atol=1e-10)


def test_lccm_td_tiny_case_frozen():
    cfg = AttentionConfig(channels=2, k=1, r=1)
    out = lccm_td_forward(Tensor(F_HIGH), Tensor(F_LOW), cfg, weights_from(CROSS_W))
    np.testing.assert_allclose(out.data, TD_TINY_OUT, rtol=0, atol=1e-10)


def test_lccm_bu_tiny_case_frozen():
    cfg = AttentionConfig(channels=2, k=1, r=1)
    out = lccm_bu_forward(Tensor(F_LOW), Tensor(F_HIGH), cfg, weights_from(CROSS_W))
    np.testing.assert_allclose(out.data, BU_TINY_OUT, rtol=0, atol=1e-10)


@pytest.mark.parametrize("c,h,k,r,seed", [(4, 4, 2, 2, 0), (8, 6, 3, 4, 1), (6, 5, 2, 3, 2), (8, 4, 1, 8, 3)])
def test_attention_matches_loop_oracle_on_random_instances(c, h, k, r, seed):
    cfg = AttentionConfig(channels=c, k=k, r=r)
    arrays = random_weights(cfg, seed)
    w = weights_from(arrays)
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(c, h, h))
    got, sp, ch = lscm_forward(Tensor(f), cfg, w, return_gates=True)
    want, osp, och = oracles.lscm(f, k, arrays)
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)
    np.testing.assert_allclose(sp.data.ravel(), osp, rtol=0, atol=1e-10)
    np.testing.assert_allclose(ch.data.ravel(), och, rtol=0, atol=1e-10)

    fh = rng.normal(size=(c, 2 * h, 2 * h))
    np.testing.assert_allclose(lccm_td_forward(Tensor(fh), Tensor(f), cfg, w).data,
                               oracles.lccm_td(fh, f, k, arrays)[0], rtol=0, atol=1e-10)
    np.testing.assert_allclose(lccm_bu_forward(Tensor(f), Tensor(fh), cfg, w).data,
                               oracles.lccm_bu(f, fh, k, arrays)[0], rtol=0, atol=1e-10)


def test_f32_forward_tracks_f64_oracle():
    cfg = AttentionConfig(channels=8, k=2, r=2)
    arrays = random_weights(cfg, 7)
    f = np.random.default_rng(7).uniform(-10, 10, size=(8, 4, 4))
    w32 = LscmWeights(**{n: Tensor(np.asarray(arrays[n], np.float32)) for n in NAMES})
    got = lscm_forward(Tensor(f.astype(np.float32)), cfg, w32)
    want = oracles.lscm(f.astype(np.float32).astype(float), 2,
                        {n: np.asarray(arrays[n], np.float32).astype(float) for n in NAMES})[0]
    assert got.dtype == np.float32
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-4 * max(1.0, np.abs(want).max()))


# -- neutral gates ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_neutral_gates_are_identities(seed):
    cfg = AttentionConfig(channels=16, k=3, r=4)
    w = weights_from(neutral_weights(cfg, seed))
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(16, 6, 6))
    fh = rng.normal(size=(16, 12, 12))
    out, sp, ch = lscm_forward(Tensor(f), cfg, w, return_gates=True)
    assert np.all(sp.data == 0.5) and np.all(ch.data == 0.5)
    np.testing.assert_allclose(out.data, f, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lccm_td_forward(Tensor(fh), Tensor(f), cfg, w).data, 2 * fh, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lccm_bu_forward(Tensor(f), Tensor(fh), cfg, w).data, 2 * f, rtol=0, atol=1e-12)


def test_default_initialisation_is_neutral():
    cfg = AttentionConfig(channels=8, k=2, r=2)
    store = init_store(LscmWeights.slots("x", cfg), seed=3, dtype=np.float64)
    f = np.random.default_rng(3).normal(size=(8, 4, 4))
    np.testing.assert_allclose(lscm_forward(Tensor(f), cfg, LscmWeights.from_store(store, "x")).data, f,
                               rtol=0, atol=1e-12)


# -- shapes and config -----------------------------------------------------------------


def test_deployment_shapes():
    cfg = AttentionConfig(channels=128, k=5, r=8)
    w = LscmWeights.from_store(init_store(LscmWeights.slots("a", cfg), seed=0), "a")
    f = Tensor(np.random.default_rng(0).normal(size=(128, 40, 40)).astype(np.float32))
    out, sp, ch = lscm_forward(f, cfg, w, return_gates=True)
    assert out.shape == (128, 40, 40) and sp.data.size == 1600 and ch.data.size == 128
    low = Tensor(np.zeros((128, 20, 20), np.float32))
    assert lccm_td_forward(f, low, cfg, w).shape == (128, 40, 40)
    assert lccm_bu_forward(low, f, cfg, w).shape == (128, 20, 20)


def test_config_rejections():
    with pytest.raises(ValueError, match="r=7"):
        AttentionConfig(channels=64, k=5, r=7)
    with pytest.raises(ValueError):
        AttentionConfig(channels=64, k=0)
    cfg = AttentionConfig(channels=2, k=2, r=1)
    w = weights_from(random_weights(cfg, 0))
    with pytest.raises(ShapeError, match="k=2"):
        lscm_forward(Tensor(TINY_F), cfg, w)


def test_cross_scale_shape_errors():
    cfg = AttentionConfig(channels=2, k=1, r=1)
    w = weights_from(CROSS_W)
    with pytest.raises(ShapeError, match="twice"):
        lccm_td_forward(Tensor(np.zeros((2, 6, 6))), Tensor(np.zeros((2, 2, 2))), cfg, w)
    with pytest.raises(ShapeError, match="channel"):
        lccm_bu_forward(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((4, 4, 4))), cfg, w)


def test_weight_shape_check():
    cfg = AttentionConfig(channels=4, k=2, r=2)
    arrays = random_weights(cfg, 0)
    arrays["ch_q"] = np.zeros((4, 4))
    with pytest.raises(ShapeError, match="ch_q"):
        weights_from(arrays).check(cfg)


# -- properties ------------------------------------------------------------------------


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 2, 4]), st.integers(3, 5))
def test_gates_lie_strictly_inside_unit_interval(seed, r, h):
    cfg = AttentionConfig(channels=4, k=2, r=r)
    rng = np.random.default_rng(seed)
    w = weights_from(random_weights(cfg, seed % 1000))
    f, fh = rng.normal(size=(4, h, h)), rng.normal(size=(4, 2 * h, 2 * h))
    for _, sp, ch in (lscm_forward(Tensor(f), cfg, w, True), lccm_td_forward(Tensor(fh), Tensor(f), cfg, w, True),
                      lccm_bu_forward(Tensor(f), Tensor(fh), cfg, w, True)):
        for g in (sp.data, ch.data):
            assert np.all(g > 0) and np.all(g < 1)


@given(st.integers(0, 2 ** 31 - 1))
def test_spatial_gate_is_permutation_equivariant_with_k1(seed):
    cfg = AttentionConfig(channels=4, k=1, r=2)
    rng = np.random.default_rng(seed)
    w = weights_from(random_weights(cfg, seed % 1000))
    f = rng.normal(size=(4, 3, 3))
    perm = rng.permutation(9)
    fp = f.reshape(4, 9)[:, perm].reshape(4, 3, 3)
    _, sp, _ = lscm_forward(Tensor(f), cfg, w, True)
    _, spp, _ = lscm_forward(Tensor(fp), cfg, w, True)
    np.testing.assert_allclose(spp.data.ravel(), sp.data.ravel()[perm], rtol=0, atol=1e-12)


def _measured(n_side, cfg):
    w = LscmWeights.from_store(init_store(LscmWeights.slots("a", cfg), seed=0, dtype=np.float64), "a")
    with counting.counting() as ctr:
        lscm_forward(Tensor(np.zeros((cfg.channels, n_side, n_side))), cfg, w)
    return ctr.total


@given(st.sampled_from([(8, 1, 1), (8, 2, 2), (16, 3, 4), (16, 2, 8), (32, 1, 4)]), st.integers(0, 3))
def test_lscm_mac_bound_and_linear_growth(ckr, extra):
    c, k, r = ckr
    cfg = AttentionConfig(channels=c, k=k, r=r)
    # below this n the n-independent channel terms exceed the per-position slack of the bound
    side = int(np.ceil(np.sqrt(k * k * (r + 2) + 1))) + extra
    n = side * side
    macs = _measured(side, cfg)
    assert macs == lscm_macs(n, cfg)
    assert macs <= c * n * (2 + k * k / r) + k * k * c * c / r + c * c * n / r * 2
    # growth in n is an exact affine function: equal increments for equal steps
    m2, m3 = lscm_macs(2 * n, cfg), lscm_macs(3 * n, cfg)
    assert m3 - m2 == m2 - macs > 0


def test_runtime_counter_equals_closed_form_at_deployment_size():
    cfg = AttentionConfig(channels=128, k=5, r=8)
    assert _measured(40, cfg) == lscm_macs(1600, cfg)


# -- gradients -------------------------------------------------------------------------


def test_lscm_gradients_finite_differences():
    cfg = AttentionConfig(channels=8, k=2, r=2)
    arrays = random_weights(cfg, 11)
    w = weights_from(arrays, requires_grad=True)
    x = Tensor(np.random.default_rng(11).normal(size=(8, 6, 6)), requires_grad=True)
    probe = Tensor(np.random.default_rng(12).normal(size=(8, 6, 6)))
    params = {n: getattr(w, n) for n in NAMES}
    params["input"] = x
    report = finite_diff_check(lambda: ops.sum(ops.mul(lscm_forward(x, cfg, w), probe)), params, tolerance=1e-5)
    assert report.passed, report.max_rel_error
    assert set(report.max_rel_error) == set(params)


@pytest.mark.parametrize("direction", ["td", "bu"])
def test_lccm_gradients_finite_differences(direction):
    cfg = AttentionConfig(channels=4, k=2, r=2)
    w = weights_from(random_weights(cfg, 5), requires_grad=True)
    rng = np.random.default_rng(5)
    fh = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    fl = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    if direction == "td":
        fn, probe = (lambda: lccm_td_forward(fh, fl, cfg, w)), Tensor(rng.normal(size=(4, 8, 8)))
    else:
        fn, probe = (lambda: lccm_bu_forward(fl, fh, cfg, w)), Tensor(rng.normal(size=(4, 4, 4)))
    params = {n: getattr(w, n) for n in NAMES}
    params.update(high=fh, low=fl)
    report = finite_diff_check(lambda: ops.sum(ops.mul(fn(), probe)), params, tolerance=1e-5)
    assert report.passed, report.max_rel_error
