import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfcrpo.errors import EmptyBatch
from rfcrpo.flow import fm_loss_arrays, interpolate
from rfcrpo.numkit import Rng
from rfcrpo.preference import (
    DpoConfig,
    PreferenceBatch,
    crpo_loss,
    dpo_fm_loss,
    dpo_objective,
    draw_preference_batch,
    loss_trajectory,
    pair_losses,
    preference_loss,
)
from rfcrpo.vectorfield import ModelConfig, clone_frozen, forward, init_params, zero_params

from conftest import rel_err

SEEDS = st.integers(0, 2**32)


def _setup(seed, n=4, dim=2, hidden=(6,)):
    rng = Rng(seed)
    cfg = ModelConfig(dim, 3, hidden_dims=hidden, embed_dim=2, time_features=2)
    theta = init_params(cfg, rng.child("theta"))
    ref = init_params(cfg, rng.child("ref"))
    batch = draw_preference_batch(rng.integers(3, size=n), rng.normal((n, dim)), rng.normal((n, dim)), rng.child("batch"))
    return theta, ref, batch


def test_stub_arithmetic():
    assert abs(dpo_objective(1.0, 2.0, 2.0, 2.0, 1.0) - (-math.log(1 / (1 + math.exp(-1))))) < 1e-15
    assert abs(dpo_objective(1.0, 2.0, 2.0, 2.0, 1.0) - 0.3133) < 1e-4
    assert abs(dpo_objective(2.0, 1.0, 2.0, 2.0, 1.0) - 1.3133) < 1e-4


@given(SEEDS, st.floats(0.01, 50), st.integers(1, 8))
def test_reference_point_is_ln2(seed, beta, n):
    theta, _, batch = _setup(seed, n)
    loss, _, diag = dpo_fm_loss(theta, clone_frozen(theta), batch, DpoConfig(beta))
    assert abs(loss - math.log(2)) <= 1e-12
    assert diag.bracket == 0.0
    closs, _, cdiag = crpo_loss(theta, clone_frozen(theta), batch, DpoConfig(beta))
    assert closs == loss + cdiag.win_loss


def test_reference_point_gradient_matches_halved_difference():
    theta, _, batch = _setup(3)
    _, grads, _ = dpo_fm_loss(theta, clone_frozen(theta), batch, DpoConfig(2.0))
    # at B = 0 the DPO gradient is beta/2 * d(mean(Lw - Ll)); beta = 2 here
    xw, vw = interpolate(batch.winners, batch.noise_w, batch.t)
    xl, vl = interpolate(batch.losers, batch.noise_l, batch.t)
    _, gw = fm_loss_arrays(theta, xw, vw, batch.t, batch.conditions)
    _, gl = fm_loss_arrays(theta, xl, vl, batch.t, batch.conditions)
    for k in grads:
        np.testing.assert_allclose(grads[k], gw[k] - gl[k], atol=1e-12)


def _fd_check(loss_fn, theta, rng):
    _, grads, _ = loss_fn(theta)
    for name in theta.names():
        arr = theta.arrays[name]
        for _ in range(2):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            old, h = arr[idx], 1e-5
            arr[idx] = old + h
            up = loss_fn(theta)[0]
            arr[idx] = old - h
            down = loss_fn(theta)[0]
            arr[idx] = old
            fd = (up - down) / (2 * h)
            if max(abs(fd), abs(grads[name][idx])) > 1e-7:
                assert rel_err(fd, grads[name][idx]) < 1e-4, name


@given(SEEDS, st.sampled_from(["dpo_fm", "crpo"]), st.floats(0.1, 3.0))
def test_gradients_match_finite_differences(seed, kind, beta):
    theta, ref, batch = _setup(seed)
    _fd_check(lambda p: preference_loss(p, ref, batch, DpoConfig(beta, kind)), theta, Rng(seed).child("fd"))


@given(SEEDS)
def test_crpo_is_dpo_plus_winner_fm(seed):
    theta, ref, batch = _setup(seed)
    d_loss, d_grads, _ = dpo_fm_loss(theta, ref, batch)
    c_loss, c_grads, diag = crpo_loss(theta, ref, batch)
    xw, vw = interpolate(batch.winners, batch.noise_w, batch.t)
    fm, fm_grads = fm_loss_arrays(theta, xw, vw, batch.t, batch.conditions)
    assert abs(c_loss - (d_loss + fm)) <= 1e-12 * c_loss
    assert c_loss >= d_loss
    assert abs(fm - diag.win_loss) <= 1e-14 * fm
    for k in c_grads:
        np.testing.assert_allclose(c_grads[k], d_grads[k] + fm_grads[k], atol=1e-12)


def test_crpo_equals_dpo_when_winner_fm_is_zero():
    # a network that outputs the winner target exactly: winners are noise-free points with x1 = x0
    params = zero_params(ModelConfig(2, 2, hidden_dims=(3,)))
    ref = clone_frozen(params)
    params.arrays["layer1.bias"][:] = [0.25, 0.0]
    w = np.zeros((2, 2))
    batch = PreferenceBatch(np.array([0, 1]), w, np.ones((2, 2)), w + [0.25, 0.0], np.zeros((2, 2)), np.array([0.3, 0.7]))
    d_loss, _, _ = dpo_fm_loss(params, ref, batch)
    c_loss, _, diag = crpo_loss(params, ref, batch)
    assert diag.win_loss == 0.0
    assert c_loss == d_loss


@given(SEEDS)
def test_loss_positive(seed):
    theta, ref, batch = _setup(seed)
    for kind in ("dpo_fm", "crpo"):
        assert preference_loss(theta, ref, batch, DpoConfig(1.0, kind))[0] > 0


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.1, 5), st.floats(0.1, 5))
def test_beta_monotonicity(terms, b1, b2):
    lw, ll, lwr, llr = terms
    bracket = (lw - ll) - (lwr - llr)
    if abs(bracket) < 1e-3 or abs(b1 - b2) < 1e-3:
        return
    lo, hi = sorted((b1, b2))
    l_lo, l_hi = dpo_objective(lw, ll, lwr, llr, lo), dpo_objective(lw, ll, lwr, llr, hi)
    if bracket < 0:
        assert l_hi < l_lo
    else:
        assert l_hi > l_lo


def test_empty_batch():
    params = zero_params(ModelConfig(2, 2))
    with pytest.raises(EmptyBatch):
        dpo_fm_loss(params, params, [])
    with pytest.raises(EmptyBatch):
        draw_preference_batch([], np.zeros((0, 2)), np.zeros((0, 2)), Rng(0))
    with pytest.raises(EmptyBatch):
        loss_trajectory(params, [], Rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        DpoConfig(beta=0.0)
    with pytest.raises(ValueError):
        DpoConfig(loss_kind="ipo")


def test_batch_items_roundtrip():
    _, _, batch = _setup(1)
    again = PreferenceBatch.from_items(batch.items())
    for name in ("conditions", "winners", "losers", "noise_w", "noise_l", "t"):
        assert np.array_equal(getattr(batch, name), getattr(again, name))


class _Pair:
    def __init__(self, c, w, l):
        self.condition, self.winner, self.loser = c, w, l


def test_loss_trajectory_naive_oracle_and_determinism():
    rng = Rng(9)
    params = init_params(ModelConfig(2, 3, hidden_dims=(6,)), rng.child("p"))
    pairs = [_Pair(int(rng.integers(3)), rng.normal(2), rng.normal(2)) for _ in range(7)]
    win, lose = loss_trajectory(params, pairs, Rng(42))
    assert (win, lose) == loss_trajectory(params, pairs, Rng(42))
    b = draw_preference_batch([p.condition for p in pairs], [p.winner for p in pairs], [p.loser for p in pairs], Rng(42))
    sw = sl = 0.0
    for i, p in enumerate(pairs):
        t = b.t[i]
        sw += float(np.sum((forward(params, (1 - t) * p.winner + t * b.noise_w[i], t, p.condition) - (b.noise_w[i] - p.winner)) ** 2))
        sl += float(np.sum((forward(params, (1 - t) * p.loser + t * b.noise_l[i], t, p.condition) - (b.noise_l[i] - p.loser)) ** 2))
    assert abs(win - sw / 7) < 1e-12 and abs(lose - sl / 7) < 1e-12
    lw, ll = pair_losses(params, b)
    assert abs(win + lose - (lw.sum() + ll.sum()) / 7) < 1e-12


def test_loss_trajectory_perfect_model_is_zero():
    # zero network, zero data and zero noise: every target velocity is zero
    params = zero_params(ModelConfig(2, 2, hidden_dims=(3,)))
    b = PreferenceBatch(np.array([0]), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.array([0.5]))
    assert [float(v[0]) for v in pair_losses(params, b)] == [0.0, 0.0]
