import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfcrpo.errors import BadCondition, CheckpointError, ShapeMismatch
from rfcrpo.numkit import Rng
from rfcrpo.vectorfield import (
    ModelConfig,
    ModelParameters,
    adamw_step,
    backward,
    backward_batch,
    clone_frozen,
    forward,
    forward_batch,
    init_optimizer,
    init_params,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
    scheduled_lr,
    zero_params,
    zeros_like,
)

from conftest import rel_err


def reference_forward(params: ModelParameters, x, t, c):
    """Straight-line scalar reimplementation of one forward pass."""
    cfg = params.config
    row = c if c is not None else cfg.num_conditions
    feats = list(x)
    feats += [math.sin(2**j * math.pi * t) for j in range(cfg.time_features)]
    feats += [math.cos(2**j * math.pi * t) for j in range(cfg.time_features)]
    feats += list(params.arrays["embedding"][row])
    h = feats
    layers = cfg.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        w = params.arrays[f"layer{i}.weight"]
        b = params.arrays[f"layer{i}.bias"]
        z = [sum(h[a] * w[a, o] for a in range(fan_in)) + b[o] for o in range(fan_out)]
        if i < len(layers) - 1:
            if cfg.activation == "silu":
                z = [v / (1.0 + math.exp(-v)) for v in z]
            else:
                z = [math.tanh(v) for v in z]
        h = z
    return np.array(h)


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_forward_matches_scalar_reimplementation(activation):
    cfg = ModelConfig(data_dim=3, num_conditions=4, hidden_dims=(5, 6), embed_dim=2, time_features=3, activation=activation)
    params = init_params(cfg, Rng(1))
    rng = Rng(2)
    for c in [0, 3, None]:
        x = rng.normal(3)
        t = float(rng.uniform())
        np.testing.assert_allclose(forward(params, x, t, c), reference_forward(params, x, t, c), rtol=1e-12, atol=1e-13)


def test_zero_params_give_zero_output():
    params = zero_params(ModelConfig(2, 3))
    assert np.array_equal(forward(params, [1.0, -2.0], 0.3, 1), np.zeros(2))


def test_forward_is_pure(small_params):
    x = np.array([0.3, -0.7])
    assert np.array_equal(forward(small_params, x, 0.4, 2), forward(small_params, x, 0.4, 2))


def test_rows_independent_of_batch(small_params):
    rng = Rng(3)
    x = rng.normal((37, 2))
    t = rng.uniform(37)
    c = rng.integers(3, size=37)
    full = forward_batch(small_params, x, t, c)
    for i in [0, 5, 36]:
        assert np.array_equal(full[i], forward_batch(small_params, x[i : i + 1], t[i : i + 1], c[i : i + 1])[0])


def test_bad_condition(small_params):
    with pytest.raises(BadCondition):
        forward(small_params, [0.0, 0.0], 0.5, 3)
    with pytest.raises(BadCondition):
        forward_batch(small_params, np.zeros((2, 2)), 0.5, [0, -1])


def test_large_inputs_stay_finite(small_params):
    x = np.array([[1e6, -1e6], [-1e6, 1e6]])
    assert np.all(np.isfinite(forward_batch(small_params, x, 0.5, [0, None])))


def _finite_difference_check(params, x, t, c, upstream, coords, rng, h=1e-5):
    grads = backward(params, x, t, c, upstream)
    names = params.names()
    worst = 0.0
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        arr = params.arrays[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = float(upstream @ forward(params, x, t, c))
        arr[idx] = old - h
        down = float(upstream @ forward(params, x, t, c))
        arr[idx] = old
        fd = (up - down) / (2 * h)
        an = grads[name][idx]
        if abs(fd) < 1e-7 and abs(an) < 1e-7:
            continue
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


@given(st.integers(0, 2**32), st.sampled_from([1, 2, 4]), st.sampled_from([(8,), (16, 16)]), st.sampled_from(["silu", "tanh"]))
def test_backward_matches_finite_differences(seed, dim, hidden, activation):
    rng = Rng(seed)
    cfg = ModelConfig(data_dim=dim, num_conditions=3, hidden_dims=hidden, embed_dim=3, time_features=2, activation=activation)
    params = init_params(cfg, rng.child("init"))
    c = [0, 1, 2, None][int(rng.integers(4))]
    worst = _finite_difference_check(params, rng.normal(dim), float(rng.uniform()), c, rng.normal(dim), 50, rng)
    assert worst < 1e-4


def test_backward_zero_upstream(small_params):
    grads = backward(small_params, [0.1, 0.2], 0.5, 1, np.zeros(2))
    assert all(not g.any() for g in grads.values())


def test_backward_linear_in_upstream(small_params):
    x, a, b = np.array([0.4, -1.2]), np.array([1.0, -2.0]), np.array([0.5, 3.0])
    ga = backward(small_params, x, 0.3, 0, a)
    gb = backward(small_params, x, 0.3, 0, b)
    gab = backward(small_params, x, 0.3, 0, a + b)
    for k in ga:
        np.testing.assert_allclose(gab[k], ga[k] + gb[k], atol=1e-12)


def test_backward_batch_sums_rows(small_params):
    rng = Rng(4)
    x, t, c, up = rng.normal((5, 2)), rng.uniform(5), np.array([0, 1, 2, 0, 1]), rng.normal((5, 2))
    total = backward_batch(small_params, x, t, c, up)
    rows = [backward(small_params, x[i], t[i], int(c[i]), up[i]) for i in range(5)]
    for k in total:
        np.testing.assert_allclose(total[k], sum(r[k] for r in rows), atol=1e-12)


def test_backward_shape_mismatch(small_params):
    with pytest.raises(ShapeMismatch):
        backward_batch(small_params, np.zeros((2, 2)), 0.5, 0, np.zeros((3, 2)))


def test_clone_is_deep(small_params):
    clone = clone_frozen(small_params)
    assert clone.equals(small_params)
    assert np.array_equal(forward(clone, [1.0, 1.0], 0.2, 0), forward(small_params, [1.0, 1.0], 0.2, 0))
    small_params.arrays["layer0.weight"][0, 0] += 1.0
    assert not clone.equals(small_params)


def test_init_shapes_and_scale():
    cfg = ModelConfig(2, 4)
    params = init_params(cfg, Rng(0))
    assert params.shapes() == parameter_shapes(cfg)
    assert params.arrays["embedding"].shape == (5, 8)
    assert not params.arrays["layer1.bias"].any()
    w = init_params(ModelConfig(2, 4, hidden_dims=(400, 400)), Rng(1)).arrays["layer1.weight"]
    assert abs(w.var() * 400 - 1.0) < 0.02


# ---------------------------------------------------------------- AdamW


def _scalar_params(value=0.0):
    cfg = ModelConfig(1, 1, hidden_dims=(1,), embed_dim=1, time_features=1)
    params = zero_params(cfg)
    params.arrays["layer0.bias"][0] = value
    return params


def test_adamw_zero_grad_is_noop(small_params):
    before = clone_frozen(small_params)
    state = init_optimizer(small_params, lr=1e-3, warmup_steps=0)
    for _ in range(3):
        adamw_step(state, small_params, zeros_like(small_params))
    assert small_params.equals(before)


def test_adamw_first_step_moves_by_lr():
    params = _scalar_params(0.5)
    state = init_optimizer(params, lr=1e-3, warmup_steps=0)
    grads = zeros_like(params)
    grads["layer0.bias"][0] = 1.0
    adamw_step(state, params, grads)
    assert abs(params.arrays["layer0.bias"][0] - (0.5 - 1e-3)) < 1e-10


def test_warmup_is_linear():
    state = init_optimizer(_scalar_params(), lr=5e-4, warmup_steps=100)
    assert [scheduled_lr(state, k) for k in (0, 1, 50, 99, 100, 500)] == [0.0, 5e-4 * 1 / 100, 5e-4 * 50 / 100, 5e-4 * 99 / 100, 5e-4, 5e-4]


def test_adamw_matches_scalar_oracle():
    rng = Rng(8)
    gs = rng.normal(6)
    params = _scalar_params(0.7)
    state = init_optimizer(params, lr=1e-2, warmup_steps=3, weight_decay=0.1)
    theta, m, v = 0.7, 0.0, 0.0
    for k, g in enumerate(gs, start=1):
        grads = zeros_like(params)
        grads["layer0.bias"][0] = g
        adamw_step(state, params, grads)
        lr = 1e-2 * min(k / 3, 1.0)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        theta -= lr * 0.1 * theta
        theta -= lr * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.95**k)) + 1e-8)
        assert abs(params.arrays["layer0.bias"][0] - theta) < 1e-15
    assert state.step == 6


def test_adamw_shape_mismatch(small_params):
    state = init_optimizer(small_params)
    grads = zeros_like(small_params)
    grads["embedding"] = np.zeros((1, 1))
    with pytest.raises(ShapeMismatch):
        adamw_step(state, small_params, grads)
    with pytest.raises(ShapeMismatch):
        adamw_step(state, small_params, {})


# ------------------------------------------------------------ checkpoint


def test_checkpoint_roundtrip(tmp_path, small_params):
    path = tmp_path / "m.rfck"
    save_checkpoint(path, small_params, step=12)
    loaded, step, opt = load_checkpoint(path)
    assert loaded.equals(small_params) and step == 12 and opt is None
    raw = path.read_bytes()
    assert raw.startswith(b"RFCK1\n") and b"\n\n" in raw
    save_checkpoint(tmp_path / "again.rfck", loaded, step=12)
    assert (tmp_path / "again.rfck").read_bytes() == raw


def test_save_load_step_equals_direct_step(tmp_path, small_params):
    rng = Rng(5)
    state = init_optimizer(small_params, lr=1e-2, warmup_steps=2, weight_decay=0.01)
    grads = [{k: rng.normal(v.shape) for k, v in small_params.arrays.items()} for _ in range(3)]
    adamw_step(state, small_params, grads[0])
    save_checkpoint(tmp_path / "s.rfck", small_params, step=state.step, optimizer=state)
    p2, step, s2 = load_checkpoint(tmp_path / "s.rfck")
    assert step == 1 and s2.hyper() == state.hyper()
    for g in grads[1:]:
        adamw_step(state, small_params, g)
        adamw_step(s2, p2, g)
    assert p2.equals(small_params)


def test_checkpoint_validation(tmp_path, small_params):
    path = tmp_path / "m.rfck"
    save_checkpoint(path, small_params)
    raw = path.read_bytes()
    for bad in [b"XXXXX\n" + raw[6:], raw[:-8], raw + b"\0" * 8, raw[:20]]:
        (tmp_path / "bad.rfck").write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.rfck")
    header_end = raw.index(b"\n\n")
    tampered = raw[:header_end].replace(b'"hidden_dims":[8]', b'"hidden_dims":[9]') + raw[header_end:]
    (tmp_path / "bad.rfck").write_bytes(tampered)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.rfck")
