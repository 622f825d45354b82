import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrp.numerics import (Adam, AdamState, SavGolConfig, adam_step, grad_check, grad_check_tensors, make_rng,
                          numeric_grad, relative_error, savgol_smooth)


def reference_adam(x, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Scalar textbook loop, written independently of the vectorized version."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x) + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_first_step_moves_by_lr():
    p, s = adam_step(np.array([1.0]), np.array([2.0]), AdamState.zeros(1, lr=0.1))
    assert p[0] == pytest.approx(0.9, abs=1e-9)
    assert s.step_count == 1


def test_zero_gradient_leaves_params():
    p0 = np.array([0.3, -1.2])
    p, s = adam_step(p0, np.zeros(2), AdamState.zeros(2, lr=0.1))
    np.testing.assert_array_equal(p, p0)
    assert s.step_count == 1


def test_quadratic_converges_and_matches_reference():
    state = AdamState.zeros(1, lr=0.1)
    x = np.array([0.0])
    for _ in range(100):
        x, state = adam_step(x, 2 * (x - 3.0), state)
    assert abs(x[0] - 3.0) < 0.1
    assert x[0] == pytest.approx(reference_adam(0.0, lambda z: 2 * (z - 3.0), 100, 0.1), abs=1e-12)


def test_weight_decay_folds_into_gradient():
    x, state = np.array([2.0]), AdamState.zeros(1, lr=0.01, weight_decay=0.5)
    for _ in range(20):
        x, state = adam_step(x, 2 * x, state)
    assert x[0] == pytest.approx(reference_adam(2.0, lambda z: 2 * z, 20, 0.01, wd=0.5), abs=1e-12)


def test_adam_errors():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3))
    with pytest.raises(FloatingPointError, match="index 1"):
        adam_step(np.zeros(3), np.array([0.0, np.nan, 1.0]), AdamState.zeros(3))


def test_adam_inputs_not_mutated():
    p, g = np.array([1.0, 2.0]), np.array([0.5, -0.5])
    s = AdamState.zeros(2)
    adam_step(p, g, s)
    np.testing.assert_array_equal(p, [1.0, 2.0])
    assert s.step_count == 0 and not s.first_moment.any()


def test_dict_adam_only_touches_named_tensors():
    params = {"a": np.ones((2, 2)), "b": np.ones(3)}
    opt = Adam(params, ["a"], lr=0.1)
    out = opt.step(params, {"a": np.ones((2, 2)), "b": np.ones(3)})
    assert out["b"] is params["b"]
    np.testing.assert_allclose(out["a"], 0.9)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 2**32))
def test_adam_deterministic(vals, seed):
    g = make_rng(seed).standard_normal(3)
    a = adam_step(np.array(vals), g, AdamState.zeros(3))
    b = adam_step(np.array(vals), g, AdamState.zeros(3))
    np.testing.assert_array_equal(a[0], b[0])


# --- Savitzky-Golay -------------------------------------------------------


def lstsq_savgol(x, window, order):
    """Direct per-window polynomial least squares with mirrored padding."""
    half = window // 2
    padded = np.concatenate([x[1:half + 1][::-1], x, x[-half - 1:-1][::-1]])
    t = np.arange(-half, half + 1)
    vander = np.vander(t, order + 1, increasing=True)
    out = np.empty_like(x)
    for i in range(len(x)):
        coef, *_ = np.linalg.lstsq(vander, padded[i:i + window], rcond=None)
        out[i] = coef[0]
    return out


def test_constant_and_ramp_preserved():
    np.testing.assert_allclose(savgol_smooth([2.0] * 7, SavGolConfig(5, 2)), 2.0, atol=1e-12)
    ramp = np.arange(7.0)
    np.testing.assert_allclose(savgol_smooth(ramp, SavGolConfig(5, 2))[2:5], ramp[2:5], atol=1e-12)


def test_noisy_step_matches_lstsq_oracle(rng):
    clean = np.r_[np.zeros(20), np.ones(20)]
    noisy = clean + 0.05 * rng.standard_normal(40)
    cfg = SavGolConfig(7, 2)
    out = savgol_smooth(noisy, cfg)
    np.testing.assert_allclose(out, lstsq_savgol(noisy, 7, 2), atol=1e-10)
    interior = np.r_[3:16, 24:37]
    assert np.max(np.abs(out[interior] - clean[interior])) < 0.2


@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_savgol_linear(seed, a, b):
    r = make_rng(seed)
    x, y = r.standard_normal(15), r.standard_normal(15)
    lhs = savgol_smooth(a * x + b * y)
    rhs = a * savgol_smooth(x) + b * savgol_smooth(y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_savgol_errors():
    with pytest.raises(ValueError):
        savgol_smooth(np.zeros(5), SavGolConfig(7, 2))
    with pytest.raises(ValueError):
        SavGolConfig(6, 2)
    with pytest.raises(ValueError):
        SavGolConfig(5, 5)


# --- gradient check -------------------------------------------------------


def test_grad_check_square():
    res = grad_check(lambda x: float(x[0] * x[0]), [3.0], [6.0], h=1e-4)
    assert res.max_rel_error < 1e-8


def test_grad_check_detects_corruption():
    f = lambda x: float((x**2).sum())
    x = np.array([1.0, -2.0, 0.5])
    bad = 2 * x
    bad[1] *= 2
    res = grad_check(f, x, bad)
    assert res.worst_index == 1
    assert res.max_rel_error == pytest.approx(0.5, abs=1e-6)


def test_numeric_grad_subset():
    f = lambda x: float(np.sin(x).sum())
    x = np.linspace(0, 1, 6)
    np.testing.assert_allclose(numeric_grad(f, x, 1e-5, [1, 4]), np.cos(x[[1, 4]]), atol=1e-9)


def test_grad_check_tensors_reports_each_tensor():
    params = {"w": np.arange(30.0).reshape(5, 6) / 30, "b": np.ones(2)}
    loss = lambda p: float((p["w"] ** 3).sum() + (p["b"] ** 2).sum())
    grads = {"w": 3 * params["w"] ** 2, "b": 2 * params["b"]}
    rep = grad_check_tensors(loss, params, grads, h=1e-5, max_coords=10)
    assert set(rep) == {"w", "b"} and max(rep.values()) < 1e-7


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_rng_reproducible():
    assert make_rng(7).random() == make_rng(7).random()
