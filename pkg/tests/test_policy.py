import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrp import policy as pol
from hrp.encoder import TINY_CONFIG
from hrp.gmm import log_pdf
from hrp.numerics import grad_check_tensors, make_rng
from hrp.policy import BcConfig, DemoSet, PolicyConfig
from hrp.simenv import EnvConfig, Observation, collect_demos

PCFG = PolicyConfig(encoder=TINY_CONFIG, hidden=(16, 16))
SIZE = TINY_CONFIG.image_size


@pytest.fixture(scope="module")
def params():
    return pol.init_policy(PCFG, 0)


def _inputs(seed, n=4):
    rng = make_rng(seed)
    return (rng.random((n, SIZE, SIZE, 3)), rng.random((n, 3)),
            rng.uniform(PCFG.action_low, PCFG.action_high, size=(n, 3)))


@given(st.integers(0, 10_000))
def test_mixture_is_valid(params, seed):
    img, state, _ = _inputs(seed, 1)
    m = pol.policy_forward(params, img[0], state[0], PCFG)
    assert m.weights.shape == (PCFG.modes,) and m.means.shape == (PCFG.modes, 3)
    assert abs(m.weights.sum() - 1.0) < 1e-12 and np.all(m.weights >= 0)
    assert np.all(m.variances > 0)


def test_std_clamped():
    p = pol.init_policy(PCFG, 1)
    k, a = PCFG.modes, PCFG.action_dim
    for bias, bound in ((50.0, PCFG.log_std_max), (-50.0, PCFG.log_std_min)):
        q = dict(p)
        b = q["policy.head.bias"].copy()
        b[k * a:2 * k * a] = bias
        q["policy.head.bias"] = b
        img, state, _ = _inputs(2, 1)
        m = pol.policy_forward(q, img[0], state[0], PCFG)
        expected = np.broadcast_to(bound + np.log(PCFG.half_range), m.variances.shape)
        np.testing.assert_allclose(0.5 * np.log(m.variances), expected, atol=1e-9)


def test_full_dropout_leaves_only_head_bias(params):
    cfg = PolicyConfig(encoder=TINY_CONFIG, hidden=(16, 16), dropout_prob=1.0)
    outs = []
    for seed in range(3):
        img, state, _ = _inputs(seed, 1)
        outs.append(pol.policy_forward(params, img[0], state[0], cfg, train_mode=True, seed=seed).means)
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_nll_matches_mixture_log_density(params):
    img, state, act = _inputs(3)
    nll, _ = pol.nll_and_grads(params, img, state, act, PCFG, train_mode=False)
    ref = -np.mean([log_pdf(pol.policy_forward(params, img[i], state[i], PCFG), act[i]) for i in range(len(act))])
    assert nll == pytest.approx(ref, rel=1e-10)


def test_train_mode_requires_seed(params):
    img, state, act = _inputs(4, 1)
    with pytest.raises(ValueError):
        pol.nll_and_grads(params, img, state, act, PCFG, train_mode=True, seed=None)


def test_nll_gradients(params):
    rng = make_rng(5)
    p = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
    img, state, act = _inputs(5, 3)
    _, grads = pol.nll_and_grads(p, img, state, act, PCFG, train_mode=True, seed=9)
    assert set(grads) == set(p)
    errs = grad_check_tensors(lambda q: pol.nll_and_grads(q, img, state, act, PCFG, True, 9)[0],
                              p, grads, h=1e-5, max_coords=6, seed=0)
    assert max(errs.values()) < 1e-4


def test_act_clipped_and_seeded(params):
    img, state, _ = _inputs(6, 1)
    obs = Observation(img[0], state[0])
    wide = dict(params)
    b = wide["policy.head.bias"].copy()
    b[:PCFG.modes * 3] = 40.0
    wide["policy.head.bias"] = b
    for seed in range(20):
        a = pol.act(wide, obs, PCFG, seed)
        assert np.all(a >= PCFG.action_low) and np.all(a <= PCFG.action_high)
    np.testing.assert_array_equal(pol.act(params, obs, PCFG, 7), pol.act(params, obs, PCFG, 7))
    draws = np.stack([pol.act(params, obs, PCFG, s) for s in range(10)])
    assert np.unique(draws[:, 0]).size > 1  # stochastic, not the mode mean


def test_augment_identity_and_shapes():
    img = make_rng(0).random((16, 16, 3))
    same = pol.augment(img, BcConfig(crop_pad=0, blur_prob=0.0), 3)
    np.testing.assert_array_equal(same, img)
    for seed in range(10):
        out = pol.augment(img, BcConfig(crop_pad=4, blur_prob=1.0), seed)
        assert out.shape == img.shape
    blurred = pol.augment(img, BcConfig(crop_pad=0, blur_prob=1.0, blur_sigma=(3.0, 3.0)), 0)
    assert blurred.var() < 0.5 * img.var()


@given(st.integers(0, 1000), st.integers(1, 4))
def test_crop_is_a_shifted_window(seed, pad):
    img = make_rng(seed).random((12, 12, 3))
    out = pol.augment(img, BcConfig(crop_pad=pad, blur_prob=0.0), seed)
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    hits = [(dy, dx) for dy in range(2 * pad + 1) for dx in range(2 * pad + 1)
            if np.array_equal(padded[dy:dy + 12, dx:dx + 12], out)]
    assert hits


def test_bc_config_validation():
    with pytest.raises(ValueError):
        BcConfig(iterations=0)
    with pytest.raises(ValueError):
        BcConfig(batch_size=0)


def _single_pair():
    img = (make_rng(1).random((1, SIZE, SIZE, 3)) * 255).astype(np.uint8)
    return DemoSet(img, np.array([[0.3, 0.6, 0.0]]), np.array([[0.02, -0.03, 0.9]]), np.array([0]))


def test_overfit_single_pair():
    demos = _single_pair()
    cfg = PolicyConfig(encoder=TINY_CONFIG, hidden=(16, 16), dropout_prob=0.0)
    bc = BcConfig(lr=3e-4, weight_decay=0.0, iterations=500, batch_size=1, crop_pad=0, blur_prob=0.0)
    res = pol.bc_train(demos, pol.init_policy(cfg, 0), cfg, bc)
    nll = np.array([r["nll"] for r in res.trace])
    windows = nll.reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(windows) < 0)
    m = pol.policy_forward(res.params, demos.images[0] / 255.0, demos.states[0], cfg)
    top = m.means[np.argmax(m.weights)]
    assert np.linalg.norm(top - demos.actions[0]) < 0.05


def test_bc_deterministic(tmp_path):
    demos = _single_pair()
    bc = BcConfig(iterations=3, batch_size=2)
    a = pol.bc_train(demos, pol.init_policy(PCFG, 0), PCFG, bc)
    b = pol.bc_train(demos, pol.init_policy(PCFG, 0), PCFG, bc)
    assert a.trace == b.trace
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_demo_round_trip(tmp_path):
    demos = DemoSet.from_episodes(collect_demos(EnvConfig(max_steps=10, render_size=SIZE), 2, 0))
    assert len(demos) == 20
    pol.write_demos(tmp_path, demos)
    back = pol.read_demos(tmp_path)
    for f in ("images", "states", "actions", "episode"):
        np.testing.assert_array_equal(getattr(back, f), getattr(demos, f))


def test_policy_checkpoint_round_trip(tmp_path, params):
    pol.save_policy(tmp_path / "p.hrpt", params, PCFG, {"note": 1})
    back, cfg, meta = pol.load_policy(tmp_path / "p.hrpt")
    assert cfg == PCFG and meta["note"] == 1
    for k in params:  # stored as float32
        np.testing.assert_array_equal(back[k], params[k].astype(np.float32))
