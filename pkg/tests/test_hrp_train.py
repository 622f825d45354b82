import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrp import encoder as enc
from hrp.hrp_train import (ABLATION_LABELS, ABLATIONS, Batch, HrpData, HrpLossConfig, HrpTrainConfig, ablate_losses,
                           hrp_loss, loss_and_grads, train_hrp)
from hrp.mining import AffordanceRecord
from hrp.hrp_train import record_loss
from hrp.numerics import make_rng

CFG = enc.TINY_CONFIG


def make_data(n, seed=0, masks=None):
    r = make_rng(seed)
    m = np.ones((n, 3)) if masks is None else np.asarray(masks, dtype=np.float64)
    return HrpData((r.random((n, 16, 16, 3)) * 255).astype(np.uint8), r.random((n, 10)) * m[:, :1],
                   r.random((n, 2)) * m[:, 1:2], r.random((n, 4)) * m[:, 2:], m)


def init_params(seed=0):
    return {**enc.init_encoder(CFG, seed), **enc.init_heads(CFG, seed + 1)}


def example_batch():
    batch = Batch(np.zeros((1, 16, 16, 3)), np.zeros((1, 10)), np.zeros((1, 2)), np.zeros((1, 4)), np.ones((1, 3)))
    preds = {"contact": np.r_[2.0, np.zeros(9)][None], "hand": np.array([[3.0, 4.0]]),
             "object": np.array([[0.0, 1.0, 0.0, 0.0]])}
    return batch, preds


def test_worked_example():
    batch, preds = example_batch()
    loss, terms, _ = hrp_loss(preds, batch)
    assert loss == 0.005 * 2 + 0.5 * 5 + 0.05 * 1
    assert terms == pytest.approx({"contact": 0.01, "hand": 2.5, "object": 0.05})


def test_record_loss_matches_batch():
    _, preds = example_batch()
    rec = AffordanceRecord(0, np.zeros(10), np.zeros(2), np.zeros(4), 1, 1, 1)
    assert record_loss({k: v[0] for k, v in preds.items()}, rec)[0] == 0.005 * 2 + 0.5 * 5 + 0.05 * 1


def test_zero_masks_and_perfect_predictions():
    batch, preds = example_batch()
    batch.masks[:] = 0
    loss, _, d = hrp_loss(preds, batch)
    assert loss == 0.0 and all(not g.any() for g in d.values())
    batch.masks[:] = 1
    perfect = {"contact": batch.contact, "hand": batch.wrist, "object": batch.object}
    loss, _, d = hrp_loss(perfect, batch)
    assert loss == 0.0 and all(not g.any() for g in d.values())


def test_non_finite_prediction_names_index():
    batch, preds = example_batch()
    batch = Batch(np.zeros((2, 16, 16, 3)), np.zeros((2, 10)), np.zeros((2, 2)), np.zeros((2, 4)), np.ones((2, 3)))
    preds = {"contact": np.zeros((2, 10)), "hand": np.array([[0.0, 0.0], [np.inf, 0.0]]), "object": np.zeros((2, 4))}
    with pytest.raises(FloatingPointError, match="batch index 1"):
        hrp_loss(preds, batch)


@given(st.integers(0, 10**6))
def test_batch_order_invariant(seed):
    r = make_rng(seed)
    n = 5
    b = Batch(np.zeros((n, 1, 1, 3)), r.random((n, 10)), r.random((n, 2)), r.random((n, 4)),
              r.integers(0, 2, (n, 3)).astype(float))
    p = {"contact": r.random((n, 10)), "hand": r.random((n, 2)), "object": r.random((n, 4))}
    perm = r.permutation(n)
    bp = Batch(b.images[perm], b.contact[perm], b.wrist[perm], b.object[perm], b.masks[perm])
    assert hrp_loss({k: v[perm] for k, v in p.items()}, bp)[0] == pytest.approx(hrp_loss(p, b)[0], rel=1e-14)


@given(st.integers(0, 10**6), st.floats(0.1, 10.0), st.sampled_from(["lambda_ct", "lambda_hand", "lambda_obj"]))
def test_lambda_scaling_scales_term_gradient(seed, s, which):
    r = make_rng(seed)
    n = 4
    b = Batch(np.zeros((n, 1, 1, 3)), r.random((n, 10)), r.random((n, 2)), r.random((n, 4)), np.ones((n, 3)))
    p = {"contact": r.random((n, 10)), "hand": r.random((n, 2)), "object": r.random((n, 4))}
    term = {"lambda_ct": "contact", "lambda_hand": "hand", "lambda_obj": "object"}[which]
    base = HrpLossConfig()
    scaled = HrpLossConfig(**{**base.__dict__, which: getattr(base, which) * s})
    g0 = np.linalg.norm(hrp_loss(p, b, base)[2][term])
    g1 = np.linalg.norm(hrp_loss(p, b, scaled)[2][term])
    assert g1 == pytest.approx(s * g0, rel=1e-6)


def test_loss_gradients_match_finite_differences():
    from hrp.numerics import grad_check_tensors
    r = make_rng(1)
    params = {k: v + 0.05 * r.standard_normal(v.shape) for k, v in init_params(2).items()}
    data = make_data(3, 4, masks=[[1, 1, 1], [0, 1, 1], [1, 0, 0]])
    batch = data.batch(np.arange(3))
    _, _, grads = loss_and_grads(params, batch, CFG, HrpLossConfig())
    rep = grad_check_tensors(lambda q: loss_and_grads(q, batch, CFG, HrpLossConfig())[0], params, grads, h=1e-5)
    assert max(rep.values()) < 1e-4


def test_zero_mask_training_changes_nothing():
    params = init_params()
    res = train_hrp(make_data(6, masks=np.zeros((6, 3))), params, CFG, HrpTrainConfig(steps=3, batch_size=3))
    assert all(np.array_equal(res.params[k], params[k]) for k in params)
    res = train_hrp(make_data(6), params, CFG,
                    HrpTrainConfig(loss=HrpLossConfig(0.0, 0.0, 0.0), steps=3, batch_size=3))
    assert all(np.array_equal(res.params[k], params[k]) for k in params)


def test_layernorm_only_changes_exactly_trainable_set():
    params = init_params()
    res = train_hrp(make_data(8), params, CFG, HrpTrainConfig(steps=20, batch_size=4))
    changed = {k for k in params if not np.array_equal(res.params[k], params[k])}
    expected = {k for k in params if enc.is_layernorm(k) or enc.is_head(k)}
    assert changed == expected
    for k in params.keys() - expected:
        assert res.params[k] is params[k]


def test_single_sample_overfit():
    params = init_params(3)
    res = train_hrp(make_data(1, 5), params, CFG, HrpTrainConfig(steps=200, batch_size=1, lr=1e-2))
    assert res.trace[-1]["total"] < 0.1 * res.trace[0]["total"]


def test_determinism_and_trace(tmp_path):
    params = init_params()
    cfg = HrpTrainConfig(steps=5, batch_size=3, seed=9)
    a = train_hrp(make_data(7), params, CFG, cfg, tmp_path / "a")
    b = train_hrp(make_data(7), params, CFG, cfg, tmp_path / "b")
    for k in params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert (tmp_path / "a" / "loss_trace.jsonl").read_bytes() == (tmp_path / "b" / "loss_trace.jsonl").read_bytes()
    assert len((tmp_path / "a" / "loss_trace.jsonl").read_text().splitlines()) == 5


def test_config_validation():
    with pytest.raises(ValueError):
        HrpTrainConfig(steps=0)
    with pytest.raises(ValueError):
        HrpLossConfig(-1.0, 0.5, 0.05)


def test_ablation_settings():
    assert HrpLossConfig() == ABLATIONS["full"] == HrpLossConfig(0.005, 0.5, 0.05)
    assert ABLATIONS["no_contact"] == HrpLossConfig(lambda_ct=0.0, lambda_hand=0.5, lambda_obj=0.05)
    assert ABLATIONS["no_object"] == HrpLossConfig(lambda_ct=0.005, lambda_hand=0.5, lambda_obj=0.0)
    assert ABLATIONS["no_hand"] == HrpLossConfig(lambda_ct=0.005, lambda_hand=0.0, lambda_obj=0.05)
    assert list(ABLATION_LABELS.values()) == ["Ours", "No Contact", "No Object", "No Hand"]


def test_ablate_runs_each_setting():
    res = ablate_losses(make_data(4), init_params(), CFG, HrpTrainConfig(steps=2, batch_size=2))
    assert list(res) == list(ABLATIONS)
    assert res["no_hand"].trace[0]["loss_hand"] == 0.0
