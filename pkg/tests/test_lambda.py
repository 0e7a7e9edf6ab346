import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gleak import eggv, fl, lambda_analysis as la, models
from gleak.models import Batch

from oracles import central_diff_grad, np_cross_entropy


def head_case(seed, B, C, m=5, scale=1.0):
    rng = np.random.default_rng(seed)
    spec = models.linear_head(m, C)
    params = spec.empty_params().replace(rng.normal(0, scale, spec.num_params()))
    batch = Batch(rng.uniform(size=(B, m)), rng.integers(0, C, B), C)
    return spec, params, batch


def test_single_sample_lambda_is_one():
    spec, params, batch = head_case(0, 1, 4)
    lam = la.compute_lambda(spec, params, batch)
    assert lam.valid.all()
    assert np.array_equal(lam.values[lam.valid], np.ones((4, 1)))


def test_identical_samples_split_evenly():
    spec, params, _ = head_case(1, 1, 3)
    x = np.random.default_rng(0).uniform(size=(1, 5))
    batch = Batch(np.vstack([x, x]), [2, 2], 3)
    lam = la.compute_lambda(spec, params, batch)
    assert np.allclose(lam.values[lam.valid], 0.5, rtol=0, atol=1e-15)


def test_lambda_against_finite_difference_logit_derivatives():
    spec, params, batch = head_case(2, 4, 2)
    z = models.forward(spec, params, batch.x).data
    B, C = z.shape
    resid = np.zeros((B, C))
    for i in range(B):
        # derivative of sample i's own loss with respect to its logits
        resid[i] = central_diff_grad(lambda zi: np_cross_entropy(zi[None, :], batch.y[i:i + 1]), z[i])
    expected = resid.T / resid.T.sum(axis=1, keepdims=True)
    lam = la.compute_lambda(spec, params, batch)
    assert np.max(np.abs(lam.values - expected)) < 1e-8


def test_invalid_rows_flagged_not_filled():
    # two samples of class 0 with one-hot saturated logits: every class row sums to ~0
    spec = models.linear_head(2, 2)
    p = spec.empty_params().with_segment("layer0.bias", [400.0, -400.0])
    batch = Batch(np.zeros((2, 2)), [0, 0], 2)
    lam = la.compute_lambda(spec, p, batch)
    assert not lam.valid.any()
    assert np.isnan(lam.values).all()


@pytest.mark.parametrize("B", [1, 2, 4, 8])
@pytest.mark.parametrize("C", [2, 10])
def test_weighted_average_equals_lambda_combination(B, C):
    for seed in range(5):
        spec, params, batch = head_case(seed, B, C)
        cap = fl.client_gradient(spec, params, batch)
        wa = la.weighted_average_from_grads(cap, "layer0")
        lam = la.compute_lambda(spec, params, batch)
        assert wa.quantity == "input"
        assert np.array_equal(wa.valid, lam.valid)
        combo = lam.values[lam.valid] @ batch.x
        assert np.max(np.abs(wa.per_class[wa.valid] - combo)) < 1e-6


def test_single_sample_reconstructs_input():
    spec, params, batch = head_case(7, 1, 10)
    cap = fl.client_gradient(spec, params, batch)
    wa = la.weighted_average_from_grads(cap, 0)
    assert wa.valid.all()
    assert np.max(np.abs(wa.per_class - batch.x[0])) < 1e-12


def test_zero_gradient_all_invalid():
    spec = models.linear_head(3, 2)
    cap = fl.GradientCapture(0, 0, spec.empty_params(), batch_size=1, labels=(0,))
    wa = la.weighted_average_from_grads(cap, "layer0")
    assert not wa.valid.any()


def test_layer_without_bias_rejected():
    spec = models.ModelSpec((3, 2), (), (False,))
    cap = fl.GradientCapture(0, 0, spec.empty_params(), batch_size=1, labels=(0,))
    with pytest.raises(ValueError, match="no bias"):
        la.weighted_average_from_grads(cap, "layer0")


def test_deep_model_quotient_reconstructs_features():
    spec = models.mlp(4, 6, 3)
    params = models.init(spec, "he", 0)
    batch = Batch(np.random.default_rng(1).uniform(size=(1, 4)), [1], 3)
    cap = fl.client_gradient(spec, params, batch)
    wa = la.weighted_average_from_grads(cap, "layer1")
    W0, b0 = params.get("layer0.weight"), params.get("layer0.bias")
    feats = np.maximum(batch.x @ W0 + b0, 0)[0]
    assert wa.quantity == "features"
    assert np.max(np.abs(wa.per_class[wa.valid] - feats)) < 1e-9


def test_profile_uniform_and_one_hot_rows():
    lam = la.LambdaMatrix(np.array([[0.25] * 4, [1.0, 0, 0, 0]]), np.array([True, True]))
    prof = la.lambda_bias_profile(lam)
    assert prof["max_lambda"][0] == 0.25
    assert prof["entropy"][0] == pytest.approx(np.log(4), abs=1e-15)
    assert prof["max_lambda"][1] == 1.0
    assert prof["entropy"][1] == 0.0


def test_fishing_model_concentrates_lambda_on_target_sample():
    spec = models.mlp(16, 32, 4)
    base = models.init(spec, "random", 0)
    poisoned = eggv.fishing_baseline_poison(spec, base, target_class=2, seed=0)
    rng = np.random.default_rng(3)
    batch = Batch(rng.uniform(size=(4, 16)), [2, 0, 1, 3], 4)
    prof = la.lambda_bias_profile(la.compute_lambda(spec, poisoned, batch))
    assert prof["valid"][2]
    assert prof["max_lambda"][2] >= 0.9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8]), st.sampled_from([2, 10]))
def test_valid_rows_sum_to_one(seed, B, C):
    spec, params, batch = head_case(seed, B, C, scale=2.0)
    lam = la.compute_lambda(spec, params, batch)
    sums = lam.values[lam.valid].sum(axis=1)
    assert np.all(np.abs(sums - 1) < 1e-9)


def test_csv_export(tmp_path):
    spec, params, batch = head_case(0, 2, 2)
    lam = la.compute_lambda(spec, params, batch)
    la.export_lambda_csv(tmp_path / "lam.csv", lam, {"round": 0})
    lines = (tmp_path / "lam.csv").read_text().splitlines()
    assert lines[0] == "round,class,sample,valid,lambda"
    assert len(lines) == 1 + 4
