import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gleak import fl, models
from gleak.models import Batch

from oracles import np_softmax


def linear_case(seed=0, B=2, m=3, C=3):
    rng = np.random.default_rng(seed)
    spec = models.linear_head(m, C)
    params = spec.empty_params().replace(rng.normal(0, 0.5, spec.num_params()))
    batch = Batch(rng.uniform(size=(B, m)), rng.integers(0, C, B), C)
    return spec, params, batch


def test_zero_params_bias_grad_sums_to_zero():
    spec = models.linear_head(4, 3)
    batch = Batch(np.random.default_rng(0).uniform(size=(5, 4)), [0, 1, 2, 2, 1], 3)
    cap = fl.client_gradient(spec, spec.empty_params(), batch)
    assert abs(cap.batch_grad.get("layer0.bias").sum()) < 1e-15
    assert np.abs(cap.batch_grad.get("layer0.weight")).sum() > 0


def test_duplicated_batch_has_same_gradient():
    spec, params, batch = linear_case(1)
    twice = Batch(np.vstack([batch.x, batch.x]), np.concatenate([batch.y, batch.y]), 3)
    a = fl.client_gradient(spec, params, batch).batch_grad.values
    b = fl.client_gradient(spec, params, twice).batch_grad.values
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_linear_head_gradient_matches_hand_formula():
    spec, params, batch = linear_case(2, B=2)
    W = params.get("layer0.weight")
    b = params.get("layer0.bias")
    p = np_softmax(batch.x @ W + b)
    resid = p - np.eye(3)[batch.y]
    dW = 0.5 * sum(np.outer(batch.x[i], resid[i]) for i in range(2))
    db = 0.5 * resid.sum(axis=0)
    cap = fl.client_gradient(spec, params, batch, capture_per_sample=True)
    assert np.max(np.abs(cap.batch_grad.get("layer0.weight") - dW)) < 1e-12
    assert np.max(np.abs(cap.batch_grad.get("layer0.bias") - db)) < 1e-12
    cap.check()
    assert cap.label_counts == dict(sorted({int(k): int(v) for k, v in
                                            zip(*np.unique(batch.y, return_counts=True))}.items()))


def _pv(spec, vals):
    return spec.empty_params().replace(vals)


def test_aggregate_single_client_unchanged():
    spec = models.linear_head(2, 2)
    g = _pv(spec, np.arange(6.0))
    assert np.array_equal(fl.aggregate([g], [7]).values, g.values)


def test_aggregate_sizes_one_and_three():
    spec = models.linear_head(2, 2)
    g = _pv(spec, np.arange(1.0, 7.0))
    z = _pv(spec, np.zeros(6))
    assert np.array_equal(fl.aggregate([g, z], [1, 3]).values, g.values / 4)


def test_aggregate_three_clients_against_direct_sum():
    spec = models.mlp(3, 4, 2)
    rng = np.random.default_rng(5)
    grads = [_pv(spec, rng.normal(size=spec.num_params())) for _ in range(3)]
    sizes = [5, 11, 2]
    out = fl.aggregate(grads, sizes).values
    direct = np.zeros(spec.num_params())
    for j in range(spec.num_params()):
        direct[j] = sum(s * g.values[j] for s, g in zip(sizes, grads)) / sum(sizes)
    assert np.max(np.abs(out - direct)) < 1e-12


def test_aggregate_rejects_bad_input():
    spec = models.linear_head(2, 2)
    with pytest.raises(ValueError):
        fl.aggregate([], [])
    with pytest.raises(ValueError):
        fl.aggregate([_pv(spec, np.zeros(6)), models.linear_head(3, 2).empty_params()], [1, 1])
    with pytest.raises(ValueError):
        fl.aggregate([_pv(spec, np.zeros(6))], [1, 2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=6))
def test_aggregate_of_identical_gradients_is_that_gradient(sizes):
    spec = models.linear_head(2, 2)
    g = _pv(spec, np.array([0.25, -1.5, 3.0, 0.125, 2.0, -0.5]))
    out = fl.aggregate([g] * len(sizes), sizes).values
    assert np.allclose(out, g.values, rtol=1e-15, atol=1e-15)


def test_sgd_step_cases():
    spec = models.linear_head(2, 2)
    rng = np.random.default_rng(0)
    p = _pv(spec, rng.normal(size=6))
    u = _pv(spec, rng.normal(size=6))
    assert np.array_equal(fl.sgd_step(p, u, 0.0).values, p.values)
    assert not fl.sgd_step(p, p, 1.0).values.any()
    out = fl.sgd_step(p, u, 0.3).values
    assert all(out[i] == p.values[i] - 0.3 * u.values[i] for i in range(6))
    with pytest.raises(ValueError):
        fl.sgd_step(p, models.linear_head(3, 2).empty_params(), 0.1)


def test_one_client_one_batch_round_is_plain_sgd():
    spec, params, batch = linear_case(4, B=3)
    client = fl.ClientState(0, [batch])
    res = fl.run_round(spec, params, [client], lr=0.5)
    g = fl.client_gradient(spec, params, batch).batch_grad
    assert np.array_equal(res.params_out.values, params.values - 0.5 * g.values)


def test_client_size_invariant():
    _, _, batch = linear_case(0, B=2)
    with pytest.raises(ValueError):
        fl.ClientState(0, [batch, batch], size=3)
    assert fl.ClientState(1, [batch, batch]).size == 4


def test_capture_roundtrip(tmp_path):
    spec = models.mlp(3, 4, 2)
    params = models.init(spec, "xavier", 0)
    batch = Batch(np.random.default_rng(0).uniform(size=(3, 3)), [0, 1, 1], 2)
    cap = fl.client_gradient(spec, params, batch, True, round=2, client_id=5, batch_index=7)
    stem = fl.save_capture(tmp_path, cap)
    assert stem.name == "grad_r002_c005_b007"
    back = fl.load_capture(stem, spec)
    assert np.array_equal(back.batch_grad.values, cap.batch_grad.values)
    assert back.labels == cap.labels and back.round == 2 and back.client_id == 5
    assert all(np.array_equal(a.values, b.values) for a, b in zip(back.per_sample, cap.per_sample))
    hdr = (tmp_path / "grad_r002_c005_b007.hdr").read_text()
    assert "params = 26" in hdr and "B = 3" in hdr
