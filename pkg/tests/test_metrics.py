import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gleak import eggv, fl, metrics, models
from gleak.models import Batch

from oracles import ssim_moments


def per_sample(spec, params, x, y):
    cap = fl.client_gradient(spec, params, Batch(x, y, spec.num_classes), capture_per_sample=True)
    return cap.per_sample


@pytest.mark.parametrize("B", [2, 4, 8])
def test_dsnr_identical_samples(B):
    spec = models.mlp(5, 7, 3)
    params = models.init(spec, "xavier", 0)
    x = np.tile(np.random.default_rng(0).uniform(size=(1, 5)), (B, 1))
    rep = metrics.d_snr(per_sample(spec, params, x, [1] * B), spec)
    assert rep.value == pytest.approx(1 / (B - 1), rel=1e-12)
    assert not rep.degenerate


def test_dsnr_norms_three_one_one():
    spec = models.linear_head(1, 1 + 1)
    grads = [spec.empty_params().with_segment("layer0.weight", [[v, 0.0]]) for v in (3.0, 1.0, -1.0)]
    rep = metrics.d_snr(grads, spec)
    assert rep.value == 1.5
    assert rep.argmax_layer == "layer0.weight"


def test_dsnr_degenerate_flag():
    spec = models.linear_head(1, 2)
    grads = [spec.empty_params().with_segment("layer0.weight", [[2.0, 0.0]]),
             spec.empty_params()]
    rep = metrics.d_snr(grads, spec)
    assert math.isinf(rep.value) and rep.degenerate


def test_dsnr_rejects_single_sample():
    spec = models.linear_head(2, 2)
    with pytest.raises(ValueError):
        metrics.d_snr([spec.empty_params()], spec)


def test_dsnr_against_loop_oracle():
    spec = models.mlp(6, 5, 3)
    params = models.init(spec, "he", 1)
    rng = np.random.default_rng(1)
    grads = per_sample(spec, params, rng.uniform(size=(5, 6)), rng.integers(0, 3, 5))
    best = 0.0
    for name in ("layer0.weight", "layer1.weight"):
        norms = [math.sqrt(sum(v * v for v in g.get(name).ravel())) for g in grads]
        best = max(best, max(norms) / (sum(norms) - max(norms)))
    rep = metrics.d_snr(grads, spec)
    assert rep.value == pytest.approx(best, rel=1e-12)
    assert rep.value == max(rep.per_layer.values())
    assert all(v >= 0 for v in rep.per_layer.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)), st.floats(1e-3, 1e3))
def test_dsnr_order_and_scale_invariant(seed, perm, scale):
    spec = models.mlp(4, 5, 3)
    params = models.init(spec, "xavier", seed)
    rng = np.random.default_rng(seed)
    grads = per_sample(spec, params, rng.uniform(size=(4, 4)), rng.integers(0, 3, 4))
    base = metrics.d_snr(grads, spec).value
    shuffled = metrics.d_snr([grads[i] for i in perm], spec).value
    scaled = metrics.d_snr([g.replace(g.values * scale) for g in grads], spec).value
    assert abs(shuffled - base) <= 1e-12 * base
    assert abs(scaled - base) <= 1e-12 * base


def test_fishing_raises_dsnr_over_random_init():
    spec = models.mlp(16, 32, 4)
    base = models.init(spec, "random", 0)
    fish = eggv.fishing_baseline_poison(spec, base, target_class=0, seed=0)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.uniform(size=(4, 16))
        y = [0, 1, 2, 3]
        assert (metrics.d_snr(per_sample(spec, fish, x, y), spec).value
                > metrics.d_snr(per_sample(spec, base, x, y), spec).value)


def test_variance_identical_and_one_three():
    spec = models.linear_head(1, 1 + 1)
    a = spec.empty_params().replace([1.0, 0, 0, 0])
    b = spec.empty_params().replace([0, 3.0, 0, 0])
    assert metrics.grad_norm_variance([a, a, a]) == (0.0, 1.0)
    assert metrics.grad_norm_variance([a, b]) == (1.0, 2.0)


def test_variance_two_pass_oracle():
    vecs = np.random.default_rng(0).normal(size=(7, 11))
    norms = [math.sqrt(sum(v * v for v in row)) for row in vecs]
    mu = sum(norms) / len(norms)
    var = sum((n - mu) ** 2 for n in norms) / len(norms)
    got_var, got_mu = metrics.grad_norm_variance(list(vecs))
    assert got_var == pytest.approx(var, rel=1e-12)
    assert got_mu == pytest.approx(mu, rel=1e-12)


def test_psnr_cases():
    x = np.random.default_rng(0).uniform(size=16)
    assert metrics.psnr(x, x) == 100.0
    assert metrics.psnr(np.full(16, 0.6), np.full(16, 0.5)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros(3), np.zeros(4))


def test_psnr_direct_formula():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=20), rng.uniform(size=20)
    m = sum((u - v) ** 2 for u, v in zip(a, b)) / 20
    assert metrics.psnr(a, b) == pytest.approx(10 * math.log10(1 / m), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_psnr_decreases_with_error(e1, e2):
    if abs(e1 - e2) < 1e-6:
        return
    x = np.full(9, 0.5)
    lo, hi = sorted((e1, e2))
    assert metrics.psnr(x + lo, x) > metrics.psnr(x + hi, x)


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=16)
    assert metrics.ssim(x, x, (4, 4)) == pytest.approx(1.0, abs=1e-15)


def test_ssim_constant_images_closed_form():
    # zero variance everywhere: only the luminance and constant terms survive
    a, b = np.full(16, 0.2), np.full(16, 0.8)
    c1 = 0.01**2
    expected = (2 * 0.2 * 0.8 + c1) / (0.2**2 + 0.8**2 + c1)
    assert metrics.ssim(a, b, (4, 4)) == pytest.approx(expected, rel=1e-12)


def test_ssim_rejects_mismatch():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros(16), np.zeros(9))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros(16), np.zeros(16), (3, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_matches_moment_formula_and_range(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=16), rng.uniform(size=16)
    s = metrics.ssim(a, b, (4, 4))
    assert s == pytest.approx(ssim_moments(a, b), rel=1e-10, abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_greedy_alignment_recovers_permutation():
    rng = np.random.default_rng(0)
    truth = rng.uniform(size=(5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    hat = np.empty_like(truth)
    hat[perm] = truth + rng.normal(0, 0.01, truth.shape)
    assert np.array_equal(metrics.greedy_alignment(hat, truth), perm)


def test_pruned_mean():
    assert metrics.pruned_mean([1.0, 5.0, 2.0, 3.0]) == 2.5
    assert metrics.pruned_mean([4.0, 6.0]) == 5.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_quality_report_ordering(seed, B):
    rng = np.random.default_rng(seed)
    rep = metrics.quality_report(rng.uniform(size=(B, 16)), rng.uniform(size=(B, 16)), (4, 4))
    assert rep.min_psnr <= rep.pruned_psnr <= rep.max_psnr
    assert all(-1 <= s <= 1 for s in rep.per_sample_ssim)


def test_table_psnr_maps_unreconstructed_to_zero():
    x = np.random.default_rng(0).uniform(size=(2, 4))
    rep = metrics.quality_report(x, x, reconstructed=False)
    assert metrics.table_psnr(rep) == (0.0, 0.0, 0.0)
    assert metrics.table_psnr(metrics.quality_report(x, x)) == (100.0, 100.0, 100.0)
