import math
import warnings

import numpy as np
import pytest
from scipy import stats

from invtransfer.exceptions import SingleTask, TooFewSamples
from invtransfer.invariance import (
    KernelConfig,
    gaussian_block_sums,
    hsic_d_sample_test,
    hsic_statistic,
    levene_test,
    median_pairwise_distance,
    resolve_bandwidth,
    run_test,
)
from invtransfer.invariance import _hsic_parts
from invtransfer.regression import ResidualSample


def _dense_oracle(x, labels, bw):
    """Textbook O(n^2) HSIC pieces via explicit centered Gram matrices."""
    n = len(x)
    K = np.exp(-((x[:, None] - x[None, :]) ** 2) / (2 * bw * bw))
    L = (labels[:, None] == labels[None, :]).astype(float)
    H = np.eye(n) - 1.0 / n
    Kc, Lc = H @ K @ H, H @ L @ H
    stat = 0.0
    for i in range(n):
        for j in range(n):
            stat += Kc[i, j] * L[i, j]
    stat /= n * n
    B = (Kc * Lc / 6.0) ** 2
    var = (B.sum() - np.trace(B)) / n / (n - 1)
    var *= 72 * (n - 4) * (n - 5) / (n * (n - 1) * (n - 2) * (n - 3))
    mk = (K.sum() - np.trace(K)) / n / (n - 1)
    ml = (L.sum() - np.trace(L)) / n / (n - 1)
    mean = (1 + mk * ml - mk - ml) / n
    return stat, mean, var


def _sample(n_per, D, seed, shift=0.0):
    rng = np.random.default_rng(seed)
    r = np.concatenate([rng.normal(scale=1 + shift * k, size=n_per) for k in range(D)])
    return ResidualSample(r, np.repeat(np.arange(1, D + 1), n_per))


@pytest.mark.parametrize("seed", range(5))
def test_statistic_and_moments_match_dense_oracle(seed):
    s = _sample(40, 3, seed, shift=0.3)
    bw = resolve_bandwidth(s.residuals, KernelConfig())
    stat, mean, var = _dense_oracle(s.residuals, s.task_labels, bw)
    parts = _hsic_parts(s, KernelConfig())
    assert parts.statistic == pytest.approx(stat, abs=1e-12)
    assert parts.null_mean == pytest.approx(mean, rel=1e-10)
    assert parts.null_var == pytest.approx(var, rel=1e-8)


def test_unequal_task_sizes_match_oracle():
    rng = np.random.default_rng(3)
    r = rng.normal(size=57)
    labels = np.r_[np.full(10, 4), np.full(30, 7), np.full(17, 9)]
    s = ResidualSample(r, labels)
    stat, mean, var = _dense_oracle(r, labels, 0.8)
    parts = _hsic_parts(s, KernelConfig(0.8))
    assert parts.statistic == pytest.approx(stat, abs=1e-12)
    assert parts.null_var == pytest.approx(var, rel=1e-8)


def test_taylor_block_sums_match_dense():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(size=1500), rng.standard_t(3, size=1500)])
    labels = rng.integers(0, 4, size=x.size)
    inv_h = 1.0 / (2 * resolve_bandwidth(x, KernelConfig()) ** 2)
    a = gaussian_block_sums(x, labels, 4, inv_h, "dense")
    b = gaussian_block_sums(x, labels, 4, inv_h, "taylor")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-10)


def test_median_pairwise_distance_exact():
    rng = np.random.default_rng(1)
    for n in (2, 3, 10, 101):
        x = rng.normal(size=n)
        i, j = np.triu_indices(n, 1)
        d = np.abs(x[i] - x[j])
        assert median_pairwise_distance(x) == pytest.approx(np.median(d[d > 0]), abs=1e-15)
    assert median_pairwise_distance(np.array([1.0, 1.0, 3.0])) == 2.0
    assert median_pairwise_distance(np.ones(5)) == 0.0


def test_bandwidth_sets_median_exponent_to_one():
    x = np.random.default_rng(2).normal(size=50)
    bw = resolve_bandwidth(x, KernelConfig())
    assert median_pairwise_distance(x) ** 2 / (2 * bw * bw) == pytest.approx(1.0)


def test_constant_residuals_degenerate():
    s = ResidualSample(np.zeros(20), np.repeat([1, 2], 10))
    out = hsic_d_sample_test(s)
    assert out.statistic == 0.0 and out.p_value == 1.0 and out.accepted


def test_errors():
    with pytest.raises(SingleTask):
        hsic_d_sample_test(ResidualSample(np.arange(10.0), np.ones(10)))
    with pytest.raises(TooFewSamples):
        hsic_d_sample_test(ResidualSample(np.arange(3.0), np.array([1, 2, 1])))
    with pytest.raises(SingleTask):
        levene_test(ResidualSample(np.arange(10.0), np.ones(10)))
    with pytest.raises(TooFewSamples):
        levene_test(ResidualSample(np.arange(5.0), np.array([1, 2, 2, 2, 2])))
    with pytest.raises(ValueError):
        run_test(_sample(10, 2, 0), "ks", 0.05)


def test_obvious_shift_rejected_and_p_value_range():
    rng = np.random.default_rng(5)
    r = np.r_[rng.normal(size=200), rng.normal(3.0, 1.0, size=200)]
    out = hsic_d_sample_test(ResidualSample(r, np.repeat([1, 2], 200)))
    assert out.p_value < 1e-6 and not out.accepted
    for seed in range(5):
        p = hsic_d_sample_test(_sample(30, 3, seed)).p_value
        assert 0.0 <= p <= 1.0


def test_variance_change_detected():
    out = hsic_d_sample_test(_sample(300, 2, 0, shift=2.0))
    assert out.p_value < 1e-4


def test_gamma_p_value_close_to_permutation():
    rng = np.random.default_rng(9)
    s = _sample(60, 3, 11, shift=0.15)
    stat = hsic_statistic(s)
    perm = [hsic_statistic(ResidualSample(s.residuals, rng.permutation(s.task_labels))) for _ in range(2000)]
    p_perm = (1 + sum(v >= stat for v in perm)) / 2001
    assert hsic_d_sample_test(s).p_value == pytest.approx(p_perm, abs=0.05)


def test_statistic_invariant_to_label_names_and_order():
    s = _sample(25, 3, 4, shift=0.2)
    relabeled = ResidualSample(s.residuals, s.task_labels * 10 + 3)
    assert hsic_statistic(relabeled) == pytest.approx(hsic_statistic(s), abs=1e-15)
    perm = np.random.default_rng(0).permutation(s.n)
    shuffled = ResidualSample(s.residuals[perm], s.task_labels[perm])
    assert hsic_statistic(shuffled) == pytest.approx(hsic_statistic(s), abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_levene_matches_scipy(seed):
    s = _sample(30 + seed, 3, seed, shift=0.4)
    groups = [s.residuals[s.task_labels == k] for k in (1, 2, 3)]
    ref = stats.levene(*groups, center="mean")
    out = levene_test(s)
    assert out.statistic == pytest.approx(ref.statistic, rel=1e-10)
    assert out.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_levene_identical_variances_accepts():
    base = np.array([-1.0, 1.0, -2.0, 2.0])
    out = levene_test(ResidualSample(np.r_[base, base + 5], np.repeat([1, 2], 4)))
    assert out.statistic == 0.0 and out.p_value == 1.0


def test_outcome_level():
    out = run_test(_sample(50, 2, 1), "levene", 0.05)
    assert out.at_level(1 - 1e-12).accepted is False
    assert out.at_level(1e-300).accepted is (out.p_value > 1e-300)
    assert not math.isnan(out.statistic)


def test_no_warning_in_regular_case():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        hsic_d_sample_test(_sample(50, 2, 3))
