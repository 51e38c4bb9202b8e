import numpy as np
import pytest

from invtransfer.core import SubsetMask, make_rng
from invtransfer.exceptions import DegenerateDenominator, InvalidConfig
from invtransfer.regression import fit_pooled_ols
from invtransfer.synthetic import (
    DgGenConfig,
    GammaDist,
    ThreeNodeConfig,
    dg_task_laws,
    expected_test_error,
    fig2_draws,
    fresh_test_sample,
    gen_dg_tasks,
    gen_three_node,
    pooled_coefficients_closed_form,
    pooled_expected_error_batch,
    sample_three_node,
)


def test_dg_layout_and_metadata():
    cfg = DgGenConfig(s_size=2, n_size=3, d_tasks=4, n_per_task=50, n_test=7, n_unlabeled=5, seed=1)
    ds = gen_dg_tasks(cfg)
    assert ds.p == 5 and ds.test_task_id == 5
    assert [(t.task_id, t.n, t.labeled) for t in ds.tasks][-2:] == [(5, 7, True), (5, 5, False)]
    assert all(t.n == 50 for t in ds.tasks[:4])
    assert ds.metadata["true_subset"] == [1, 2]
    assert len(ds.metadata["alpha"]) == 2 and len(ds.metadata["gammas"]) == 5
    assert ds.metadata["eps_var"] == pytest.approx(2.0)


def test_dg_reproducible_and_seed_sensitive():
    a = gen_dg_tasks(DgGenConfig(n_per_task=20, seed=4))
    b = gen_dg_tasks(DgGenConfig(n_per_task=20, seed=4))
    c = gen_dg_tasks(DgGenConfig(n_per_task=20, seed=5))
    for x, y in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(x.features, y.features)
    assert not np.allclose(a.tasks[0].features, c.tasks[0].features)


def test_dg_task_sizes_do_not_shift_laws():
    small = gen_dg_tasks(DgGenConfig(n_per_task=10, seed=2))
    big = gen_dg_tasks(DgGenConfig(n_per_task=20, seed=2))
    assert small.metadata == big.metadata


def test_alpha_shared_and_gamma_per_task():
    alpha, laws = dg_task_laws(DgGenConfig(seed=3))
    assert all(np.array_equal(l.alpha, alpha) for l in laws)
    assert np.all((alpha >= -1) & (alpha <= 2.5))
    gammas = np.array([l.gamma for l in laws])
    assert len({tuple(g) for g in gammas}) == len(laws)


def test_population_covariance_matches_sample():
    cfg = DgGenConfig(s_size=2, n_size=2, n_pure_noise=1, seed=6)
    _, laws = dg_task_laws(cfg)
    X, y = laws[2].sample(make_rng(0), 400_000)
    emp = np.cov(np.column_stack([X, y]), rowvar=False)
    C = laws[2].covariance()
    assert C.shape == (6, 6)
    scale = np.sqrt(np.outer(np.diag(C), np.diag(C)))
    assert np.max(np.abs(emp - C) / scale) < 0.01


def test_invariant_conditional_across_tasks():
    _, laws = dg_task_laws(DgGenConfig(s_size=3, n_size=2, seed=8))
    coefs = []
    for law in laws:
        C = law.covariance()
        coefs.append(np.linalg.solve(C[:3, :3], C[:3, -1]))
        resid = C[-1, -1] - C[:3, -1] @ coefs[-1]
        assert resid == pytest.approx(2.0)
    for c in coefs:
        np.testing.assert_allclose(c, coefs[0], atol=1e-10)


def test_degenerate_gamma_and_no_mixing_decouples():
    cfg = DgGenConfig(
        s_size=2, n_size=2, d_tasks=1, n_per_task=5000,
        gamma_dist=GammaDist("normal", 0.0, 0.0), u_mix_range=(-1e-300, 1e-300), seed=0,
    )
    t = gen_dg_tasks(cfg).tasks[0]
    for j in (2, 3):
        assert abs(np.corrcoef(t.features[:, j], t.targets)[0, 1]) < 0.1


def test_dg_pure_noise_columns():
    ds = gen_dg_tasks(DgGenConfig(n_per_task=3000, n_pure_noise=3, d_tasks=1, seed=0))
    X = ds.tasks[0].features
    assert X.shape[1] == 11
    np.testing.assert_allclose(X[:, 8:].std(axis=0), 1.0, atol=0.05)


def test_fresh_sample_is_test_law_and_independent():
    cfg = DgGenConfig(n_per_task=10, seed=1)
    X, _ = fresh_test_sample(cfg, 200_000)
    _, laws = dg_task_laws(cfg)
    C = laws[-1].covariance()
    np.testing.assert_allclose(np.var(X[:, 0]), C[0, 0], rtol=0.02)
    X2, _ = fresh_test_sample(cfg, 5, key=1)
    assert not np.allclose(X[:5], X2)


def test_config_validation():
    for bad in (
        {"s_size": -1},
        {"s_size": 0, "n_size": 0},
        {"d_tasks": 0},
        {"n_per_task": 0},
        {"eps_std": 0.0},
        {"u_mix_range": (1.0, -1.0)},
    ):
        with pytest.raises(InvalidConfig):
            gen_dg_tasks(DgGenConfig(**bad))
    with pytest.raises(InvalidConfig):
        GammaDist("cauchy")
    with pytest.raises(InvalidConfig):
        GammaDist("uniform", 2.0, 1.0)
    with pytest.raises(InvalidConfig):
        gen_three_node(ThreeNodeConfig(alpha=(1.0, 2.0)))
    with pytest.raises(InvalidConfig):
        gen_three_node(ThreeNodeConfig(gammas=(1.0,)))


def test_gamma_laws():
    rng = make_rng(0)
    u = GammaDist("uniform", 0.0, 1.5).draw(rng, 10_000)
    assert u.min() >= 0.0 and u.max() <= 1.5
    n = GammaDist("normal", 1.0, 4.0).draw(rng, 100_000)
    assert n.mean() == pytest.approx(1.0, abs=0.03) and n.var() == pytest.approx(4.0, rel=0.03)
    assert GammaDist().to_dict() == {"kind": "student_t", "a": 3.0, "b": 0.0}


# --------------------------------------------------------------------------
# three-node model


def test_three_node_generation():
    cfg = ThreeNodeConfig(alpha=(1.0, -2.0), sigma_x=(1.0, 0.5), gammas=(0.0, 3.0), n_per_task=100, seed=2)
    ds = gen_three_node(cfg)
    assert ds.p == 3 and ds.task_ids == [1, 2]
    assert ds.metadata["gammas"] == [0.0, 3.0]
    assert cfg.var_y == pytest.approx(1.0 + 1.0 + 1.0)


def test_closed_form_matches_large_sample_ols():
    cfg = ThreeNodeConfig(alpha=(1.5, -0.5), sigma_x=(1.0, 2.0), sigma_eps=2.0, sigma_eta=1.2,
                          gammas=(0.5, -1.5, 2.0), d_tasks=3, n_per_task=200_000, seed=3)
    bs, bz = pooled_coefficients_closed_form(cfg.gammas, cfg)
    pred = fit_pooled_ols(gen_three_node(cfg), SubsetMask([1, 2, 3]))
    ref = np.r_[bs, bz]
    assert np.linalg.norm(pred.coefficients - ref) < 0.01 * np.linalg.norm(ref)


def _population_pooled(gammas, cfg):
    """Least squares on the average of the per-task population covariances."""
    a = np.asarray(cfg.alpha)
    dx = np.asarray(cfg.sigma_x) ** 2
    V = cfg.var_y
    s = a.size
    C = np.zeros((s + 2, s + 2))
    for g in gammas:
        T = np.zeros((s + 2, s + 2))
        T[:s, :s] = np.diag(dx)
        T[:s, s] = T[s, :s] = g * dx * a
        T[s, s] = g * g * V + cfg.sigma_eta**2
        T[:s, -1] = T[-1, :s] = dx * a
        T[s, -1] = T[-1, s] = g * V
        T[-1, -1] = V
        C += T / len(gammas)
    return np.linalg.solve(C[:-1, :-1], C[:-1, -1])


@pytest.mark.parametrize("seed", range(10))
def test_closed_form_matches_population_moments(seed):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(1, 4))
    cfg = ThreeNodeConfig(
        alpha=tuple(rng.uniform(-1, 2.5, s)), sigma_x=tuple(rng.uniform(0.5, 2, s)),
        sigma_eps=float(rng.uniform(0.5, 2)), sigma_eta=float(rng.uniform(0.5, 2)),
    )
    gammas = rng.normal(0.3, 1.5, int(rng.integers(1, 6)))
    bs, bz = pooled_coefficients_closed_form(gammas, cfg)
    np.testing.assert_allclose(np.r_[bs, bz], _population_pooled(gammas, cfg), rtol=1e-10, atol=1e-12)


def test_closed_form_special_cases():
    cfg = ThreeNodeConfig(alpha=(2.0,))
    bs, bz = pooled_coefficients_closed_form([0.0, 0.0], cfg)
    assert bz == 0.0 and bs[0] == 2.0
    _, bz = pooled_coefficients_closed_form([1.0, -1.0], cfg)
    assert bz == 0.0
    with pytest.raises(DegenerateDenominator):
        pooled_coefficients_closed_form([], cfg)


def test_expected_error_matches_monte_carlo():
    cfg = ThreeNodeConfig(alpha=(1.0,), sigma_x=(1.5,), sigma_eps=1.0, sigma_eta=0.7)
    bs, bz = np.array([0.6]), 0.3
    X, y = sample_three_node(cfg, 1.7, 1_000_000, make_rng(1))
    mc = np.mean((y - X @ np.r_[bs, bz]) ** 2)
    assert expected_test_error(bs, bz, cfg, gamma_t=1.7) == pytest.approx(mc, rel=0.01)


def test_expected_error_average_is_mixture_of_fixed():
    cfg = ThreeNodeConfig(alpha=(0.5, 1.0), sigma_x=(1.0, 1.0), gamma_mean=0.4, gamma_var=2.0)
    bs, bz = np.array([0.3, 0.8]), -0.2
    g = 0.4 + np.sqrt(2.0) * make_rng(4).standard_normal(400_000)
    fixed = np.array([expected_test_error(bs, bz, cfg, gamma_t=v) for v in g[:2000]])
    avg = expected_test_error(bs, bz, cfg)
    # exact: the error is quadratic in gamma_t, so averaging the moments is exact
    quad = [expected_test_error(bs, bz, cfg, gamma_t=v) for v in (-1.0, 0.0, 1.0)]
    c0, c1, c2 = quad[1], (quad[2] - quad[0]) / 2, (quad[2] + quad[0]) / 2 - quad[1]
    assert avg == pytest.approx(c0 + c1 * 0.4 + c2 * (2.0 + 0.16), rel=1e-12)
    assert fixed.mean() == pytest.approx(c0 + c1 * g[:2000].mean() + c2 * np.mean(g[:2000] ** 2), rel=1e-9)


def test_invariant_predictor_error_is_noise_variance():
    cfg = ThreeNodeConfig(alpha=(1.0, 2.0), sigma_x=(1.0, 0.3), sigma_eps=1.3)
    for g in (-10.0, 0.0, 4.0):
        assert expected_test_error(cfg.alpha, 0.0, cfg, gamma_t=g) == pytest.approx(1.69, abs=1e-12)


def test_batch_matches_scalar_path():
    draws = fig2_draws(make_rng(5), 50, s_size=2, d_tasks=3)
    assert draws["z"].shape == (50, 3)
    out = pooled_expected_error_batch(draws, 0.7, 1.0)
    for i in range(50):
        cfg = ThreeNodeConfig(
            alpha=tuple(draws["alpha"][i]), sigma_x=tuple(np.sqrt(draws["var_x"][i])),
            sigma_eps=1.0, sigma_eta=float(np.sqrt(draws["var_eta"][i])), gamma_var=0.7,
        )
        g = np.sqrt(0.7) * draws["z"][i]
        bs, bz = pooled_coefficients_closed_form(g, cfg)
        assert out[i] == pytest.approx(expected_test_error(bs, bz, cfg), rel=1e-12)
