"""Seeded generators for the two simulation designs and closed-form errors.

``gen_dg_tasks`` draws Gaussian multi-task data where the first ``s_size``
features form the invariant set and the remaining block depends on the
target through a task-specific coefficient.  ``gen_three_node`` is the small
``X -> Y -> Z`` model for which pooled least squares and its test error are
available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import MultiTaskDataset, TaskSample, make_rng
from .exceptions import DegenerateDenominator, InvalidConfig

# stream keys under a generator seed
_KEY_GLOBAL, _KEY_LAW, _KEY_LABELED, _KEY_UNLABELED, _KEY_FRESH = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class GammaDist:
    """Law of the per-task coefficient linking ``X_N`` to ``Y``.

    ``kind`` is ``student_t`` (``a`` = degrees of freedom), ``uniform``
    (``a``, ``b`` = bounds) or ``normal`` (``a`` = mean, ``b`` = variance).
    """

    kind: str = "student_t"
    a: float = 3.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind == "student_t" and not self.a > 0:
            raise InvalidConfig("student_t needs positive degrees of freedom")
        if self.kind == "uniform" and not self.a <= self.b:
            raise InvalidConfig("uniform bounds must satisfy lo <= hi")
        if self.kind == "normal" and self.b < 0:
            raise InvalidConfig("normal variance must be >= 0")
        if self.kind not in ("student_t", "uniform", "normal"):
            raise InvalidConfig(f"unknown gamma distribution {self.kind!r}")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "student_t":
            return rng.standard_t(self.a, size)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size)
        return self.a + math.sqrt(self.b) * rng.standard_normal(size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


def _check_range(name: str, r: tuple[float, float]) -> None:
    if len(r) != 2 or not r[0] < r[1]:
        raise InvalidConfig(f"{name} must be a nonempty interval, got {r}")


@dataclass(frozen=True)
class DgGenConfig:
    """Design of the multi-task simulation.

    ``u_causal_range`` bounds the entries of the factor of the invariant
    features' covariance, ``u_mix_range`` those of the mixing matrix applied
    to the noise block and ``u_noise_range`` those of the noise block's
    covariance factor.  ``n_test`` and ``n_unlabeled`` size the
    test task's labeled and unlabeled samples (``n_test=None`` means
    ``n_per_task``).  ``n_pure_noise`` appends independent standard normal
    features unrelated to anything.
    """

    s_size: int = 4
    n_size: int = 4
    d_tasks: int = 6
    n_per_task: int = 1000
    eps_std: float = math.sqrt(2.0)
    gamma_dist: GammaDist = field(default_factory=GammaDist)
    u_causal_range: tuple[float, float] = (-2.0, 2.0)
    u_noise_range: tuple[float, float] = (-1.0, 1.0)
    u_mix_range: tuple[float, float] = (-4.0, 4.0)
    alpha_range: tuple[float, float] = (-1.0, 2.5)
    n_test: int | None = None
    n_unlabeled: int = 0
    n_pure_noise: int = 0
    seed: int = 0

    def validate(self) -> None:
        if min(self.s_size, self.n_size, self.n_pure_noise) < 0 or self.p < 1:
            raise InvalidConfig("feature block sizes must be >= 0 with at least one feature")
        if self.d_tasks < 1:
            raise InvalidConfig("d_tasks must be >= 1")
        if self.n_per_task < 1 or (self.n_test is not None and self.n_test < 0) or self.n_unlabeled < 0:
            raise InvalidConfig("sample sizes must be positive")
        if not self.eps_std > 0:
            raise InvalidConfig("eps_std must be positive")
        for name in ("u_causal_range", "u_noise_range", "u_mix_range", "alpha_range"):
            _check_range(name, getattr(self, name))

    @property
    def p(self) -> int:
        return self.s_size + self.n_size + self.n_pure_noise


@dataclass(frozen=True, eq=False)
class TaskLaw:
    """Parameters of one task; ``sample`` draws i.i.d. rows from it."""

    task_id: int
    alpha: np.ndarray
    eps_std: float
    causal_factor: np.ndarray  # Sigma_S = F F^T
    noise_factor: np.ndarray  # Sigma_eta = G G^T
    mix: np.ndarray  # X_N = gamma Y + (I + mix) eta
    gamma: np.ndarray
    n_pure_noise: int = 0

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        s, m = self.causal_factor.shape[0], self.noise_factor.shape[0]
        xs = rng.standard_normal((n, s)) @ self.causal_factor.T
        y = xs @ self.alpha + self.eps_std * rng.standard_normal(n)
        eta = rng.standard_normal((n, m)) @ self.noise_factor.T
        xn = np.outer(y, self.gamma) + eta @ (np.eye(m) + self.mix).T
        if self.n_pure_noise:
            return np.hstack([xs, xn, rng.standard_normal((n, self.n_pure_noise))]), y
        return np.hstack([xs, xn]), y

    def covariance(self) -> np.ndarray:
        """Population covariance of ``(X, Y)`` in column order (all means are zero)."""
        s, m = self.causal_factor.shape[0], self.noise_factor.shape[0] + self.n_pure_noise
        Ss = self.causal_factor @ self.causal_factor.T
        q = self.noise_factor.shape[0]
        A = np.eye(q) + self.mix
        Seta = np.eye(m)
        Seta[:q, :q] = A @ self.noise_factor @ self.noise_factor.T @ A.T
        gamma = np.r_[self.gamma, np.zeros(self.n_pure_noise)]
        vy = self.alpha @ Ss @ self.alpha + self.eps_std**2
        cxy = Ss @ self.alpha
        C = np.zeros((s + m + 1, s + m + 1))
        C[:s, :s] = Ss
        C[:s, s : s + m] = np.outer(cxy, gamma)
        C[s : s + m, s : s + m] = vy * np.outer(gamma, gamma) + Seta
        C[:s, -1] = cxy
        C[s : s + m, -1] = vy * gamma
        C[-1, -1] = vy
        return np.triu(C) + np.triu(C, 1).T


def _factor(rng: np.random.Generator, k: int, r: tuple[float, float]) -> np.ndarray:
    return rng.uniform(r[0], r[1], (k, k))


def dg_task_laws(cfg: DgGenConfig) -> tuple[np.ndarray, list[TaskLaw]]:
    """Shared ``alpha`` and the laws of tasks ``1..D`` plus the test task ``D+1``."""
    cfg.validate()
    alpha = make_rng(cfg.seed, _KEY_GLOBAL).uniform(*cfg.alpha_range, cfg.s_size)
    laws = []
    for k in range(1, cfg.d_tasks + 2):
        rng = make_rng(cfg.seed, _KEY_LAW, k)
        causal = _factor(rng, cfg.s_size, cfg.u_causal_range)
        wmix = _factor(rng, cfg.n_size, cfg.u_mix_range)
        noise = _factor(rng, cfg.n_size, cfg.u_noise_range)
        gamma = cfg.gamma_dist.draw(rng, cfg.n_size)
        laws.append(TaskLaw(k, alpha, cfg.eps_std, causal, noise, wmix, gamma, cfg.n_pure_noise))
    return alpha, laws


def gen_dg_tasks(cfg: DgGenConfig) -> MultiTaskDataset:
    """Training tasks ``1..D`` and a test task ``D+1`` with ``metadata`` describing the truth."""
    alpha, laws = dg_task_laws(cfg)
    tasks = []
    for law in laws:
        k = law.task_id
        is_test = k == cfg.d_tasks + 1
        n = cfg.n_per_task if not is_test or cfg.n_test is None else cfg.n_test
        if n > 0:
            X, y = law.sample(make_rng(cfg.seed, _KEY_LABELED, k), n)
            tasks.append(TaskSample(k, X, y))
        if is_test and cfg.n_unlabeled > 0:
            X, _ = law.sample(make_rng(cfg.seed, _KEY_UNLABELED, k), cfg.n_unlabeled)
            tasks.append(TaskSample(k, X, None))
    meta = {
        "generator": "dg",
        "true_subset": list(range(1, cfg.s_size + 1)),
        "alpha": alpha.tolist(),
        "eps_var": cfg.eps_std**2,
        "gammas": {str(law.task_id): law.gamma.tolist() for law in laws},
    }
    return MultiTaskDataset(tasks, cfg.p, test_task_id=cfg.d_tasks + 1, metadata=meta)


def fresh_test_sample(cfg: DgGenConfig, n: int, key: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Independent rows from the test task's law (for population-risk estimates)."""
    _, laws = dg_task_laws(cfg)
    return laws[-1].sample(make_rng(cfg.seed, _KEY_FRESH, key), n)


# --------------------------------------------------------------------------
# three-node model


@dataclass(frozen=True)
class ThreeNodeConfig:
    """``Y = alpha^T X + eps`` with independent ``X_j``, and ``Z = gamma_k Y + eta``.

    ``gammas`` fixes the training-task coefficients; otherwise they are
    drawn from a normal law with ``gamma_mean`` and ``gamma_var``.
    """

    alpha: tuple[float, ...] = (1.0,)
    sigma_x: tuple[float, ...] = (1.0,)
    sigma_eps: float = 1.0
    sigma_eta: float = 1.0
    gamma_mean: float = 0.0
    gamma_var: float = 1.0
    d_tasks: int = 2
    n_per_task: int = 1000
    gammas: tuple[float, ...] | None = None
    seed: int = 0

    @property
    def s_size(self) -> int:
        return len(self.alpha)

    def validate(self) -> None:
        if len(self.sigma_x) != len(self.alpha) or not self.alpha:
            raise InvalidConfig("alpha and sigma_x need the same nonzero length")
        if min(self.sigma_x) <= 0 or self.sigma_eps <= 0 or self.sigma_eta <= 0:
            raise InvalidConfig("standard deviations must be positive")
        if self.gamma_var < 0:
            raise InvalidConfig("gamma_var must be >= 0")
        if self.d_tasks < 1 or self.n_per_task < 1:
            raise InvalidConfig("d_tasks and n_per_task must be >= 1")
        if self.gammas is not None and len(self.gammas) != self.d_tasks:
            raise InvalidConfig("need one gamma per training task")

    @property
    def var_y(self) -> float:
        a = np.asarray(self.alpha)
        return float(a @ (np.asarray(self.sigma_x) ** 2 * a)) + self.sigma_eps**2


def three_node_gammas(cfg: ThreeNodeConfig) -> np.ndarray:
    if cfg.gammas is not None:
        return np.asarray(cfg.gammas, dtype=float)
    rng = make_rng(cfg.seed, _KEY_GLOBAL)
    return cfg.gamma_mean + math.sqrt(cfg.gamma_var) * rng.standard_normal(cfg.d_tasks)


def sample_three_node(
    cfg: ThreeNodeConfig, gamma: float, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(cfg.alpha, dtype=float)
    X = rng.standard_normal((n, a.shape[0])) * np.asarray(cfg.sigma_x)
    y = X @ a + cfg.sigma_eps * rng.standard_normal(n)
    z = gamma * y + cfg.sigma_eta * rng.standard_normal(n)
    return np.column_stack([X, z]), y


def gen_three_node(cfg: ThreeNodeConfig) -> MultiTaskDataset:
    cfg.validate()
    gammas = three_node_gammas(cfg)
    tasks = []
    for k, g in enumerate(gammas, start=1):
        X, y = sample_three_node(cfg, g, cfg.n_per_task, make_rng(cfg.seed, _KEY_LABELED, k))
        tasks.append(TaskSample(k, X, y))
    meta = {
        "generator": "three_node",
        "true_subset": list(range(1, cfg.s_size + 1)),
        "gammas": gammas.tolist(),
    }
    return MultiTaskDataset(tasks, cfg.s_size + 1, metadata=meta)


def pooled_coefficients_closed_form(
    gammas: Sequence[float], cfg: ThreeNodeConfig
) -> tuple[np.ndarray, float]:
    """Population least-squares coefficients on balanced pooled training tasks.

    With ``G1 = sum(gamma)``, ``G2 = sum(gamma^2)``, ``A = alpha^T diag(sx^2) alpha``
    and ``V = A + s^2``, the target coefficient on ``Z`` is
    ``G1 s^2 / (V G2 + D se^2 - G1^2 A / D)`` and the rest is ``(1 - G1 bZ / D) alpha``.
    """
    g = np.asarray(gammas, dtype=float)
    D = g.shape[0]
    if D == 0:
        raise DegenerateDenominator("no training tasks")
    a = np.asarray(cfg.alpha, dtype=float)
    A = float(a @ (np.asarray(cfg.sigma_x, dtype=float) ** 2 * a))
    s2 = cfg.sigma_eps**2
    V = A + s2
    g1, g2 = float(g.sum()), float(g @ g)
    den = V * g2 + D * cfg.sigma_eta**2 - g1 * g1 * A / D
    if not abs(den) > 1e-300 or not math.isfinite(den):
        raise DegenerateDenominator(f"pooled-coefficient denominator is {den}")
    beta_z = g1 * s2 / den
    return (1.0 - g1 * beta_z / D) * a, beta_z


def expected_test_error(
    beta_s: Sequence[float],
    beta_z: float,
    cfg: ThreeNodeConfig,
    gamma_t: float | None = None,
    moments: tuple[float, float] | None = None,
) -> float:
    """Population squared error of ``beta_s^T X + beta_z Z`` on a test task.

    With ``gamma_t`` the error for that coefficient is returned.  Otherwise
    it is averaged over ``gamma_t`` with ``moments = (mean, variance)``,
    defaulting to the config's ``gamma_mean`` and ``gamma_var``.
    """
    b = np.asarray(beta_s, dtype=float)
    a = np.asarray(cfg.alpha, dtype=float)
    d = np.asarray(cfg.sigma_x, dtype=float) ** 2
    V = cfg.var_y
    if gamma_t is not None:
        m1, m2 = float(gamma_t), float(gamma_t) ** 2
    else:
        mu, var = moments if moments is not None else (cfg.gamma_mean, cfg.gamma_var)
        m1, m2 = mu, var + mu * mu
    bDb, aDb = float(b @ (d * b)), float(a @ (d * b))
    return (
        V
        + bDb
        - 2.0 * aDb
        + beta_z**2 * (V * m2 + cfg.sigma_eta**2)
        + 2.0 * beta_z * m1 * aDb
        - 2.0 * beta_z * V * m1
    )


def fig2_draws(
    rng: np.random.Generator, n_draws: int, s_size: int = 3, d_tasks: int = 2
) -> dict[str, np.ndarray]:
    """Random three-node parameters: alpha ~ U(-1, 2.5), variances ~ U(0.5, 2)."""
    return {
        "alpha": rng.uniform(-1.0, 2.5, (n_draws, s_size)),
        "var_x": rng.uniform(0.5, 2.0, (n_draws, s_size)),
        "var_eta": rng.uniform(0.5, 2.0, n_draws),
        "z": rng.standard_normal((n_draws, d_tasks)),  # training gammas in units of Sigma
    }


def pooled_expected_error_batch(
    draws: dict[str, np.ndarray], sigma2_gamma: float, var_eps: float
) -> np.ndarray:
    """Vectorized ``expected_test_error`` of pooled least squares with mean-zero gammas.

    The training coefficients are ``sqrt(sigma2_gamma) * draws['z']``.
    """
    g = math.sqrt(sigma2_gamma) * draws["z"]
    D = g.shape[1]
    a, dx, ve = draws["alpha"], draws["var_x"], draws["var_eta"]
    A = np.sum(a * a * dx, axis=1)
    V = A + var_eps
    g1, g2 = g.sum(axis=1), np.sum(g * g, axis=1)
    den = V * g2 + D * ve - g1 * g1 * A / D
    bz = g1 * var_eps / den
    shrink = 1.0 - g1 * bz / D
    # beta_s = shrink * alpha, so bDb = shrink^2 A and aDb = shrink A
    return V + shrink**2 * A - 2.0 * shrink * A + bz**2 * (V * sigma2_gamma + ve)
