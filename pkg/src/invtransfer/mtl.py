"""Multi-task estimation with a known invariant set.

Training-task rows only reveal ``(X_S, Y)``; the remaining features ``X_N``
are treated as missing there and a joint Gaussian over ``(X_S, X_N, Y)`` is
fitted by maximizing the observed-data likelihood with EM.  Regression
coefficients are then read off the fitted joint covariance.

Rows are grouped by observation pattern and EM runs on per-pattern
sufficient statistics, so an iteration costs O(p^3) regardless of the
number of rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .core import LinearPredictor, MultiTaskDataset, SubsetMask, TaskSample
from .exceptions import (
    InfeasibleConstraints,
    NoTestTask,
    NotPositiveDefinite,
    SingularM,
    TooFewSamples,
)

LOG_2PI = math.log(2.0 * math.pi)
INIT_JITTER = 1e-3
MIN_EIG = 1e-8


@dataclass(frozen=True)
class EmOptions:
    tol: float = 1e-8
    max_iter: int = 500
    use_unlabeled: bool = False


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """Joint Gaussian over ``(X_S, X_N, Y)`` in that coordinate order.

    ``ordering`` lists the 1-based feature index of each coordinate with
    ``0`` standing for the target, so ``ordering[-1] == 0``.
    """

    ordering: tuple[int, ...]
    s_size: int
    mean: np.ndarray
    sigma: np.ndarray
    loglik_trace: tuple[float, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.ordering)

    @property
    def roles(self) -> list[str]:
        out = []
        for pos, j in enumerate(self.ordering):
            if j == 0:
                out.append("y")
            else:
                out.append(("xs" if pos < self.s_size else "xn") + str(j))
        return out


@dataclass(frozen=True, eq=False)
class PatternBlock:
    """Sufficient statistics of all rows sharing one observation pattern."""

    name: str
    observed: np.ndarray  # coordinate positions in model order
    n: int
    t1: np.ndarray  # sum of rows
    t2: np.ndarray  # sum of outer products
    center: np.ndarray  # row mean
    root: np.ndarray  # R with R^T R = sum of outer products about the row mean


@dataclass(frozen=True, eq=False)
class ObservedData:
    ordering: tuple[int, ...]
    s_size: int
    blocks: tuple[PatternBlock, ...]

    @property
    def n(self) -> int:
        return sum(b.n for b in self.blocks)

    @property
    def dim(self) -> int:
        return len(self.ordering)

    def block(self, name: str) -> PatternBlock | None:
        for b in self.blocks:
            if b.name == name:
                return b
        return None


def model_ordering(subset: SubsetMask, p: int) -> tuple[int, ...]:
    return subset.indices + subset.complement(p).indices + (0,)


def _pattern(name: str, rows: np.ndarray, observed: np.ndarray) -> PatternBlock:
    rows = np.asarray(rows, dtype=float)
    center = rows.mean(axis=0)
    root = linalg.qr(rows - center, mode="r", check_finite=False)[0]
    return PatternBlock(name, observed, rows.shape[0], rows.sum(axis=0), rows.T @ rows, center, root)


def observed_data_from_arrays(
    subset: SubsetMask,
    p: int,
    train: tuple[np.ndarray, np.ndarray] | None,
    test: tuple[np.ndarray, np.ndarray] | None,
    unlabeled: np.ndarray | None = None,
) -> ObservedData:
    """Group raw rows (full ``p``-column feature matrices) into patterns.

    ``train`` rows contribute ``(X_S, Y)``, ``test`` rows everything and
    ``unlabeled`` rows ``(X_S, X_N)``.
    """
    subset.check(p)
    ordering = model_ordering(subset, p)
    cols = np.array(ordering[:-1], dtype=int) - 1
    s = len(subset)
    dim = p + 1
    blocks = []
    if train is not None and train[1].shape[0]:
        X, y = train
        obs = np.r_[np.arange(s), dim - 1]
        blocks.append(_pattern("train", np.column_stack([X[:, cols[:s]], y]), obs))
    if test is not None and test[1].shape[0]:
        X, y = test
        blocks.append(_pattern("test", np.column_stack([X[:, cols], y]), np.arange(dim)))
    if unlabeled is not None and unlabeled.shape[0]:
        blocks.append(_pattern("unlabeled", unlabeled[:, cols], np.arange(dim - 1)))
    return ObservedData(ordering, s, tuple(blocks))


def build_observed_data(
    dataset: MultiTaskDataset,
    subset: SubsetMask,
    test_task_id: int,
    use_unlabeled: bool = False,
) -> ObservedData:
    """Pool every training task with the test task's labeled (and unlabeled) rows."""
    test_lab = dataset.sample(test_task_id, labeled=True)
    test_unl = dataset.sample(test_task_id, labeled=False)
    if test_lab is None and test_unl is None:
        raise NoTestTask(f"task {test_task_id} not present")
    train = [t for t in dataset.labeled_tasks() if t.task_id != test_task_id]
    tr = None
    if train:
        tr = (np.vstack([t.features for t in train]), np.concatenate([t.targets for t in train]))
    te = None if test_lab is None else (test_lab.features, test_lab.targets)
    un = test_unl.features if (use_unlabeled and test_unl is not None) else None
    return observed_data_from_arrays(subset, dataset.p, tr, te, un)


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{what} is not positive definite") from exc


def _block_loglik(L: np.ndarray, mu_o: np.ndarray, b: PatternBlock) -> float:
    # trace(Sigma^-1 scatter) as a sum of squares: no cancellation even for
    # badly conditioned Sigma
    d = b.center - mu_o
    F = np.column_stack([b.root.T, math.sqrt(b.n) * d])
    W = linalg.solve_triangular(L, F, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (b.n * (L.shape[0] * LOG_2PI + logdet) + float(np.sum(W * W)))


def observed_loglik(model: CovarianceModel, data: ObservedData) -> float:
    """Sum over rows of the Gaussian log-density of each row's observed part."""
    total = 0.0
    for b in data.blocks:
        o = b.observed
        L = _cholesky(model.sigma[np.ix_(o, o)], f"observed block '{b.name}'")
        total += _block_loglik(L, model.mean[o], b)
    return float(total)


def _expected_moments(model: CovarianceModel, data: ObservedData):
    """E-step: expected sums of z and z z^T plus the current log-likelihood."""
    dim = model.dim
    mu, sig = model.mean, model.sigma
    sz = np.zeros(dim)
    szz = np.zeros((dim, dim))
    ll = 0.0
    for b in data.blocks:
        o = b.observed
        m = np.setdiff1d(np.arange(dim), o)
        L = _cholesky(sig[np.ix_(o, o)], f"observed block '{b.name}'")
        ll += _block_loglik(L, mu[o], b)
        if m.size == 0:
            sz += b.t1
            szz += b.t2
            continue
        # B = Sigma_MO Sigma_OO^{-1}
        B = linalg.cho_solve((L, True), sig[np.ix_(o, m)], check_finite=False).T
        C = sig[np.ix_(m, m)] - B @ sig[np.ix_(o, m)]
        c = mu[m] - B @ mu[o]
        BT1 = B @ b.t1
        sz[o] += b.t1
        sz[m] += b.n * c + BT1
        szz[np.ix_(o, o)] += b.t2
        cross = np.outer(c, b.t1) + B @ b.t2
        szz[np.ix_(m, o)] += cross
        szz[np.ix_(o, m)] += cross.T
        szz[np.ix_(m, m)] += (
            b.n * (np.outer(c, c) + C) + np.outer(c, BT1) + np.outer(BT1, c) + B @ b.t2 @ B.T
        )
    return sz, szz, float(ll)


def _m_step(sz: np.ndarray, szz: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    mu = sz / n
    S = szz / n - np.outer(mu, mu)
    return mu, 0.5 * (S + S.T)


def em_step(model: CovarianceModel, data: ObservedData) -> CovarianceModel:
    """One EM iteration; the log-likelihood of the input model is appended to the trace."""
    sz, szz, ll = _expected_moments(model, data)
    mu, S = _m_step(sz, szz, data.n)
    _cholesky(S, "updated covariance")
    return CovarianceModel(model.ordering, model.s_size, mu, S, model.loglik_trace + (ll,))


def initial_model(data: ObservedData) -> CovarianceModel:
    """Moments of the labeled test rows, ridged when they cannot be full rank."""
    test = data.block("test")
    if test is None or test.n < 2:
        raise TooFewSamples("EM initialization needs at least 2 labeled test rows")
    mu, S = _m_step(test.t1, test.t2, test.n)
    dim = data.dim
    if test.n <= dim:
        S = S + INIT_JITTER * (np.trace(S) / dim) * np.eye(dim)
    try:
        linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        S = S + INIT_JITTER * max(np.trace(S) / dim, 1.0) * np.eye(dim)
        _cholesky(S, "initial covariance")
    return CovarianceModel(data.ordering, data.s_size, mu, S)


def run_em(data: ObservedData, opts: EmOptions = EmOptions(), model: CovarianceModel | None = None):
    model = initial_model(data) if model is None else model
    prev = None
    for _ in range(opts.max_iter):
        model = em_step(model, data)
        ll = model.loglik_trace[-1]
        if prev is not None and abs(ll - prev) <= opts.tol * abs(prev):
            break
        prev = ll
    final = observed_loglik(model, data)
    return CovarianceModel(model.ordering, model.s_size, model.mean, model.sigma, model.loglik_trace + (final,))


def coefficients_from_covariance(model: CovarianceModel) -> LinearPredictor:
    """Regression of the target on all features implied by the joint model."""
    y = model.dim - 1
    Sxx = model.sigma[:y, :y]
    try:
        c = linalg.cho_factor(Sxx, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("feature block of the covariance is not positive definite") from exc
    beta = linalg.cho_solve(c, model.sigma[:y, y], check_finite=False)
    intercept = model.mean[y] - beta @ model.mean[:y]
    order = np.array(model.ordering[:y], dtype=int)
    perm = np.argsort(order)
    return LinearPredictor(SubsetMask(order[perm]), beta[perm], intercept)


def em_fit(
    dataset: MultiTaskDataset,
    subset: SubsetMask,
    test_task_id: int | None = None,
    opts: EmOptions = EmOptions(),
) -> tuple[CovarianceModel, LinearPredictor]:
    """Fit the joint model by EM and return it with the implied predictor.

    The predictor uses every feature; with ``subset`` equal to all features
    nothing is missing and the fit reduces to pooled full-feature moments.
    """
    test_task_id = dataset.test_task_id if test_task_id is None else test_task_id
    if test_task_id is None:
        raise NoTestTask("no test task given")
    data = build_observed_data(dataset, subset, test_task_id, opts.use_unlabeled)
    model = run_em(data, opts)
    return model, coefficients_from_covariance(model)


# --------------------------------------------------------------------------
# naive plug-in estimator


@dataclass(frozen=True)
class PluginOptions:
    """Optional population blocks replacing the test-sample estimates.

    ``sigma_x`` is the covariance of all features in original order,
    ``cov_xs_y`` the covariance of ``X_S`` with the target and ``var_y`` the
    target variance.  ``intercept`` fixes ``E[Y] - alpha^T E[X_S]``.
    """

    sigma_x: np.ndarray | None = None
    cov_xs_y: np.ndarray | None = None
    var_y: float | None = None
    intercept: float | None = None
    max_fev: int = 2000


def _min_eig(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(S)[0])


def naive_plugin_fit(
    labeled: TaskSample | None,
    unlabeled: TaskSample | None,
    subset: SubsetMask,
    alpha: Sequence[float],
    eps_var: float,
    opts: PluginOptions = PluginOptions(),
) -> LinearPredictor:
    """Plug known invariant coefficients into test-task moments, repair to PD, refine.

    Only ``Cov(X_N, Y)`` is free.  It starts from the labeled test moments,
    is shrunk toward the feasible centre ``Sigma_NS Sigma_SS^{-1} Cov(X_S, Y)``
    until the joint matrix is positive definite, and is then refined by
    Nelder-Mead on the observed-data likelihood of the test rows.
    """
    parts = [t for t in (labeled, unlabeled) if t is not None and t.n > 0]
    if not parts:
        raise NoTestTask("naive plug-in needs test-task rows")
    p = parts[0].p
    subset.check(p)
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.shape[0] != len(subset):
        raise ValueError("alpha must have one entry per invariant feature")
    ordering = model_ordering(subset, p)
    cols = np.array(ordering[:-1], dtype=int) - 1
    s = len(subset)
    dim = p + 1
    Xall = np.vstack([t.features for t in parts])[:, cols]
    mu_x = Xall.mean(axis=0)
    if opts.sigma_x is not None:
        Sx = np.asarray(opts.sigma_x, dtype=float)[np.ix_(cols, cols)]
    else:
        Sx = np.cov(Xall, rowvar=False, bias=True).reshape(p, p)
    Sss = Sx[:s, :s]
    c_s = Sss @ alpha if opts.cov_xs_y is None else np.asarray(opts.cov_xs_y, dtype=float)
    var_y = alpha @ Sss @ alpha + eps_var if opts.var_y is None else float(opts.var_y)

    if opts.intercept is not None:
        intercept = opts.intercept
    elif labeled is not None and labeled.n:
        intercept = float(np.mean(labeled.targets - labeled.features[:, cols[:s]] @ alpha))
    else:
        intercept = 0.0
    mean = np.r_[mu_x, intercept + alpha @ mu_x[:s]]

    def assemble(c_n: np.ndarray) -> np.ndarray:
        S = np.empty((dim, dim))
        S[:p, :p] = Sx
        S[:p, p] = S[p, :p] = np.r_[c_s, c_n]
        S[p, p] = var_y
        return S

    if s == p:
        # nothing free: read coefficients straight off the fixed blocks
        return coefficients_from_covariance(
            CovarianceModel(ordering, s, mean, assemble(np.zeros(0)))
        )

    Sns = Sx[s:, :s]
    if s:
        try:
            center = Sns @ linalg.solve(Sss, c_s, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise InfeasibleConstraints("invariant-feature covariance is singular") from exc
    else:
        center = np.zeros(p)
    if _min_eig(assemble(center)) < MIN_EIG:
        raise InfeasibleConstraints("fixed covariance blocks admit no positive definite completion")

    if labeled is not None and labeled.n >= 2:
        Xl = labeled.features[:, cols[s:]]
        start = (Xl - Xl.mean(axis=0)).T @ (labeled.targets - labeled.targets.mean()) / labeled.n
    else:
        start = center.copy()
    t = 1.0
    c0 = start
    while _min_eig(assemble(c0)) < MIN_EIG:
        t *= 0.5
        c0 = center + t * (start - center)
        if t < 1e-12:
            c0 = center
            break

    te = None if labeled is None else (labeled.features, labeled.targets)
    un = None if unlabeled is None else unlabeled.features
    data = observed_data_from_arrays(subset, p, None, te, un)

    def objective(c_n: np.ndarray) -> float:
        S = assemble(c_n)
        try:
            return -observed_loglik(CovarianceModel(ordering, s, mean, S), data)
        except NotPositiveDefinite:
            return math.inf

    scale = 0.1 * np.sqrt(np.diag(Sx)[s:] * var_y)
    simplex = np.vstack([c0, c0 + np.diag(scale)])
    res = optimize.minimize(
        objective,
        c0,
        method="Nelder-Mead",
        options={"initial_simplex": simplex, "maxfev": opts.max_fev, "xatol": 1e-10, "fatol": 1e-12},
    )
    best = res.x if objective(res.x) <= objective(c0) else c0
    return coefficients_from_covariance(CovarianceModel(ordering, s, mean, assemble(best)))


# --------------------------------------------------------------------------
# analytic optimum


def analytic_beta_opt(
    alpha: Sequence[float],
    eps_var: float,
    gamma: Sequence[float],
    Sigma_N: np.ndarray,
    Sigma_XS: np.ndarray,
    Sigma_XN: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Test-task optimal coefficients when ``X_N = gamma Y + eta``.

    ``Sigma_N`` is the covariance of ``eta``, ``Sigma_XS`` that of ``X_S``
    and ``Sigma_XN`` the cross-covariance of ``X_S`` with ``eta``; the noise
    ``eps`` of ``Y`` given ``X_S`` is uncorrelated with ``X_S`` and ``eta``.
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    Sigma_N = np.atleast_2d(np.asarray(Sigma_N, dtype=float))
    Sigma_XS = np.atleast_2d(np.asarray(Sigma_XS, dtype=float))
    Sigma_XN = np.asarray(Sigma_XN, dtype=float).reshape(alpha.shape[0], gamma.shape[0])
    A = linalg.solve(Sigma_XS, Sigma_XN, assume_a="pos")
    M = eps_var * np.outer(gamma, gamma) + Sigma_N - Sigma_XN.T @ A
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > 1e14:
        raise SingularM("M is singular")
    beta_n = eps_var * linalg.solve(M, gamma, check_finite=False)
    beta_s = alpha * (1.0 - gamma @ beta_n) - A @ beta_n
    return beta_s, beta_n
