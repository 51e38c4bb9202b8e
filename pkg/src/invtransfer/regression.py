"""Least-squares fits on pooled tasks, residuals, empirical risk and Lasso screening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import LinearPredictor, MultiTaskDataset, SubsetMask
from .exceptions import InvalidK, NoLabeledData, RankDeficient, UnlabeledTask

RIDGE_JITTER = 1e-10
_RCOND_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ResidualSample:
    residuals: np.ndarray
    task_labels: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=float).ravel()
        k = np.asarray(self.task_labels).ravel().astype(int)
        if r.shape != k.shape:
            raise ValueError("residuals and task_labels differ in length")
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "task_labels", k)

    @property
    def n(self) -> int:
        return self.residuals.shape[0]


def solve_gram(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``G x = b`` for a symmetric PSD Gram matrix.

    A numerically singular ``G`` gets a ridge of ``1e-10 * trace / dim``;
    :class:`RankDeficient` is raised when even that fails.
    """
    d = G.shape[0]
    if d == 0:
        return np.zeros(0)
    scale = np.trace(G) / d
    if not np.isfinite(scale) or scale <= 0:
        raise RankDeficient("Gram matrix is zero")
    try:
        c, low = linalg.cho_factor(G, check_finite=False)
        if np.min(np.diag(c)) ** 2 > _RCOND_FLOOR * np.max(np.diag(G)):
            return linalg.cho_solve((c, low), b, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        c, low = linalg.cho_factor(G + RIDGE_JITTER * scale * np.eye(d), check_finite=False)
    except linalg.LinAlgError as exc:
        raise RankDeficient("Gram matrix singular beyond ridge tolerance") from exc
    return linalg.cho_solve((c, low), b, check_finite=False)


def ols_arrays(X: np.ndarray, y: np.ndarray, subset: SubsetMask) -> LinearPredictor:
    """OLS with intercept of ``y`` on the ``subset`` columns of a full-width ``X``."""
    n = y.shape[0]
    if n < len(subset) + 1:
        raise RankDeficient(f"{n} rows cannot determine {len(subset)} coefficients plus intercept")
    ybar = y.mean()
    if len(subset) == 0:
        return LinearPredictor(subset, np.zeros(0), ybar)
    Xs = X[:, subset.zero_based]
    xbar = Xs.mean(axis=0)
    Xc = Xs - xbar
    beta = solve_gram(Xc.T @ Xc, Xc.T @ (y - ybar))
    return LinearPredictor(subset, beta, ybar - xbar @ beta)


def fit_pooled_ols(dataset: MultiTaskDataset, subset: SubsetMask) -> LinearPredictor:
    """Regress the target on the features in ``subset`` using every labeled row.

    The intercept is always fitted.  The empty subset yields the pooled
    target mean.  Callers decide which tasks are pooled (pass
    ``dataset.training_view()`` to leave the test task out).
    """
    subset.check(dataset.p)
    X, y, _ = dataset.pooled()
    return ols_arrays(X, y, subset)


def fit_domain_only(dataset: MultiTaskDataset, test_task_id: int) -> LinearPredictor:
    """Full-feature OLS on the labeled sample of ``test_task_id`` alone."""
    t = dataset.sample(test_task_id, labeled=True)
    if t is None or t.n == 0:
        raise NoLabeledData(f"no labeled sample for task {test_task_id}")
    return ols_arrays(t.features, t.targets, SubsetMask.full(dataset.p))


def residuals(predictor: LinearPredictor, dataset: MultiTaskDataset) -> ResidualSample:
    out, labels = [], []
    for t in dataset.tasks:
        if not t.labeled:
            raise UnlabeledTask(f"task {t.task_id} sample has no targets")
        out.append(t.targets - predictor.predict(t.features))
        labels.append(np.full(t.n, t.task_id, dtype=int))
    if not out:
        raise NoLabeledData("dataset has no tasks")
    return ResidualSample(np.concatenate(out), np.concatenate(labels))


def empirical_mse(predictor: LinearPredictor, dataset: MultiTaskDataset) -> float:
    """Mean squared residual over all labeled rows (unlabeled samples are skipped)."""
    X, y, _ = dataset.pooled()
    r = y - predictor.predict(X)
    return float(np.mean(r * r))


def _soft(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    n_lambdas: int = 100,
    min_ratio: float = 1e-4,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-descent Lasso path on standardized features.

    Minimizes ``(1/2n)||y - Xb||^2 + lam*||b||_1`` for a geometric grid of
    ``lam`` from the smallest value that zeroes every coefficient down to
    ``min_ratio`` times that value, with warm starts.  Features and target
    are centered (unpenalized intercept) and features scaled to unit
    variance; constant features never enter.  Returns ``(lambdas, coefs)``
    with ``coefs`` of shape ``(n_lambdas, p)`` on the standardized scale.
    """
    n, p = X.shape
    sd = X.std(axis=0)
    live = sd > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - X[:, live].mean(axis=0)) / sd[live]
    yc = y - y.mean()
    G = Z.T @ Z / n
    c = Z.T @ yc / n
    lam_max = float(np.max(np.abs(c))) if p else 0.0
    if lam_max == 0.0:
        return np.zeros(n_lambdas), np.zeros((n_lambdas, p))
    lambdas = lam_max * np.geomspace(1.0, min_ratio, n_lambdas)
    b = np.zeros(p)
    grad = c.copy()  # c - G b, kept current
    coefs = np.empty((n_lambdas, p))
    cols = np.flatnonzero(live)
    for li, lam in enumerate(lambdas):
        for _ in range(max_sweeps):
            max_change = 0.0
            for j in cols:
                old = b[j]
                new = _soft(grad[j] + old, lam)  # G[j, j] == 1
                if new != old:
                    delta = new - old
                    b[j] = new
                    grad -= delta * G[:, j]
                    if abs(delta) > max_change:
                        max_change = abs(delta)
            if max_change < tol:
                break
        coefs[li] = b
    return lambdas, coefs


def lasso_screen(dataset: MultiTaskDataset, k: int) -> SubsetMask:
    """Features active at the smallest path penalty with at most ``k`` of them.

    Walking the path from the largest penalty down, the active set just
    before the first one exceeding ``k`` is returned, so a path that grows
    past ``k`` and later shrinks again resolves to the sparser model.
    """
    p = dataset.p
    if not 1 <= k <= p:
        raise InvalidK(f"k must lie in [1, {p}], got {k}")
    X, y, _ = dataset.pooled()
    if y.shape[0] < 2:
        raise NoLabeledData("lasso screening needs at least 2 labeled rows")
    _, coefs = lasso_path(X, y)
    chosen = np.zeros(p, dtype=bool)
    for row in coefs:
        active = row != 0
        if active.sum() > k:
            break
        chosen = active
    return SubsetMask(np.flatnonzero(chosen) + 1)
