"""Search for predictor subsets with task-invariant residuals.

Both searches fit pooled OLS on a fixed training split, test the residuals
on the validation split for equality across tasks, and collect every subset
whose p-value exceeds the level.  A selection rule then picks one of them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import MultiTaskDataset, SplitConfig, SubsetMask, make_rng, split_train_validation
from .exceptions import (
    EnumerationTooLarge,
    InvalidConfig,
    InvTransferError,
    NoTestTask,
    SingleTask,
    TestTaskTooSmall,
)
from .invariance import KernelConfig, run_test
from .mtl import EmOptions, coefficients_from_covariance, observed_data_from_arrays, run_em
from .regression import ResidualSample, ols_arrays

MAX_FULL_P = 25


@dataclass(frozen=True)
class SearchConfig:
    level: float = 0.05
    test_kind: str = "hsic"
    mode: str = "full"
    greedy_iters: int | None = None  # None means 2p
    rule: str = "dg"
    split: SplitConfig = SplitConfig()
    max_subset_size: int | None = None
    kernel: KernelConfig = KernelConfig()
    em: EmOptions = EmOptions()
    cv_folds: int = 10

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise InvalidConfig("level must lie in (0, 1)")
        if self.test_kind not in ("hsic", "levene"):
            raise InvalidConfig(f"unknown test kind {self.test_kind!r}")
        if self.mode not in ("full", "greedy"):
            raise InvalidConfig(f"unknown search mode {self.mode!r}")
        if self.rule not in ("dg", "mtl"):
            raise InvalidConfig(f"unknown selection rule {self.rule!r}")
        if self.greedy_iters is not None and self.greedy_iters < 1:
            raise InvalidConfig("greedy_iters must be positive")
        if self.max_subset_size is not None and self.max_subset_size < 0:
            raise InvalidConfig("max_subset_size must be >= 0")


@dataclass(frozen=True)
class Candidate:
    subset: SubsetMask
    p_value: float
    validation_mse: float


@dataclass(frozen=True)
class SearchResult:
    chosen: SubsetMask
    accepted: tuple[Candidate, ...]
    evaluated_count: int
    log: tuple[dict, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen.to_list(),
            "accepted": [
                {"subset": c.subset.to_list(), "p_value": c.p_value, "validation_mse": c.validation_mse}
                for c in self.accepted
            ],
            "evaluated_count": self.evaluated_count,
        }


class _Evaluator:
    """Fits and tests subsets against one fixed train/validation split."""

    def __init__(self, dataset: MultiTaskDataset, cfg: SearchConfig):
        train_ds = dataset.training_view()
        if len({t.task_id for t in train_ds.labeled_tasks()}) < 2:
            raise SingleTask("subset search needs at least 2 labeled training tasks")
        tr, va = split_train_validation(train_ds, cfg.split)
        self.X, self.y, _ = tr.pooled()
        self.Xv, self.yv, self.kv = va.pooled()
        self.cfg = cfg
        self.p = dataset.p
        self.log: list[dict] = []

    def __call__(self, subset: SubsetMask) -> dict:
        entry: dict = {"subset": subset.to_list()}
        try:
            pred = ols_arrays(self.X, self.y, subset)
            r = self.yv - pred.predict(self.Xv)
            out = run_test(ResidualSample(r, self.kv), self.cfg.test_kind, self.cfg.level, self.cfg.kernel)
        except (InvTransferError, np.linalg.LinAlgError) as exc:
            entry.update(accepted=False, error=f"{type(exc).__name__}: {exc}")
        else:
            entry.update(
                statistic=float(out.statistic),
                p_value=float(out.p_value),
                validation_mse=float(np.mean(r * r)),
                accepted=bool(out.accepted),
            )
            if out.degenerate:
                entry["degenerate"] = True
        self.log.append(entry)
        return entry


def _candidate(entry: dict) -> Candidate:
    return Candidate(SubsetMask(entry["subset"]), entry["p_value"], entry["validation_mse"])


def enumerate_subsets(p: int, max_size: int | None = None) -> Iterable[SubsetMask]:
    """All subsets of ``{1..p}`` by cardinality, then lexicographically."""
    top = p if max_size is None else min(max_size, p)
    for k in range(top + 1):
        for combo in itertools.combinations(range(1, p + 1), k):
            yield SubsetMask(combo)


def full_subset_search(dataset: MultiTaskDataset, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    p = dataset.p
    if cfg.max_subset_size is not None and cfg.max_subset_size > p:
        raise InvalidConfig(f"max_subset_size {cfg.max_subset_size} exceeds p={p}")
    if cfg.max_subset_size is None and p > MAX_FULL_P:
        raise EnumerationTooLarge(f"2^{p} subsets; set max_subset_size or use greedy mode")
    ev = _Evaluator(dataset, cfg)
    accepted = [_candidate(e) for e in map(ev, enumerate_subsets(p, cfg.max_subset_size)) if e["accepted"]]
    return _finish(dataset, cfg, accepted, ev.log)


def _neighbors(current: SubsetMask | None, p: int) -> list[SubsetMask]:
    if current is None:
        return [SubsetMask([j]) for j in range(1, p + 1)]
    out = [SubsetMask(set(current.indices) ^ {j}) for j in range(1, p + 1)]
    return sorted(out, key=SubsetMask.sort_key)


def greedy_subset_search(dataset: MultiTaskDataset, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Local search over add-one/remove-one neighborhoods, starting next to the empty set.

    Each iteration evaluates the unvisited neighbors of the current set and
    moves to the accepted neighbor of smallest validation MSE, or, when none
    is accepted, to the neighbor with the smallest test statistic.
    """
    p = dataset.p
    iters = cfg.greedy_iters if cfg.greedy_iters is not None else 2 * p
    ev = _Evaluator(dataset, cfg)
    visited: set[SubsetMask] = set()
    accepted: list[Candidate] = []
    current: SubsetMask | None = None
    for _ in range(iters):
        todo = [s for s in _neighbors(current, p) if s not in visited]
        if not todo:
            break
        best_acc = best_rej = None
        for s in todo:
            visited.add(s)
            e = ev(s)
            if e["accepted"]:
                accepted.append(_candidate(e))
                if best_acc is None or e["validation_mse"] < best_acc[0]:
                    best_acc = (e["validation_mse"], s)
            elif "statistic" in e and (best_rej is None or e["statistic"] < best_rej[0]):
                best_rej = (e["statistic"], s)
        step = best_acc or best_rej
        if step is None:
            break
        current = step[1]
    return _finish(dataset, cfg, accepted, ev.log)


def subset_search(dataset: MultiTaskDataset, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    if cfg.mode == "full":
        return full_subset_search(dataset, cfg)
    return greedy_subset_search(dataset, cfg)


def _finish(dataset, cfg: SearchConfig, accepted: list[Candidate], log: list[dict]) -> SearchResult:
    if cfg.rule == "dg":
        chosen = select_rule_dg(accepted)
    else:
        chosen = select_rule_mtl(accepted, dataset, dataset.test_task_id, cfg.em, cfg.cv_folds, cfg.split.seed)
    return SearchResult(chosen, tuple(accepted), len(log), tuple(log))


def _as_subset(item) -> SubsetMask:
    return item.subset if isinstance(item, Candidate) else SubsetMask(item)


def select_rule_dg(accepted: Sequence[Candidate]) -> SubsetMask:
    """Accepted subset with the lowest validation MSE; ``{}`` when nothing was accepted.

    Ties go to the smaller subset, then the lexicographically smaller one.
    """
    if not accepted:
        return SubsetMask()
    best = min(accepted, key=lambda c: (c.validation_mse, c.subset.sort_key()))
    return best.subset


def cv_error_em(
    dataset: MultiTaskDataset,
    subset: SubsetMask,
    test_task_id: int,
    opts: EmOptions = EmOptions(),
    folds: int = 10,
    seed: int = 0,
) -> float:
    """Mean held-out squared error of the EM predictor over folds of the labeled test rows.

    Training tasks (and unlabeled test rows when ``opts.use_unlabeled``) are
    visible in every fold.
    """
    lab = dataset.sample(test_task_id, labeled=True)
    if lab is None:
        raise NoTestTask(f"no labeled sample for task {test_task_id}")
    if lab.n < folds:
        raise TestTaskTooSmall(f"{lab.n} labeled test rows cannot fill {folds} folds")
    train = [t for t in dataset.labeled_tasks() if t.task_id != test_task_id]
    tr = None
    if train:
        tr = (np.vstack([t.features for t in train]), np.concatenate([t.targets for t in train]))
    unl = dataset.sample(test_task_id, labeled=False)
    un = unl.features if (opts.use_unlabeled and unl is not None) else None
    fold_of = np.empty(lab.n, dtype=int)
    fold_of[make_rng(seed, test_task_id).permutation(lab.n)] = np.arange(lab.n) % folds
    sq = 0.0
    for f in range(folds):
        hold = fold_of == f
        keep = ~hold
        data = observed_data_from_arrays(
            subset, dataset.p, tr, (lab.features[keep], lab.targets[keep]), un
        )
        pred = coefficients_from_covariance(run_em(data, opts))
        r = lab.targets[hold] - pred.predict(lab.features[hold])
        sq += float(r @ r)
    return sq / lab.n


def select_rule_mtl(
    accepted: Sequence[Candidate],
    dataset: MultiTaskDataset,
    test_task_id: int | None,
    opts: EmOptions = EmOptions(),
    folds: int = 10,
    seed: int = 0,
) -> SubsetMask:
    """Accepted subset whose EM predictor has the lowest cross-validated test-task error."""
    if not accepted:
        return SubsetMask()
    if len(accepted) == 1:
        return _as_subset(accepted[0])
    if test_task_id is None:
        raise NoTestTask("the MTL rule needs a test task")
    best, best_err = None, math.inf
    for s in sorted((_as_subset(a) for a in accepted), key=SubsetMask.sort_key):
        try:
            err = cv_error_em(dataset, s, test_task_id, opts, folds, seed)
        except TestTaskTooSmall:
            raise
        except InvTransferError:
            continue
        if err < best_err:
            best, best_err = s, err
    return best if best is not None else select_rule_dg(accepted)


def restrict_features(dataset: MultiTaskDataset, keep: SubsetMask) -> MultiTaskDataset:
    """Dataset with only the ``keep`` columns (renumbered ``1..len(keep)``)."""
    keep.check(dataset.p)
    cols = keep.zero_based
    tasks = [type(t)(t.task_id, t.features[:, cols], t.targets) for t in dataset.tasks]
    names = None if dataset.feature_names is None else [dataset.feature_names[c] for c in cols]
    return MultiTaskDataset(tasks, len(keep), names, dataset.test_task_id, dataset.metadata)


def screened_search(
    dataset: MultiTaskDataset, keep: SubsetMask, cfg: SearchConfig = SearchConfig()
) -> SearchResult:
    """Run the configured search on the ``keep`` columns and report subsets in original indices."""
    res = subset_search(restrict_features(dataset, keep), cfg)
    back = keep.indices

    def lift(s: SubsetMask) -> SubsetMask:
        return SubsetMask(back[i - 1] for i in s.indices)

    accepted = tuple(Candidate(lift(c.subset), c.p_value, c.validation_mse) for c in res.accepted)
    log = tuple({**e, "subset": lift(SubsetMask(e["subset"])).to_list()} for e in res.log)
    return SearchResult(lift(res.chosen), accepted, res.evaluated_count, log)
