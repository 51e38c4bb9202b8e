"""Domain types, dataset validation and train/validation splitting.

Feature indices are 1-based in every user-facing structure (``SubsetMask``,
CSV headers, reports) and converted to 0-based column positions only where
numpy arrays are indexed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .exceptions import (
    DimensionMismatch,
    DuplicateTaskId,
    NoLabeledData,
    NonFiniteValue,
    TaskTooSmall,
)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *key)``.

    Every (experiment, repetition, task) tuple gets its own Philox stream, so
    results do not depend on the order in which streams are consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TaskSample:
    """Observations from one task; ``targets is None`` marks an unlabeled sample."""

    task_id: int
    features: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        x = _frozen(self.features)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1) if x.size else x.reshape(0, 0))
        object.__setattr__(self, "features", x)
        if self.targets is not None:
            object.__setattr__(self, "targets", _frozen(np.ravel(self.targets)))
        object.__setattr__(self, "task_id", int(self.task_id))

    @property
    def labeled(self) -> bool:
        return self.targets is not None

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def take(self, rows) -> "TaskSample":
        rows = np.asarray(rows, dtype=int)
        y = None if self.targets is None else self.targets[rows]
        return TaskSample(self.task_id, self.features[rows], y)


@dataclass(frozen=True, eq=False)
class MultiTaskDataset:
    """Ordered collection of task samples sharing one feature dimension.

    A task may contribute one labeled and one unlabeled sample; the pair
    ``(task_id, labeled)`` is what must be unique.  ``metadata`` carries
    generator diagnostics (true invariant set, per-task coefficients, ...).
    """

    tasks: tuple[TaskSample, ...]
    p: int
    feature_names: tuple[str, ...] | None = None
    test_task_id: int | None = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "p", int(self.p))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def task_ids(self) -> list[int]:
        seen: list[int] = []
        for t in self.tasks:
            if t.task_id not in seen:
                seen.append(t.task_id)
        return seen

    def labeled_tasks(self) -> list[TaskSample]:
        return [t for t in self.tasks if t.labeled]

    def sample(self, task_id: int, labeled: bool = True) -> TaskSample | None:
        for t in self.tasks:
            if t.task_id == task_id and t.labeled == labeled:
                return t
        return None

    def training_view(self) -> "MultiTaskDataset":
        """Dataset without any sample of the test task."""
        if self.test_task_id is None:
            return self
        keep = tuple(t for t in self.tasks if t.task_id != self.test_task_id)
        return replace(self, tasks=keep, test_task_id=None)

    def with_tasks(self, tasks: Iterable[TaskSample]) -> "MultiTaskDataset":
        tasks = tuple(tasks)
        test = self.test_task_id
        if test is not None and not any(t.task_id == test for t in tasks):
            test = None
        return replace(self, tasks=tasks, test_task_id=test)

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all labeled rows: ``(X, y, task_labels)``."""
        lab = self.labeled_tasks()
        if not lab or sum(t.n for t in lab) == 0:
            raise NoLabeledData("dataset has no labeled rows")
        X = np.vstack([t.features for t in lab])
        y = np.concatenate([t.targets for t in lab])
        k = np.concatenate([np.full(t.n, t.task_id, dtype=int) for t in lab])
        return X, y, k


@dataclass(frozen=True, order=False)
class SubsetMask:
    """Strictly increasing 1-based feature indices; may be empty."""

    indices: tuple[int, ...] = ()

    def __init__(self, indices: Iterable[int] = ()):
        idx = tuple(sorted(int(i) for i in indices))
        if any(i < 1 for i in idx):
            raise ValueError(f"subset indices are 1-based, got {idx}")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate indices in subset {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def full(cls, p: int) -> "SubsetMask":
        return cls(range(1, p + 1))

    @property
    def zero_based(self) -> np.ndarray:
        return np.array(self.indices, dtype=int) - 1

    def complement(self, p: int) -> "SubsetMask":
        return SubsetMask(i for i in range(1, p + 1) if i not in self.indices)

    def check(self, p: int) -> None:
        if self.indices and self.indices[-1] > p:
            raise DimensionMismatch(f"subset {self} refers to feature > p={p}")

    def sort_key(self) -> tuple[int, tuple[int, ...]]:
        return (len(self.indices), self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __contains__(self, i) -> bool:
        return i in self.indices

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.indices)) + "}"

    def to_list(self) -> list[int]:
        return list(self.indices)


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    """Affine predictor supported on ``subset``; zero weight elsewhere."""

    subset: SubsetMask
    coefficients: np.ndarray
    intercept: float

    def __post_init__(self):
        coef = _frozen(np.ravel(self.coefficients))
        if coef.shape[0] != len(self.subset):
            raise DimensionMismatch(
                f"{coef.shape[0]} coefficients for subset of size {len(self.subset)}"
            )
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))

    def full_coefficients(self, p: int) -> np.ndarray:
        self.subset.check(p)
        beta = np.zeros(p)
        beta[self.subset.zero_based] = self.coefficients
        return beta

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if len(self.subset) == 0:
            return np.full(X.shape[0], self.intercept)
        return self.intercept + X[:, self.subset.zero_based] @ self.coefficients

    def to_dict(self, p: int) -> dict:
        return {
            "subset": self.subset.to_list(),
            "intercept": self.intercept,
            "coefficients": self.full_coefficients(p).tolist(),
        }


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def validate_dataset(dataset: MultiTaskDataset) -> None:
    """Raise on the first violated invariant; return ``None`` if well formed."""
    seen: set[tuple[int, bool]] = set()
    for t in dataset.tasks:
        if t.task_id < 1:
            raise DuplicateTaskId(f"task id must be >= 1, got {t.task_id}")
        key = (t.task_id, t.labeled)
        if key in seen:
            kind = "labeled" if t.labeled else "unlabeled"
            raise DuplicateTaskId(f"task {t.task_id} has more than one {kind} sample")
        seen.add(key)
        if t.features.ndim != 2 or t.p != dataset.p:
            raise DimensionMismatch(
                f"task {t.task_id}: expected p={dataset.p}, got features of shape {t.features.shape}"
            )
        if t.n < 1:
            raise DimensionMismatch(f"task {t.task_id}: sample is empty")
        bad = ~np.isfinite(t.features).all(axis=1)
        if bad.any():
            raise NonFiniteValue(f"task {t.task_id}: non-finite feature in row {int(np.argmax(bad))}")
        if t.targets is not None:
            if t.targets.shape[0] != t.n:
                raise DimensionMismatch(
                    f"task {t.task_id}: {t.targets.shape[0]} targets for {t.n} rows"
                )
            bad = ~np.isfinite(t.targets)
            if bad.any():
                raise NonFiniteValue(f"task {t.task_id}: non-finite target in row {int(np.argmax(bad))}")
    if dataset.feature_names is not None and len(dataset.feature_names) != dataset.p:
        raise DimensionMismatch("feature_names length differs from p")
    if dataset.test_task_id is not None and dataset.test_task_id not in dataset.task_ids:
        raise DimensionMismatch(f"test task {dataset.test_task_id} not present in dataset")


def split_train_validation(
    dataset: MultiTaskDataset, cfg: SplitConfig = SplitConfig()
) -> tuple[MultiTaskDataset, MultiTaskDataset]:
    """Per-task random partition of labeled rows into train and validation.

    Each labeled task is permuted by its own stream derived from
    ``(cfg.seed, task_id)``.  Unlabeled samples are kept whole in the
    training part.
    """
    train: list[TaskSample] = []
    val: list[TaskSample] = []
    for t in dataset.tasks:
        if not t.labeled:
            train.append(t)
            continue
        if t.n < 2:
            raise TaskTooSmall(f"task {t.task_id} has {t.n} labeled row(s); need at least 2")
        n_train = int(round(cfg.train_fraction * t.n))
        n_train = min(max(n_train, 1), t.n - 1)
        perm = make_rng(cfg.seed, t.task_id).permutation(t.n)
        train.append(t.take(np.sort(perm[:n_train])))
        val.append(t.take(np.sort(perm[n_train:])))
    return dataset.with_tasks(train), dataset.with_tasks(val)


def concat_tasks(samples: Sequence[TaskSample]) -> TaskSample:
    """Stack samples of one task (all labeled or all unlabeled)."""
    x = np.vstack([s.features for s in samples])
    if all(s.labeled for s in samples):
        y = np.concatenate([s.targets for s in samples])
    else:
        y = None
    return TaskSample(samples[0].task_id, x, y)
