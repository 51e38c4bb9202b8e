import numpy as np
import pytest

from invtransfer.core import MultiTaskDataset, SplitConfig, SubsetMask, TaskSample
from invtransfer.exceptions import EnumerationTooLarge, InvalidConfig, SingleTask, TestTaskTooSmall
from invtransfer.search import (
    Candidate,
    SearchConfig,
    cv_error_em,
    enumerate_subsets,
    full_subset_search,
    greedy_subset_search,
    restrict_features,
    screened_search,
    select_rule_dg,
    select_rule_mtl,
    subset_search,
)
from invtransfer.synthetic import DgGenConfig, GammaDist, gen_dg_tasks


@pytest.fixture(scope="module")
def dg_small():
    return gen_dg_tasks(DgGenConfig(s_size=2, n_size=2, d_tasks=4, n_per_task=400, seed=3))


@pytest.fixture(scope="module")
def mtl_small():
    cfg = DgGenConfig(
        s_size=2, n_size=2, d_tasks=2, n_per_task=200, n_test=40, n_unlabeled=30,
        gamma_dist=GammaDist("uniform", 0.0, 1.5), seed=1,
    )
    return gen_dg_tasks(cfg)


def test_enumeration_order_and_count():
    subsets = list(enumerate_subsets(3))
    assert [s.to_list() for s in subsets] == [[], [1], [2], [3], [1, 2], [1, 3], [2, 3], [1, 2, 3]]
    assert sum(1 for _ in enumerate_subsets(6)) == 64
    assert [len(s) for s in enumerate_subsets(4, 1)] == [0, 1, 1, 1, 1]


def test_full_search_counts_and_invariants(dg_small):
    res = full_subset_search(dg_small, SearchConfig(max_subset_size=4))
    assert res.evaluated_count == 2**4 == len(res.log)
    accepted = [e for e in res.log if e["accepted"]]
    assert len(accepted) == len(res.accepted)
    assert all(e["p_value"] > 0.05 for e in accepted)
    best = min(c.validation_mse for c in res.accepted)
    chosen = next(c for c in res.accepted if c.subset == res.chosen)
    assert chosen.validation_mse == best


def test_full_search_accepts_invariant_set(dg_small):
    res = subset_search(dg_small)
    acc = {c.subset: c for c in res.accepted}
    assert SubsetMask([1, 2]) in acc
    assert acc[res.chosen].validation_mse <= acc[SubsetMask([1, 2])].validation_mse
    # sets lacking a causal feature are rejected
    assert all({1, 2} <= set(s.indices) for s in acc)


def test_extreme_levels(dg_small):
    everything = full_subset_search(dg_small, SearchConfig(level=1e-300))
    assert len(everything.accepted) == 16
    best = min(everything.log, key=lambda e: e["validation_mse"])
    assert everything.chosen.to_list() == best["subset"]
    assert len(everything.chosen) >= 3
    nothing = full_subset_search(dg_small, SearchConfig(level=1 - 1e-12))
    assert nothing.accepted == () and nothing.chosen == SubsetMask()


def test_levene_variant_runs(dg_small):
    res = subset_search(dg_small, SearchConfig(test_kind="levene"))
    assert res.evaluated_count == 16
    assert all(c.p_value > 0.05 for c in res.accepted)


def test_search_is_deterministic(dg_small):
    a = subset_search(dg_small, SearchConfig(split=SplitConfig(0.5, 4)))
    b = subset_search(dg_small, SearchConfig(split=SplitConfig(0.5, 4)))
    assert a.log == b.log and a.chosen == b.chosen


def test_search_ignores_test_task(dg_small):
    no_test = MultiTaskDataset(dg_small.training_view().tasks, dg_small.p)
    assert subset_search(no_test).log == subset_search(dg_small).log


def test_guards():
    rng = np.random.default_rng(0)
    one = MultiTaskDataset([TaskSample(1, rng.normal(size=(20, 2)), rng.normal(size=20))], 2)
    with pytest.raises(SingleTask):
        subset_search(one)
    wide = MultiTaskDataset(
        [TaskSample(k, rng.normal(size=(10, 26)), rng.normal(size=10)) for k in (1, 2)], 26
    )
    with pytest.raises(EnumerationTooLarge):
        full_subset_search(wide)
    with pytest.raises(InvalidConfig):
        full_subset_search(one, SearchConfig(max_subset_size=3))
    for bad in ({"level": 0.0}, {"test_kind": "x"}, {"mode": "x"}, {"rule": "x"}, {"greedy_iters": 0}):
        with pytest.raises(InvalidConfig):
            SearchConfig(**bad)


@pytest.mark.filterwarnings("ignore:degenerate HSIC")
def test_rank_deficient_subset_logged_not_fatal():
    # 2 training rows per task: subsets with 4+ features cannot be fitted
    rng = np.random.default_rng(1)
    tasks = [TaskSample(k, rng.normal(size=(4, 4)), rng.normal(size=4)) for k in (1, 2)]
    res = full_subset_search(MultiTaskDataset(tasks, 4))
    assert res.evaluated_count == 16
    bad = [e for e in res.log if len(e["subset"]) >= 4]
    assert bad and all("error" in e and e["accepted"] is False for e in bad)
    assert all("p_value" in e for e in res.log if len(e["subset"]) < 3)


def test_rule_dg():
    acc = [Candidate(SubsetMask([1]), 0.5, 2.0), Candidate(SubsetMask([1, 2]), 0.5, 1.0)]
    assert select_rule_dg(acc) == SubsetMask([1, 2])
    assert select_rule_dg([]) == SubsetMask()
    tie = [Candidate(SubsetMask([1, 3]), 0.5, 1.0), Candidate(SubsetMask([2]), 0.5, 1.0)]
    assert select_rule_dg(tie) == SubsetMask([2])
    tie2 = [Candidate(SubsetMask([2, 3]), 0.5, 1.0), Candidate(SubsetMask([1, 3]), 0.5, 1.0)]
    assert select_rule_dg(tie2) == SubsetMask([1, 3])


def _singleton_dataset():
    rng = np.random.default_rng(7)
    tasks = []
    for k, scale in ((1, 1.0), (2, 3.0), (3, 0.3)):
        x1 = rng.normal(size=500)
        y = 2.0 * x1 + 0.1 * rng.normal(size=500)
        x2 = scale * y + rng.normal(size=500)
        x3 = rng.normal(scale=scale, size=500)
        tasks.append(TaskSample(k, np.column_stack([x1, x2, x3]), y))
    return MultiTaskDataset(tasks, 3)


def test_greedy_singleton_after_first_iteration():
    ds = _singleton_dataset()
    res = greedy_subset_search(ds, SearchConfig(mode="greedy", greedy_iters=1))
    assert res.chosen == SubsetMask([1])
    assert res.evaluated_count == 3


def test_greedy_memoizes_and_stops():
    ds = _singleton_dataset()
    res = greedy_subset_search(ds, SearchConfig(mode="greedy", greedy_iters=50))
    subsets = [tuple(e["subset"]) for e in res.log]
    assert len(subsets) == len(set(subsets))
    assert res.evaluated_count <= 8  # each subset at most once
    assert res.chosen == SubsetMask([1]) or SubsetMask([1]) in [c.subset for c in res.accepted]


def test_greedy_agrees_with_full_on_easy_instance(dg_small):
    full = subset_search(dg_small)
    greedy = subset_search(dg_small, SearchConfig(mode="greedy"))
    assert greedy.chosen == full.chosen


def test_screened_search_maps_indices(dg_small):
    keep = SubsetMask([1, 2, 4])
    res = screened_search(dg_small, keep, SearchConfig())
    direct = subset_search(restrict_features(dg_small, keep))
    assert set(res.chosen.indices) <= set(keep.indices)
    assert [len(c.subset) for c in res.accepted] == [len(c.subset) for c in direct.accepted]
    assert res.chosen.indices == tuple(keep.indices[i - 1] for i in direct.chosen.indices)
    assert all(set(e["subset"]) <= {1, 2, 4} for e in res.log)


def test_cv_error_em(mtl_small):
    e1 = cv_error_em(mtl_small, SubsetMask([1, 2]), 3)
    e2 = cv_error_em(mtl_small, SubsetMask([1, 2, 3]), 3)
    assert np.isfinite(e1) and np.isfinite(e2) and e1 > 0
    assert cv_error_em(mtl_small, SubsetMask([1, 2]), 3, seed=5) != e1
    assert cv_error_em(mtl_small, SubsetMask([1, 2]), 3) == e1


def test_rule_mtl(mtl_small):
    s_star, extra = SubsetMask([1, 2]), SubsetMask([1, 2, 4])
    assert select_rule_mtl([Candidate(extra, 0.5, 9.0)], mtl_small, 3) == extra
    assert select_rule_mtl([], mtl_small, 3) == SubsetMask()
    acc = [Candidate(s_star, 0.5, 1.0), Candidate(extra, 0.5, 1.0)]
    errs = {s: cv_error_em(mtl_small, s, 3) for s in (s_star, extra)}
    assert select_rule_mtl(acc, mtl_small, 3) == min(errs, key=errs.get)


def test_rule_mtl_needs_ten_rows():
    cfg = DgGenConfig(s_size=1, n_size=1, d_tasks=2, n_per_task=50, n_test=8, seed=0)
    ds = gen_dg_tasks(cfg)
    acc = [Candidate(SubsetMask([1]), 0.5, 1.0), Candidate(SubsetMask([1, 2]), 0.5, 1.0)]
    with pytest.raises(TestTaskTooSmall):
        select_rule_mtl(acc, ds, 3)


def test_mtl_rule_through_search(mtl_small):
    res = subset_search(mtl_small, SearchConfig(rule="mtl"))
    assert res.chosen in [c.subset for c in res.accepted] or not res.accepted
