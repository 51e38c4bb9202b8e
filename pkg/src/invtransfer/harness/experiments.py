"""Experiment presets, repetition runner and report assembly."""

from __future__ import annotations

import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..core import LinearPredictor, SplitConfig, SubsetMask, make_rng
from ..exceptions import InvalidConfig, InvTransferError
from ..mtl import EmOptions, PluginOptions, em_fit, naive_plugin_fit
from ..regression import fit_domain_only, fit_pooled_ols, lasso_screen, residuals
from ..search import SearchConfig, screened_search, subset_search
from ..synthetic import (
    DgGenConfig,
    GammaDist,
    fig2_draws,
    fresh_test_sample,
    gen_dg_tasks,
    pooled_expected_error_batch,
)
from .io import atomic_write_text, dumps_json

SCHEMA_VERSION = 1
WORKERS_ENV = "INVTRANSFER_WORKERS"
PRESETS = ("fig2_closed_form", "dg_full", "dg_sparse_lasso", "dg_greedy_large", "amtl", "smtl", "custom")

_SEARCH_KEYS = {"level", "test_kind", "train_fraction", "greedy_iters", "max_subset_size"}
_RUN_KEYS = {"n_fresh", "lasso_k", "kind", "mode", "naive"}
_GEN_KEYS = {f.name for f in fields(DgGenConfig)} - {"seed"}
_FIG2_KEYS = {"grid", "n_draws", "var_eps", "d_tasks", "s_size"}

# generator settings and run options of each simulated preset
_PRESET_DEFAULTS: dict[str, dict[str, Any]] = {
    "dg_full": {"kind": "dg", "mode": "full"},
    "dg_sparse_lasso": {"kind": "dg", "mode": "lasso", "n_pure_noise": 32, "lasso_k": 8},
    "dg_greedy_large": {
        "kind": "dg",
        "mode": "greedy",
        "s_size": 20,
        "n_size": 20,
        "eps_std": 6.0,
        "n_per_task": 500,
    },
    "amtl": {
        "kind": "mtl",
        "s_size": 3,
        "n_size": 3,
        "d_tasks": 2,
        "n_per_task": 300,
        "n_test": 50,
        "n_unlabeled": 100,
        "gamma_dist": {"kind": "uniform", "a": 0.0, "b": 1.5},
    },
    "smtl": {
        "kind": "mtl",
        "s_size": 3,
        "n_size": 3,
        "d_tasks": 4,
        "n_per_task": 50,
        "n_test": 50,
        "n_unlabeled": 100,
        "gamma_dist": {"kind": "uniform", "a": 0.0, "b": 1.5},
    },
    "custom": {},
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    reps: int = 50
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PRESETS:
            raise InvalidConfig(f"unknown experiment {self.name!r}; choose from {', '.join(PRESETS)}")
        if self.reps < 1:
            raise InvalidConfig("reps must be >= 1")
        allowed = _FIG2_KEYS if self.name == "fig2_closed_form" else _SEARCH_KEYS | _RUN_KEYS | _GEN_KEYS
        unknown = set(self.overrides) - allowed
        if unknown:
            raise InvalidConfig(f"unknown override(s) for {self.name}: {', '.join(sorted(unknown))}")
        if self.name == "custom" and self.overrides.get("kind") not in ("dg", "mtl"):
            raise InvalidConfig("custom experiments need override kind=dg or kind=mtl")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InvalidConfig(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# fig2


def _fig2(cfg: ExperimentConfig) -> tuple[list[dict], dict]:
    o = cfg.overrides
    grid = [float(g) for g in o.get("grid", np.geomspace(1e-8, 10.0, 41))]
    n_draws = int(o.get("n_draws", 10_000))
    var_eps = float(o.get("var_eps", 1.0))
    d = int(o.get("d_tasks", 2))
    draws = fig2_draws(make_rng(cfg.seed, 0), n_draws, int(o.get("s_size", 3)), d)
    records = []
    for s2 in grid:
        pooled = pooled_expected_error_batch(draws, s2, var_eps)
        # the invariant predictor's error is var_eps for every draw
        records.append(
            {"sigma2": s2, "err_pooled": float(np.mean(pooled)), "err_invariant": var_eps}
        )
    resolved = {"grid": grid, "n_draws": n_draws, "var_eps": var_eps, "d_tasks": d}
    return records, resolved


# --------------------------------------------------------------------------
# simulated presets


def _resolve(cfg: ExperimentConfig) -> dict:
    params = dict(_PRESET_DEFAULTS[cfg.name])
    params.update(cfg.overrides)
    params.setdefault("mode", "full")
    params.setdefault("n_fresh", 100_000)
    return params


def _gen_config(params: dict, seed: int) -> DgGenConfig:
    gen = {k: v for k, v in params.items() if k in _GEN_KEYS}
    g = gen.get("gamma_dist")
    if isinstance(g, dict):
        gen["gamma_dist"] = GammaDist(**g)
    elif isinstance(g, str):
        kind, _, rest = g.partition(":")
        nums = [float(v) for v in rest.split(",") if v]
        gen["gamma_dist"] = GammaDist(kind, *nums)
    for k in ("u_causal_range", "u_noise_range", "u_mix_range", "alpha_range"):
        if k in gen:
            gen[k] = tuple(float(v) for v in gen[k])
    return DgGenConfig(seed=seed, **gen)


def _search_config(params: dict, split_seed: int, mode: str, rule: str) -> SearchConfig:
    return SearchConfig(
        level=float(params.get("level", 0.05)),
        test_kind=params.get("test_kind", "hsic"),
        mode=mode,
        greedy_iters=params.get("greedy_iters"),
        rule=rule,
        split=SplitConfig(float(params.get("train_fraction", 0.5)), split_seed),
        max_subset_size=params.get("max_subset_size"),
    )


def _rep_seed(seed: int, rep: int) -> int:
    return int(make_rng(seed, 7, rep).integers(0, 2**62))


def _mse(pred: LinearPredictor, X: np.ndarray, y: np.ndarray) -> float:
    r = y - pred.predict(X)
    return float(np.mean(r * r))


def _dg_estimators(ds, params, seed) -> dict[str, Callable[[], tuple[LinearPredictor, dict]]]:
    tr = ds.training_view()
    p = ds.p
    true_s = SubsetMask(ds.metadata["true_subset"])
    mode = params["mode"]
    out = {
        "cs_cau": lambda: (fit_pooled_ols(tr, true_s), {}),
        "cs": lambda: (fit_pooled_ols(tr, SubsetMask.full(p)), {}),
        "mean": lambda: (fit_pooled_ols(tr, SubsetMask()), {}),
    }

    def searched(search_mode: str, screen: bool):
        def run():
            sc = _search_config(params, seed, search_mode, "dg")
            if screen:
                keep = lasso_screen(tr, int(params.get("lasso_k", 8)))
                res = screened_search(ds, keep, sc)
                extra = {"screened": keep.to_list()}
            else:
                res = subset_search(ds, sc)
                extra = {}
            extra.update(accepted_count=len(res.accepted), evaluated_count=res.evaluated_count)
            return fit_pooled_ols(tr, res.chosen), extra

        return run

    if mode == "full":
        out["cs_hat"] = searched("full", False)
    elif mode == "greedy":
        out["cs_hat_greedy"] = searched("greedy", False)
    elif mode == "lasso":
        out["cs_hat_lasso"] = searched("full", True)
        out["cs_hat_greedy"] = searched("greedy", False)
    else:
        raise InvalidConfig(f"unknown search mode {mode!r}")
    return out


def _mtl_estimators(ds, params, seed) -> dict[str, Callable[[], tuple[LinearPredictor, dict]]]:
    test_id = ds.test_task_id
    tr = ds.training_view()
    p = ds.p
    true_s = SubsetMask(ds.metadata["true_subset"])
    em = EmOptions()
    em_ul = EmOptions(use_unlabeled=True)

    def shat_sharp():
        sc = _search_config(params, seed, params.get("mode", "full"), "mtl")
        res = subset_search(ds, sc)
        _, pred = em_fit(ds, res.chosen, test_id, em)
        return pred, {"accepted_count": len(res.accepted), "subset_chosen": res.chosen.to_list()}

    def cau_plus():
        # alpha and the noise variance come from the training tasks
        fit = fit_pooled_ols(tr, true_s)
        r = residuals(fit, tr).residuals
        pred = naive_plugin_fit(
            ds.sample(test_id, True), ds.sample(test_id, False), true_s, fit.coefficients, float(np.var(r)),
            PluginOptions(),
        )
        return pred, {}

    out = {
        "dom": lambda: (fit_domain_only(ds, test_id), {}),
        "shat_sharp": shat_sharp,
        "cau_sharp": lambda: (em_fit(ds, true_s, test_id, em)[1], {}),
        "cau_sharp_ul": lambda: (em_fit(ds, true_s, test_id, em_ul)[1], {}),
        "cs_cau": lambda: (fit_pooled_ols(tr, true_s), {}),
        "cs": lambda: (fit_pooled_ols(tr, SubsetMask.full(p)), {}),
        "mean": lambda: (fit_pooled_ols(tr, SubsetMask()), {}),
    }
    if params.get("naive", True):
        out["cau_plus"] = cau_plus
    return out


def _run_rep(args: tuple[str, dict, int, int]) -> tuple[list[dict], dict]:
    """One repetition: generate, fit every estimator, score on fresh test rows."""
    name, params, base_seed, rep = args
    seed = _rep_seed(base_seed, rep)
    timings: dict[str, float] = {}
    try:
        gen = _gen_config(params, seed)
        ds = gen_dg_tasks(gen)
        Xt, yt = fresh_test_sample(gen, int(params["n_fresh"]))
        kind = params["kind"]
        ests = _dg_estimators(ds, params, seed) if kind == "dg" else _mtl_estimators(ds, params, seed)
    except Exception as exc:  # the whole repetition failed before any estimator ran
        return [{"rep": rep, "estimator": None, "status": "failed", "error": _describe(exc)}], timings
    records = []
    for est_name, fn in ests.items():
        t0 = time.perf_counter()
        rec: dict[str, Any] = {"rep": rep, "estimator": est_name}
        try:
            pred, extra = fn()
            mse = _mse(pred, Xt, yt)
            rec.update(
                status="ok",
                test_mse=mse,
                log_test_mse=math.log(mse) if mse > 0 else -math.inf,
                subset=pred.subset.to_list() if len(pred.subset) < ds.p else "all",
                **extra,
            )
        except (InvTransferError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            rec.update(status="failed", error=_describe(exc))
        timings[est_name] = time.perf_counter() - t0
        records.append(rec)
    return records, timings


def _describe(exc: BaseException) -> str:
    if isinstance(exc, InvTransferError):
        return f"{type(exc).__name__}: {exc}"
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()


def _baseline(kind: str) -> str:
    return "cs" if kind == "dg" else "dom"


def summarize(records: list[dict], baseline: str) -> dict[str, dict]:
    """Per-estimator statistics of test MSE and the win fraction against ``baseline``."""
    by_est: dict[str, dict[int, float]] = {}
    for r in records:
        if r.get("estimator") is None:
            continue
        by_est.setdefault(r["estimator"], {})
        if r["status"] == "ok":
            by_est[r["estimator"]][r["rep"]] = r["test_mse"]
    base = by_est.get(baseline, {})
    out = {}
    for est, vals in by_est.items():
        reps = sorted(vals)
        v = np.array([vals[k] for k in reps], dtype=float)
        shared = [k for k in reps if k in base]
        wins = sum(vals[k] < base[k] for k in shared)
        logs = np.log(v) if v.size else v
        out[est] = {
            "n_ok": int(v.size),
            "mean_mse": float(np.mean(v)) if v.size else math.nan,
            "median_mse": float(np.median(v)) if v.size else math.nan,
            "std_mse": float(np.std(v)) if v.size else math.nan,
            "mean_log_mse": float(np.mean(logs)) if v.size else math.nan,
            "median_log_mse": float(np.median(logs)) if v.size else math.nan,
            "win_fraction": (wins / len(shared)) if shared else math.nan,
        }
    return out


_SUMMARY_COLS = ("n_ok", "mean_mse", "median_mse", "std_mse", "mean_log_mse", "median_log_mse", "win_fraction")


def _summary_csv(summary: dict[str, dict], baseline: str) -> str:
    head = ["estimator", *_SUMMARY_COLS[:-1], f"win_fraction_vs_{baseline}"]
    lines = [",".join(head)]
    for est in sorted(summary):
        row = summary[est]
        lines.append(",".join([est, *(repr(row[c]) for c in _SUMMARY_COLS)]))
    return "\n".join(lines) + "\n"


def run_experiment(
    cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, workers: int | None = None
) -> dict:
    """Run a preset and return the report; files are written when ``out_dir`` is given.

    ``report.json`` holds only seed-determined content.  Wall-clock timings go
    to a separate ``timings.json``.
    """
    t0 = time.perf_counter()
    timings: dict[str, Any] = {}
    if cfg.name == "fig2_closed_form":
        records, resolved = _fig2(cfg)
        summary_text = "sigma2,err_pooled,err_invariant\n" + "".join(
            f"{r['sigma2']!r},{r['err_pooled']!r},{r['err_invariant']!r}\n" for r in records
        )
        summary = {"baseline": None}
    else:
        params = _resolve(cfg)
        resolved = {k: (v.to_dict() if isinstance(v, GammaDist) else v) for k, v in sorted(params.items())}
        jobs = [(cfg.name, params, cfg.seed, r) for r in range(cfg.reps)]
        workers = worker_count() if workers is None else max(1, int(workers))
        if workers == 1 or cfg.reps == 1:
            results = [_run_rep(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=min(workers, cfg.reps)) as pool:
                results = list(pool.map(_run_rep, jobs))
        records = [rec for recs, _ in results for rec in recs]
        timings["per_rep"] = [t for _, t in results]
        base = _baseline(params["kind"])
        stats = summarize(records, base)
        summary = {"baseline": base, "estimators": stats}
        summary_text = _summary_csv(stats, base)
    report = {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.name,
        "seed": cfg.seed,
        "reps": cfg.reps,
        "config": resolved,
        "log_base": "e",
        "records": records,
        "summary": summary,
    }
    timings["total_seconds"] = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "report.json", dumps_json(report))
        atomic_write_text(out / "summary.csv", summary_text)
        atomic_write_text(out / "timings.json", dumps_json(timings))
    return report
