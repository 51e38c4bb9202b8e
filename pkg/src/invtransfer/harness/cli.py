"""``invtransfer`` command line: gen, search, mtl-fit, experiment.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from ..core import SplitConfig, SubsetMask
from ..exceptions import InvalidConfig, InvTransferError
from ..mtl import EmOptions, em_fit
from ..search import SearchConfig, subset_search
from ..synthetic import DgGenConfig, GammaDist, ThreeNodeConfig, gen_dg_tasks, gen_three_node
from .experiments import PRESETS, ExperimentConfig, run_experiment
from .io import dumps_json, atomic_write_text, load_csv, write_csv

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _subset(text: str) -> SubsetMask:
    text = text.strip().strip("{}")
    if not text:
        return SubsetMask()
    try:
        return SubsetMask(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid subset {text!r}: {exc}") from None


def _override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="invtransfer", description="Invariant-subset transfer learning toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset as CSV")
    g.add_argument("--config", help="JSON file with generator settings ('design': 'dg' or 'three_node')")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    s = sub.add_parser("search", help="search for invariant subsets")
    s.add_argument("--data", required=True)
    s.add_argument("--delta", type=float, default=0.05, help="test level (default 0.05)")
    s.add_argument("--test", choices=("hsic", "levene"), default="hsic")
    s.add_argument("--mode", choices=("full", "greedy"), default="full")
    s.add_argument("--rule", choices=("dg", "mtl"), default="dg")
    s.add_argument("--test-task", type=int, help="task left out of the search (required for --rule mtl)")
    s.add_argument("--greedy-iters", type=int)
    s.add_argument("--max-subset-size", type=int)
    s.add_argument("--train-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0, help="train/validation split seed")
    s.add_argument("--out", help="output JSON path (default: stdout)")

    m = sub.add_parser("mtl-fit", help="EM fit of the joint model for a given invariant subset")
    m.add_argument("--data", required=True)
    m.add_argument("--test-task", type=int, required=True)
    m.add_argument("--subset", type=_subset, required=True, help="comma separated 1-based indices")
    m.add_argument("--unlabeled", action="store_true", help="use unlabeled test-task rows")
    m.add_argument("--tol", type=float, default=1e-8)
    m.add_argument("--max-iter", type=int, default=500)
    m.add_argument("--out", help="output JSON path (default: stdout)")

    e = sub.add_parser("experiment", help="run an experiment preset")
    e.add_argument("--name", required=True, choices=PRESETS)
    e.add_argument("--reps", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="KEY=VALUE", help="override a preset option (value parsed as JSON)")
    e.add_argument("--workers", type=int, help="worker processes (default: environment or CPU count)")
    return ap


def _emit(obj, out: str | None) -> None:
    if out:
        atomic_write_text(out, dumps_json(obj))
    else:
        sys.stdout.write(dumps_json(obj))


def _cmd_gen(args) -> None:
    conf = {}
    if args.config:
        conf = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(conf, dict):
            raise InvalidConfig("generator config must be a JSON object")
    design = conf.pop("design", "dg")
    if design == "dg":
        names = {f.name for f in fields(DgGenConfig)} - {"seed"}
        bad = set(conf) - names
        if bad:
            raise InvalidConfig(f"unknown generator option(s): {', '.join(sorted(bad))}")
        if isinstance(conf.get("gamma_dist"), dict):
            conf["gamma_dist"] = GammaDist(**conf["gamma_dist"])
        for k in ("u_causal_range", "u_noise_range", "u_mix_range", "alpha_range"):
            if k in conf:
                conf[k] = tuple(conf[k])
        ds = gen_dg_tasks(DgGenConfig(seed=args.seed, **conf))
    elif design == "three_node":
        for k in ("alpha", "sigma_x", "gammas"):
            if conf.get(k) is not None:
                conf[k] = tuple(conf[k])
        ds = gen_three_node(ThreeNodeConfig(seed=args.seed, **conf))
    else:
        raise InvalidConfig(f"unknown design {design!r}")
    write_csv(ds, args.out)


def _cmd_search(args) -> None:
    if args.rule == "mtl" and args.test_task is None:
        raise UsageError("search: --rule mtl needs --test-task")
    ds = load_csv(args.data, test_task_id=args.test_task)
    cfg = SearchConfig(
        level=args.delta,
        test_kind=args.test,
        mode=args.mode,
        greedy_iters=args.greedy_iters,
        rule=args.rule,
        split=SplitConfig(args.train_fraction, args.seed),
        max_subset_size=args.max_subset_size,
    )
    res = subset_search(ds, cfg)
    out = res.to_dict()
    out["config"] = {"delta": args.delta, "test": args.test, "mode": args.mode, "rule": args.rule}
    _emit(out, args.out)


def _cmd_mtl_fit(args) -> None:
    ds = load_csv(args.data, test_task_id=args.test_task)
    opts = EmOptions(tol=args.tol, max_iter=args.max_iter, use_unlabeled=args.unlabeled)
    model, pred = em_fit(ds, args.subset, args.test_task, opts)
    _emit(
        {
            "subset": args.subset.to_list(),
            "predictor": pred.to_dict(ds.p),
            "roles": model.roles,
            "mean": model.mean.tolist(),
            "sigma": model.sigma.tolist(),
            "iterations": len(model.loglik_trace) - 1,
            "loglik": model.loglik_trace[-1],
        },
        args.out,
    )


def _cmd_experiment(args) -> None:
    cfg = ExperimentConfig(args.name, args.reps, args.seed, dict(args.overrides))
    run_experiment(cfg, args.out_dir, workers=args.workers)


_COMMANDS = {"gen": _cmd_gen, "search": _cmd_search, "mtl-fit": _cmd_mtl_fit, "experiment": _cmd_experiment}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    except (InvTransferError, OSError, ValueError, json.JSONDecodeError, TypeError) as exc:
        print(f"invtransfer: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
