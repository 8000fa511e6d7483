"""Command-line interface: simulate, estimate, bench, diagnose.

Errors are printed to stdout as one JSON object ``{"error": ..., "type": ...}``
and the process exits with status 2 (usage) or 1 (everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

import numpy as np

from . import __version__
from .bench import StudyConfig, dmode_from_spec, nuisance_from_spec, run_study
from .cee import LinkKind
from .estimators import Emee, TwoStage, TwoStageCF, Wcls, diagnose_wa2, estimate
from .io import dump_json, load_json, load_panel_csv, write_panel_csv, write_rows_csv
from .nuisance import fit_nuisance
from .simgen import generate, make_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kv(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def build_parser():
    p = _Parser(prog="excursionlab", description="Causal excursion effect estimation for MRT data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a simulated panel and write it as CSV")
    s.add_argument("--generator", choices=["continuous", "binary", "count"], default="continuous")
    s.add_argument("--n", type=int, default=None, help="trajectories (default 100)")
    s.add_argument("--T", type=int, default=None, help="decision points (default 10)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--form", default=None)
    s.add_argument("--param", action="append", metavar="KEY=VALUE", help="other generator parameters")
    s.add_argument("--config", help="JSON file with generator parameters")
    s.add_argument("--out", required=True)

    e = sub.add_parser("estimate", help="estimate the effect from a panel CSV")
    e.add_argument("panel")
    e.add_argument("--link", choices=["identity", "log"], default="identity")
    e.add_argument("--method", choices=["wcls", "emee", "two_stage", "two_stage_cf"], default="two_stage")
    e.add_argument("--nuisance", default="linear",
                   help="per_time_mean | linear | gam | knn | tree | forest, or a JSON spec")
    e.add_argument("--dmode", default=None, help="unit | per_time | pooled | scalar (default depends on link)")
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--fold-seed", type=int, default=0)
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--ssc", choices=["on", "off"], default="on")
    e.add_argument("--moderator", nargs="*", default=None, help="f_* columns forming the moderator")
    e.add_argument("--controls", nargs="*", default=(), help="history columns added to the baseline design")
    e.add_argument("--features", nargs="*", default=None, help="history columns used by the nuisance")
    e.add_argument("--per-time", action="store_true", help="fit the nuisance separately at each t")
    e.add_argument("--out", help="write the report JSON here as well as to stdout")

    b = sub.add_parser("bench", help="run a Monte Carlo study from a JSON config")
    b.add_argument("config")
    b.add_argument("--out-dir", default=None)
    b.add_argument("--replicates", type=int, default=None)

    d = sub.add_parser("diagnose", help="cross-time Gram summary of the estimating-function atoms")
    d.add_argument("panel")
    d.add_argument("--link", choices=["identity", "log"], default="identity")
    d.add_argument("--nuisance", default="linear")
    d.add_argument("--moderator", nargs="*", default=None)
    d.add_argument("--out", help="CSV file for the T x T matrix")
    return p


def _nuisance(text):
    text = text.strip()
    return nuisance_from_spec(json.loads(text) if text.startswith("{") else text)


def cmd_simulate(args):
    params = load_json(args.config) if args.config else {}
    params.update(_kv(args.param))
    # explicit flags beat the config file
    params.update({k: v for k, v in (("n", args.n), ("T", args.T), ("seed", args.seed)) if v is not None})
    if args.form:
        params["form"] = args.form
    cfg = make_config(args.generator, **params)
    panel, truth = generate(cfg)
    write_panel_csv(panel, args.out)
    return {"out": args.out, "n": panel.n, "T": panel.T, "beta_star": truth.beta_star.tolist()}


def cmd_estimate(args):
    panel = load_panel_csv(args.panel, tuple(args.moderator) if args.moderator else None)
    link = LinkKind.parse(args.link)
    features = tuple(args.features) if args.features is not None else None
    if args.method == "wcls":
        method = Wcls(tuple(args.controls))
    elif args.method == "emee":
        method = Emee(tuple(args.controls))
    else:
        common = dict(nuisance=_nuisance(args.nuisance), dmode=dmode_from_spec(args.dmode),
                      pooled=not args.per_time, features=features)
        if args.method == "two_stage":
            method = TwoStage(**common)
        else:
            method = TwoStageCF(K=args.folds, seed=args.fold_seed, **common)
    report = estimate(panel, method, link, level=args.level, ssc=args.ssc == "on")
    out = report.to_dict()
    out["moderator"] = list(panel.moderator_names)
    if args.out:
        dump_json(out, args.out)
    return out


def cmd_bench(args):
    cfg = load_json(args.config)
    if args.out_dir:
        cfg["output_dir"] = args.out_dir
    if args.replicates:
        cfg["replicates"] = args.replicates
    study = StudyConfig.from_dict(cfg)
    _, metrics = run_study(study)
    return {"output_dir": study.output_dir, "metrics": [m.as_dict() for m in metrics]}


def cmd_diagnose(args):
    panel = load_panel_csv(args.panel, tuple(args.moderator) if args.moderator else None)
    link = LinkKind.parse(args.link)
    nfit = fit_nuisance(panel, _nuisance(args.nuisance))
    report = estimate(panel, TwoStage(_nuisance(args.nuisance)), link, ssc=False)
    mat = diagnose_wa2(panel, report.beta, nfit, link)
    if args.out:
        rows = [{"t": t + 1, **{f"u{u + 1}": float(mat[t, u]) for u in range(panel.T)}} for t in range(panel.T)]
        write_rows_csv(rows, args.out)
    off = mat[~np.eye(panel.T, dtype=bool)]
    return {"beta": report.beta.tolist(), "matrix": mat.tolist(),
            "max_off_diagonal": float(np.nanmax(off)) if off.size else 0.0}


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bench": cmd_bench, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "type": "usage"}))
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            result = COMMANDS[args.command](args)
    except Exception as exc:  # report every failure as JSON
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}))
        return 1
    print(dump_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
