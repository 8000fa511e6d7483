"""Monte Carlo study engine and summary metrics."""

from __future__ import annotations

import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dweights as dw
from . import nuisance as nu
from .estimators import Emee, Oracle, TwoStage, TwoStageCF, Wcls, estimate
from .io import dump_json, write_rows_csv
from .simgen import CONFIG_TYPES, TruthHandle, generate, make_config, marginal_beta_star
from .zestim import FoldError, NonConvergenceError

log = logging.getLogger(__name__)

FAILURE_CAP = 0.02
THREADS_ENV = "EXCURSIONLAB_THREADS"

RAW_FIELDS = ["setting", "method", "replicate", "seed", "n", "truth", "estimate", "se",
              "ci_low", "ci_high", "covered", "runtime", "error"]
METRIC_FIELDS = ["setting", "method", "n_ok", "n_failed", "mean_bias", "mse", "emp_sd", "mean_se",
                 "coverage", "relative_efficiency", "mean_runtime"]


class StudyAborted(RuntimeError):
    pass


def relative_efficiency(var_target: float, var_baseline: float) -> float:
    """var_baseline / var_target; above one means the target is more efficient."""
    if not (var_target > 0 and var_baseline > 0):
        raise ValueError("variances must be positive")
    return float(var_baseline) / float(var_target)


def bootstrap_ratio_interval(target, baseline, n_boot=2000, level=0.95, seed=0):
    """Percentile interval for var(baseline)/var(target), resampling replicates in pairs."""
    target = np.asarray(target, float)
    baseline = np.asarray(baseline, float)
    if target.shape != baseline.shape:
        raise ValueError("paired samples must have equal length")
    rng = np.random.default_rng(seed)
    m = target.size
    idx = rng.integers(0, m, size=(n_boot, m))
    ratios = baseline[idx].var(axis=1, ddof=1) / target[idx].var(axis=1, ddof=1)
    lo, hi = np.quantile(ratios, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


# -- config parsing --------------------------------------------------------


_NUISANCE = {
    "per_time_mean": nu.PerTimeMean,
    "constant": nu.Constant,
    "linear": nu.LinearLS,
    "gam": lambda **kw: nu.LinearLS(**{"spline_knots": 5, **kw}),
    "knn": nu.KernelKNN,
    "tree": nu.Tree,
    "forest": nu.Forest,
}


def nuisance_from_spec(spec) -> object:
    """``{"kind": "forest", "n_trees": 100}`` or a bare kind name."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "stack":
        members = tuple(nuisance_from_spec(m) for m in spec.pop("members"))
        return nu.Stack(members, spec.pop("link", "identity"))
    try:
        return _NUISANCE[kind](**spec)
    except KeyError:
        raise ValueError(f"unknown nuisance kind {kind!r}; expected one of {sorted(_NUISANCE) + ['stack']}") from None


def dmode_from_spec(spec):
    if spec is None:
        return None
    if isinstance(spec, str):
        return dw.parse_dmode(spec)
    spec = dict(spec)
    return dw.parse_dmode(spec.pop("kind"), **spec)


def method_from_spec(spec: dict, truth: TruthHandle | None = None):
    spec = dict(spec)
    name = spec.pop("name")
    spec.pop("label", None)
    if name == "wcls":
        return Wcls(tuple(spec.get("controls", ())), spec.get("tilde_prob"))
    if name == "emee":
        return Emee(tuple(spec.get("controls", ())), spec.get("tilde_prob"))
    common = dict(
        nuisance=nuisance_from_spec(spec.get("nuisance", "linear")),
        dmode=dmode_from_spec(spec.get("dmode")),
        pooled=bool(spec.get("pooled", True)),
        features=tuple(spec["features"]) if spec.get("features") is not None else None,
    )
    if name == "two_stage":
        return TwoStage(**common)
    if name == "two_stage_cf":
        return TwoStageCF(K=int(spec.get("folds", 5)), seed=int(spec.get("fold_seed", 0)), **common)
    if name == "oracle":
        if truth is None:
            raise ValueError("the oracle needs simulated data with a truth handle")
        return Oracle(truth, spec.get("mc_budget"))
    raise ValueError(f"unknown method {name!r}")


def method_label(spec: dict) -> str:
    return spec.get("label") or spec["name"]


@dataclass(frozen=True)
class StudyConfig:
    generator: str
    params: dict
    methods: tuple
    replicates: int = 100
    base_seed: int = 1
    level: float = 0.95
    ssc: bool = True
    sweep: dict = field(default_factory=dict)
    sizes: tuple = ()
    baseline: str | None = None
    output_dir: str = "study_out"

    def __post_init__(self):
        if self.generator not in CONFIG_TYPES:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        for key, grid in self.sweep.items():
            if not list(grid):
                raise ValueError(f"sweep grid for {key!r} is empty")
        labels = [method_label(m) for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError("method labels must be unique")
        make_config(self.generator, **self.params)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {"generator", "params", "methods", "replicates", "base_seed", "level", "ssc",
                 "sweep", "sizes", "baseline", "output_dir"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown study config keys: {sorted(extra)}")
        d = dict(d)
        d["methods"] = tuple(d["methods"])
        d["sizes"] = tuple(d.get("sizes", ()))
        d.setdefault("params", {})
        return cls(**d)

    def settings(self):
        """(setting id, simulation config) for every grid point."""
        keys = sorted(self.sweep)
        grids = [list(self.sweep[k]) for k in keys]
        sizes = list(self.sizes) or [self.params.get("n", 100)]
        out = []
        for n in sizes:
            for combo in itertools.product(*grids) if keys else [()]:
                params = {**self.params, **dict(zip(keys, combo)), "n": n}
                tag = ",".join([f"n={n}"] + [f"{k}={v}" for k, v in zip(keys, combo)])
                out.append((tag, make_config(self.generator, **params)))
        return out

    def baseline_label(self, link) -> str:
        if self.baseline:
            return self.baseline
        want = "wcls" if link.value == "identity" else "emee"
        for m in self.methods:
            if m["name"] == want:
                return method_label(m)
        return method_label(self.methods[0])


@dataclass(frozen=True)
class MetricsRow:
    setting: str
    method: str
    n_ok: int
    n_failed: int
    mean_bias: float
    mse: float
    emp_sd: float
    mean_se: float
    coverage: float
    relative_efficiency: float
    mean_runtime: float

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_FIELDS}


_ESTIMATION_ERRORS = (NonConvergenceError, FoldError, ValueError, np.linalg.LinAlgError, FloatingPointError)


def run_replicate(cfg, methods: tuple, setting: str, r: int, base_seed: int, level: float, ssc: bool):
    """Estimate every method on replicate r; returns raw rows (failures included)."""
    seed = base_seed + r
    sim = replace(cfg, seed=seed)
    panel, truth = generate(sim)
    target = float(truth.beta_star[0])
    rows = []
    for spec in methods:
        label = method_label(spec)
        row = dict(setting=setting, method=label, replicate=r, seed=seed, n=sim.n, truth=target)
        started = time.perf_counter()
        try:
            method = method_from_spec(spec, truth)
            rep = estimate(panel, method, sim.link, level=level, ssc=ssc)
            b, se = float(rep.beta[0]), float(rep.se[0])
            lo, hi = float(rep.ci[0, 0]), float(rep.ci[0, 1])
            row.update(estimate=b, se=se, ci_low=lo, ci_high=hi, covered=int(lo <= target <= hi), error="")
        except _ESTIMATION_ERRORS as exc:
            row.update(estimate=None, se=None, ci_low=None, ci_high=None, covered=None,
                       error=f"{type(exc).__name__}: {exc}")
        row["runtime"] = time.perf_counter() - started
        rows.append(row)
    return rows


def _workers():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _replicate_job(args):
    return run_replicate(*args)


def summarize(raw_rows, baselines: dict) -> list[MetricsRow]:
    """Aggregate raw rows; ``baselines`` maps setting -> baseline method label."""
    groups: dict = {}
    for row in sorted(raw_rows, key=lambda r: (r["setting"], r["method"], r["replicate"])):
        groups.setdefault((row["setting"], row["method"]), []).append(row)
    variances = {}
    for key, rows in groups.items():
        est = np.array([r["estimate"] for r in rows if not r["error"]], float)
        variances[key] = float(est.var(ddof=1)) if est.size > 1 else float("nan")
    out = []
    for (setting, method), rows in groups.items():
        ok = [r for r in rows if not r["error"]]
        est = np.array([r["estimate"] for r in ok], float)
        truth = np.array([r["truth"] for r in ok], float)
        se = np.array([r["se"] for r in ok], float)
        cov = np.array([r["covered"] for r in ok], float)
        base = variances.get((setting, baselines.get(setting)), float("nan"))
        var = variances[(setting, method)]
        re = relative_efficiency(var, base) if var > 0 and base > 0 else float("nan")
        nan = float("nan")
        out.append(MetricsRow(
            setting, method, len(ok), len(rows) - len(ok),
            float(np.mean(est - truth)) if ok else nan,
            float(np.mean((est - truth) ** 2)) if ok else nan,
            float(np.std(est, ddof=1)) if len(ok) > 1 else nan,
            float(np.mean(se)) if ok else nan,
            float(np.mean(cov)) if ok else nan,
            re,
            float(np.mean([r["runtime"] for r in rows])),
        ))
    return out


def run_study(config: StudyConfig, write: bool = True):
    """Run every (setting, replicate, method); returns (raw rows, metrics rows)."""
    raw = []
    baselines = {}
    workers = _workers()
    for setting, cfg in config.settings():
        baselines[setting] = config.baseline_label(cfg.link)
        jobs = [(cfg, config.methods, setting, r, config.base_seed, config.level, config.ssc)
                for r in range(config.replicates)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_replicate_job, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
                rows = [row for chunk in results for row in chunk]
        else:
            rows = [row for job in jobs for row in _replicate_job(job)]
        for label in {r["method"] for r in rows}:
            failed = sum(1 for r in rows if r["method"] == label and r["error"])
            if failed > FAILURE_CAP * config.replicates:
                raise StudyAborted(f"{label} failed in {failed} of {config.replicates} replicates at {setting}")
        raw.extend(rows)
        log.info("finished %s", setting)
    metrics = summarize(raw, baselines)
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(raw, out / "raw.csv", RAW_FIELDS)
        write_rows_csv([m.as_dict() for m in metrics], out / "metrics.csv", METRIC_FIELDS)
        dump_json({"settings": [s for s, _ in config.settings()], "baselines": baselines,
                   "truth": {s: marginal_beta_star(c) for s, c in config.settings()}},
                  out / "study.json")
    return raw, metrics
