"""Acceptance criteria, one PASS/FAIL line each (see the summary section).

These are Monte Carlo studies; the full file takes the better part of an
hour on one core.  Run alone with ``pytest -m acceptance -s``.
"""

import csv
import json
import os
import shutil
import subprocess
import sys
import warnings
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from conftest import make_panel
from excursionlab.bench import StudyConfig, bootstrap_ratio_interval, run_study
from excursionlab.cee import cee_terms, phi_values
from excursionlab.dweights import AnalyticScalar, PerTimeEmpirical, fit_dweights
from excursionlab.estimators import CeeSystem
from excursionlab.inference import CorrectionInputs, small_sample_correct
from excursionlab.nuisance import LinearLS, fit_nuisance
from excursionlab.panel import Panel
from excursionlab.simgen import ContinuousConfig, simulate_draw
from excursionlab.zestim import SolveOptions, solve_z

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

ROOT = Path(__file__).resolve().parents[1]
FOREST = {"kind": "forest", "n_trees": 50}
SETTINGS = {
    "continuous": {"form": "simple_nonlinear", "lam1": 1.0, "lam2": 0.0, "lam3": 1.0, "rho": 0.5},
    "binary": {"form": "simple_nonlinear", "lam": 0.8, "rho": 0.1},
    "count": {"form": "simple_nonlinear", "lam": 0.8, "rho": 0.01},
}
BASELINE = {"continuous": "wcls", "binary": "emee", "count": "emee"}


def study(generator, params, methods, replicates, base_seed, sizes=()):
    cfg = StudyConfig.from_dict({"generator": generator, "params": params, "methods": methods,
                                 "replicates": replicates, "base_seed": base_seed, "sizes": list(sizes)})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw, metrics = run_study(cfg, write=False)
    return raw, {(m.setting, m.method): m for m in metrics}


def estimates(raw, method):
    return np.array([r["estimate"] for r in sorted(raw, key=lambda r: r["replicate"])
                     if r["method"] == method and not r["error"]], float)


@lru_cache(maxsize=None)
def criterion4_study():
    cfg = json.loads((ROOT / "configs" / "criterion4.json").read_text())
    cfg.pop("output_dir")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw, metrics = run_study(StudyConfig.from_dict(cfg), write=False)
    return raw, {m.method: m for m in metrics}


def rel_fd_error(system, theta, h=1e-6):
    analytic = system.jacobian(theta).mean(axis=0)
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        cols.append((system.score(theta + e).mean(axis=0) - system.score(theta - e).mean(axis=0)) / (2 * h))
    fd = np.stack(cols, axis=-1)
    return float(np.max(np.abs(analytic - fd)) / np.max(np.abs(analytic)))


def test_criterion_1_algebraic_suite(criterion):
    checks = {}
    # phi = W r f against the formulas written out directly
    P = make_panel(n=50, T=4, p=2, seed=1, avail_rate=0.8)
    rng = np.random.default_rng(0)
    mu1, mu0 = rng.normal(size=(2, P.n, P.T))
    beta = np.array([0.3, -0.2])
    gamma = P.moderator @ beta
    W = P.avail * (P.treat - P.prob) / (P.prob * (1 - P.prob))
    r = P.outcome - (P.treat + P.prob - 1) * gamma - (1 - P.prob) * mu1 - P.prob * mu0
    got = phi_values(cee_terms("identity", P.avail, P.prob, P.treat, P.outcome, P.moderator, mu1, mu0, beta),
                     P.moderator)
    checks["phi"] = float(np.max(np.abs(got - (W * r)[..., None] * P.moderator)))
    ok = checks["phi"] < 1e-12

    for link in ("identity", "log"):
        Q = make_panel(n=60, T=3, p=2, seed=3, link=link)
        mu = fit_nuisance(Q, LinearLS()).predict_panel(Q)
        checks[f"fd_{link}"] = rel_fd_error(CeeSystem(Q, link, *mu), np.array([0.2, -0.1]))
        ok &= checks[f"fd_{link}"] < 1e-5

        R = make_panel(n=80, T=4, seed=6, link=link)
        mu = fit_nuisance(R, LinearLS()).predict_panel(R)
        a = fit_dweights(R, mu, [0.2], link, PerTimeEmpirical()).on_panel(R)
        b = fit_dweights(R, mu, [0.2], link, AnalyticScalar()).on_panel(R)
        checks[f"scalar_{link}"] = float(np.max(np.abs(a - b)) / (1 + np.max(np.abs(a))))
        ok &= checks[f"scalar_{link}"] <= 1e-10

    S = make_panel(n=40, T=5, seed=9)
    fit = solve_z(CeeSystem(S, "identity", *fit_nuisance(S, LinearLS()).predict_panel(S)),
                  SolveOptions(theta0=(3.0,)))
    checks["newton_iters"] = fit.iterations
    ok &= fit.converged and fit.iterations == 1

    d = simulate_draw(ContinuousConfig(n=100_000, T=4, rho=0.5, seed=1))
    eps = d.y - np.where(d.a == 1, d.mu1, d.mu0)
    t = np.arange(4)
    target = 0.5 ** (np.abs(t[:, None] - t[None, :]) / 2)
    checks["corr"] = float(np.max(np.abs(np.corrcoef(eps.T) - target)))
    ok &= checks["corr"] < 0.03

    n = 12
    one = np.ones((n, 1))
    D = Panel(one, 0.5 * one, one, 2.0 * one, np.zeros((n, 1, 0)), np.ones((n, 1, 1)))
    sys_ = CeeSystem(D, "identity", 0 * one, 0 * one)
    dec = sys_.decompose(np.array([0.3]))
    inp = CorrectionInputs(dec.rows, dec.resid, dec.dresid, sys_.jacobian(np.array([0.3])).mean(axis=0))
    g = inp.scores()
    closed = (g.T @ g / n) / (1 - 1 / n) ** 2
    checks["ssc"] = float(abs(small_sample_correct(inp).meat[0, 0] / closed[0, 0] - 1))
    ok &= checks["ssc"] < 1e-12

    detail = ", ".join(f"{k}={v:.2g}" if isinstance(v, float) else f"{k}={v}" for k, v in checks.items())
    criterion(1, bool(ok), detail)


def test_criterion_2_global_robustness(criterion):
    params = {"form": "linear", "lam2": 0.0, "lam3": 1.0, "rho": 0.5, "n": 300}
    method = {"name": "two_stage", "nuisance": {"kind": "constant", "value": 0.0}, "dmode": "unit", "label": "frozen"}
    raw, _ = study("continuous", params, [method], 500, 2000)
    est = estimates(raw, "frozen")
    bias = abs(est.mean() - 0.5)
    bound = 4 * est.std(ddof=1) / np.sqrt(est.size)
    criterion(2, est.size == 500 and bias < bound, f"|mean-0.5|={bias:.4f} < {bound:.4f} over {est.size} reps")


CONSISTENCY_METHODS = [
    {"name": "two_stage", "nuisance": "linear", "label": "two_stage_linear"},
    {"name": "two_stage", "nuisance": FOREST, "label": "two_stage_forest"},
    {"name": "two_stage_cf", "nuisance": "linear", "label": "two_stage_cf_linear"},
    {"name": "two_stage_cf", "nuisance": FOREST, "label": "two_stage_cf_forest"},
    {"name": "oracle"},
]


def test_criterion_3_consistency(criterion):
    sizes = (30, 60, 100, 300)
    bad = []
    worst = 0
    for gen, params in SETTINGS.items():
        methods = [{"name": BASELINE[gen]}] + CONSISTENCY_METHODS
        _, metrics = study(gen, params, methods, 500, 3000, sizes)
        for m in methods:
            label = m.get("label", m["name"])
            mse = [metrics[(f"n={n}", label)].mse for n in sizes]
            inversions = int(np.sum(np.diff(mse) > 0))
            worst = max(worst, inversions)
            if inversions > 1 or not mse[-1] < mse[0]:
                bad.append(f"{gen}/{label} {np.round(mse, 5).tolist()}")
    criterion(3, not bad, f"{3 * len(methods)} estimator/outcome pairs, worst inversions={worst}"
              + (f"; failing: {'; '.join(bad)}" if bad else ""))


def test_criterion_4_variance_weighting(criterion):
    _, m = criterion4_study()
    re = m["two_stage_ptm"].relative_efficiency
    var = {k: v.emp_sd ** 2 for k, v in m.items()}
    ratio = max(var["oracle"] / v for k, v in var.items() if k != "oracle")
    criterion(4, re >= 1.2 and ratio <= 1.05,
              f"RE(two_stage_ptm vs wcls)={re:.3f} (>= 1.2); max var(oracle)/var(other)={ratio:.3f} (<= 1.05)")


def test_criterion_5_nonlinearity(criterion):
    params = {"form": "periodic", "lam1": 3.0, "lam2": 0.0, "lam3": 1.0, "rho": 0.5, "n": 100}
    methods = [{"name": "wcls"}, {"name": "two_stage", "nuisance": "gam", "label": "two_stage_gam"}]
    raw, metrics = study("continuous", params, methods, 1000, 5000)
    re = metrics[("n=100", "two_stage_gam")].relative_efficiency
    lo, hi = bootstrap_ratio_interval(estimates(raw, "two_stage_gam"), estimates(raw, "wcls"), n_boot=2000, seed=5)
    criterion(5, re > 1.0 and lo > 1.0, f"RE={re:.3f}, 95% bootstrap interval [{lo:.3f}, {hi:.3f}] excludes 1")


def test_criterion_6_coverage(criterion):
    parts = []
    ok = True
    for gen, params in SETTINGS.items():
        methods = [{"name": BASELINE[gen]},
                   {"name": "two_stage", "nuisance": "linear", "label": "two_stage_linear"},
                   {"name": "two_stage_cf", "nuisance": FOREST, "label": "two_stage_cf_forest"}]
        _, metrics = study(gen, {**params, "n": 100}, methods, 1000, 6000)
        for m in methods:
            label = m.get("label", m["name"])
            cov = metrics[("n=100", label)].coverage
            ok &= 0.925 <= cov <= 0.975
            parts.append(f"{gen}/{label}={cov:.3f}")
    criterion(6, bool(ok), "coverage in [0.925, 0.975]: " + ", ".join(parts))


def test_criterion_7_se_calibration(criterion):
    params = {"form": "linear", "lam2": 0.0, "lam3": 1.0, "rho": 0.5, "n": 100}
    methods = [{"name": "wcls"},
               {"name": "two_stage", "nuisance": "linear", "label": "two_stage_linear"},
               {"name": "two_stage", "nuisance": "per_time_mean", "label": "two_stage_ptm"},
               {"name": "two_stage_cf", "nuisance": "linear", "label": "two_stage_cf_linear"}]
    _, metrics = study("continuous", params, methods, 1000, 7000)
    parts = []
    ok = True
    for (_, label), m in metrics.items():
        dev = m.mean_se / m.emp_sd - 1
        ok &= abs(dev) < 0.10
        parts.append(f"{label}={dev:+.3f}")
    criterion(7, bool(ok), "mean SE / SD - 1 within 0.10: " + ", ".join(parts))


def test_criterion_8_crossfit_neutral(criterion):
    _, m = criterion4_study()
    ratio = m["two_stage_cf_ptm"].mse / m["two_stage_ptm"].mse
    criterion(8, abs(ratio - 1) < 0.15, f"MSE(cf)/MSE(no cf)={ratio:.3f} (|. - 1| < 0.15)")


def _cli():
    exe = shutil.which("excursionlab")
    return [exe] if exe else [sys.executable, "-m", "excursionlab"]


def test_criterion_9_cli_pipeline(criterion, tmp_path):
    env = dict(os.environ, PYTHONWARNINGS="ignore")
    steps = [
        ["simulate", "--generator", "continuous", "--config", str(ROOT / "configs" / "simulate_linear.json"),
         "--out", str(tmp_path / "panel.csv")],
        ["estimate", str(tmp_path / "panel.csv"), "--method", "two_stage", "--nuisance", "per_time_mean",
         "--dmode", "per_time"],
        ["bench", str(ROOT / "configs" / "criterion4.json"), "--out-dir", str(tmp_path / "bench")],
    ]
    codes = []
    for argv in steps:
        res = subprocess.run(_cli() + argv, capture_output=True, text=True, env=env, cwd=tmp_path)
        codes.append(res.returncode)
    if any(codes):
        criterion(9, False, f"exit codes {codes}")
    with open(tmp_path / "bench" / "metrics.csv", newline="") as fh:
        rows = {r["method"]: r for r in csv.DictReader(fh)}
    re = float(rows["two_stage_ptm"]["relative_efficiency"])
    var = {k: float(r["emp_sd"]) ** 2 for k, r in rows.items()}
    ratio = max(var["oracle"] / v for k, v in var.items() if k != "oracle")
    _, ref = criterion4_study()
    same = abs(re - ref["two_stage_ptm"].relative_efficiency) < 1e-9
    criterion(9, re >= 1.2 and ratio <= 1.05 and same,
              f"exit codes {codes}; RE from CLI={re:.3f} (matches in-process: {same}); oracle ratio={ratio:.3f}")
