"""Causal excursion effect estimators built on the Z-estimation engine.

* ``Wcls`` / ``Emee``: the weighted, centred baselines, solved jointly for
  (alpha, beta) with a constant numerator probability; only beta is reported.
* ``TwoStage``: fit mu-hat, solve the unweighted system for an initial
  beta, fit d-hat there, then solve the d-weighted system.
* ``TwoStageCF``: the same with nuisances fitted off-fold.
* ``Oracle``: true mu and Monte Carlo d* from a simulation truth handle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cee import LinkKind, baseline_terms, cee_terms, phi_values
from .dweights import DWeightFit, Unit, default_dmode, fit_dweights
from .inference import CiSpec, CorrectionInputs, confidence_interval, small_sample_correct
from .nuisance import LinearLS, fit_nuisance
from .panel import Panel, validate_panel
from .zestim import (Decomposition, EstimatingSystem, NonConvergenceError, SolveOptions,
                     crossfit_system, solve_z)


# -- estimating systems -------------------------------------------------------


class CeeSystem(EstimatingSystem):
    """m_i(beta) = sum_t d_t phi_t(beta, mu) for fixed mu and d."""

    def __init__(self, panel: Panel, link, mu1, mu0, dmats=None):
        self.panel = panel
        self.link = LinkKind.parse(link)
        self.mu1 = np.asarray(mu1, float)
        self.mu0 = np.asarray(mu0, float)
        self.dmats = None if dmats is None else np.asarray(dmats, float)
        self.n, self.dim = panel.n, panel.p
        self.row_weights = None

    def _terms(self, beta):
        P = self.panel
        return cee_terms(self.link, P.avail, P.prob, P.treat, P.outcome, P.moderator,
                         self.mu1, self.mu0, beta)

    def _rows(self, terms):
        # D_t = d_t (W_t f_t); with unit d this is just W_t f_t
        wf = terms.weight[..., None] * self.panel.moderator
        if self.dmats is None:
            return wf
        return np.einsum("itab,itb->ita", self.dmats, wf)

    def score(self, beta):
        terms = self._terms(beta)
        return np.einsum("ita,it->ia", self._rows(terms), terms.resid)

    def jacobian(self, beta):
        terms = self._terms(beta)
        F = self.panel.moderator
        return np.einsum("ita,it,itb->iab", self._rows(terms), terms.dresid, F)

    def decompose(self, beta):
        terms = self._terms(beta)
        return Decomposition(self._rows(terms), terms.resid,
                             terms.dresid[..., None] * self.panel.moderator)


class BaselineSystem(EstimatingSystem):
    """Joint (alpha, beta) system of the weighted, centred baselines."""

    def __init__(self, panel: Panel, link, controls, tilde_prob):
        self.panel = panel
        self.link = LinkKind.parse(link)
        self.controls = np.asarray(controls, float)
        self.tilde_prob = float(tilde_prob)
        self.q_alpha = self.controls.shape[-1]
        self.n, self.dim = panel.n, self.q_alpha + panel.p
        self.row_weights = None

    def _terms(self, theta):
        P = self.panel
        alpha, beta = theta[: self.q_alpha], theta[self.q_alpha:]
        return baseline_terms(self.link, P.avail, P.prob, P.treat, P.outcome, self.controls,
                              P.moderator, self.tilde_prob, alpha, beta)

    def score(self, theta):
        bt = self._terms(np.asarray(theta, float))
        return np.einsum("itq,it->iq", bt.rows, bt.resid)

    def jacobian(self, theta):
        bt = self._terms(np.asarray(theta, float))
        return np.einsum("ita,itb->iab", bt.rows, bt.dresid)

    def decompose(self, theta):
        return Decomposition(*self._terms(np.asarray(theta, float)))


def tilde_probability(panel: Panel) -> float:
    on = panel.avail == 1
    if not on.any():
        raise ValueError("no available decision points")
    return float(panel.prob[on].mean())


def control_design(panel: Panel, columns=()) -> np.ndarray:
    """b_t = (1, t/T) followed by the named history columns."""
    n, T = panel.n, panel.T
    parts = [np.ones((n, T)), np.broadcast_to(np.arange(1, T + 1) / T, (n, T))]
    for name in columns:
        if name not in panel.history_names:
            raise ValueError(f"unknown control column {name!r}")
        parts.append(panel.history_column(name))
    return np.stack(parts, axis=-1)


# -- method specifications ---------------------------------------------------


@dataclass(frozen=True)
class Wcls:
    controls: tuple[str, ...] = ()
    tilde_prob: float | None = None
    name = "wcls"


@dataclass(frozen=True)
class Emee:
    controls: tuple[str, ...] = ()
    tilde_prob: float | None = None
    name = "emee"


@dataclass(frozen=True)
class TwoStage:
    nuisance: object = field(default_factory=LinearLS)
    dmode: object = None  # None picks the link default
    pooled: bool = True
    features: tuple[str, ...] | None = None
    name = "two_stage"


@dataclass(frozen=True)
class TwoStageCF:
    nuisance: object = field(default_factory=LinearLS)
    dmode: object = None
    K: int = 5
    seed: int = 0
    pooled: bool = True
    features: tuple[str, ...] | None = None
    name = "two_stage_cf"

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("cross-fitting needs K >= 2")


@dataclass(frozen=True)
class Oracle:
    truth: object
    mc_budget: int | None = None
    name = "oracle"


MethodSpec = Wcls | Emee | TwoStage | TwoStageCF | Oracle


@dataclass(frozen=True)
class EstimateReport:
    method: str
    link: str
    beta: np.ndarray
    sigma: np.ndarray
    sigma_corrected: np.ndarray | None
    se: np.ndarray
    ci: np.ndarray
    level: float
    ci_family: str
    beta_init: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    fit: object = field(default=None, repr=False)

    def to_dict(self):
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "method": self.method,
            "link": self.link,
            "beta": arr(self.beta),
            "se": arr(self.se),
            "ci": arr(self.ci),
            "level": self.level,
            "ci_family": self.ci_family,
            "sigma": arr(self.sigma),
            "sigma_corrected": arr(self.sigma_corrected),
            "beta_init": arr(self.beta_init),
            "diagnostics": self.diagnostics,
        }


def _check_link(method, link):
    if isinstance(method, Wcls) and link is not LinkKind.IDENTITY:
        raise ValueError("WCLS requires the identity link")
    if isinstance(method, Emee) and link is not LinkKind.LOG:
        raise ValueError("EMEE requires the log link")
    if isinstance(method, Oracle) and LinkKind.parse(method.truth.link) is not link:
        raise ValueError("oracle truth was generated under a different link")


def _solve(system, options, theta0=None, folds=None):
    opts = options or SolveOptions()
    if theta0 is not None:
        opts = SolveOptions(opts.tol, opts.max_iter, opts.max_halvings, tuple(np.asarray(theta0, float)), True)
    else:
        opts = SolveOptions(opts.tol, opts.max_iter, opts.max_halvings, opts.theta0, True)
    return solve_z(system, opts, folds=folds)


def _two_stage_parts(panel, train, method, link):
    """Steps 1-3 on ``panel[train]``: (nuisance fit, beta_init, d fit)."""
    sub = panel if train is None else panel.subset(train)
    nfit = fit_nuisance(sub, method.nuisance, pooled=method.pooled, features=method.features)
    mu1, mu0 = nfit.predict_panel(sub)
    init = _solve(CeeSystem(sub, link, mu1, mu0), None)
    dmode = method.dmode if method.dmode is not None else default_dmode(link)
    dfit = fit_dweights(sub, (mu1, mu0), init.theta, link, dmode)
    return nfit, init, dfit


def _weighted_system(panel, link, nfit, dfit: DWeightFit):
    mu1, mu0 = nfit.predict_panel(panel)
    dmats = None if isinstance(dfit.mode, Unit) else dfit.on_panel(panel)
    return CeeSystem(panel, link, mu1, mu0, dmats)


def estimate(panel: Panel, method, link="identity", level: float = 0.95, ssc: bool = True,
             options: SolveOptions | None = None, validate: bool = True) -> EstimateReport:
    """Estimate the causal excursion effect with ``method``.

    ``ssc`` switches on the leverage-corrected variance, which then drives
    the reported standard errors and intervals.
    """
    link = LinkKind.parse(link)
    _check_link(method, link)
    if validate:
        validate_panel(panel, link).raise_if_failed()
    started = time.perf_counter()
    beta_init = None
    diag: dict = {}
    q0 = 0
    if isinstance(method, (Wcls, Emee)):
        tp = method.tilde_prob if method.tilde_prob is not None else tilde_probability(panel)
        controls = control_design(panel, method.controls)
        system = BaselineSystem(panel, link, controls, tp)
        theta0 = np.zeros(system.dim)
        if link is LinkKind.LOG:
            ybar = float(panel.outcome[panel.avail == 1].mean())
            theta0[0] = np.log(ybar) if ybar > 0 else 0.0
        fit = _solve(system, options, theta0)
        q0 = system.q_alpha
        diag["tilde_prob"] = tp
    elif isinstance(method, TwoStage):
        nfit, init, dfit = _two_stage_parts(panel, None, method, link)
        beta_init = init.theta
        system = _weighted_system(panel, link, nfit, dfit)
        fit = _solve(system, options, beta_init)
        diag["init_iterations"] = init.iterations
        diag["dweight_fallback_times"] = list(dfit.fallback_times)
    elif isinstance(method, TwoStageCF):
        inits = []

        def fit_fold(train, held):
            nfit, init, dfit = _two_stage_parts(panel, train, method, link)
            inits.append(init.theta)
            return _weighted_system(panel.subset(held), link, nfit, dfit)

        system = crossfit_system(fit_fold, panel.n, method.K, method.seed)
        beta_init = np.mean(inits, axis=0)
        fit = _solve(system, options, beta_init, folds=system.folds)
        diag["fold_sizes"] = [len(f) for f in system.folds]
    elif isinstance(method, Oracle):
        mu1, mu0 = method.truth.mu_panel(panel)
        dfit = method.truth.dstar_fit(method.mc_budget)
        system = CeeSystem(panel, link, mu1, mu0, dfit.on_panel(panel))
        fit = _solve(system, options, method.truth.beta_star)
    else:
        raise TypeError(f"unknown method {method!r}")

    p = panel.p
    block = slice(q0, q0 + p)
    beta = fit.theta[block]
    sigma = fit.sigma[block, block]
    sigma_c = None
    if ssc:
        dec = system.decompose(fit.theta)
        corr = small_sample_correct(CorrectionInputs(dec.rows, dec.resid, dec.dresid, fit.bread, fit.weights))
        sigma_c = corr.sigma[block, block]
        diag["correction_applied"] = corr.applied
        diag["correction_fallbacks"] = corr.n_fallback
        if isinstance(method, TwoStageCF):
            diag["correction_experimental"] = True
    chosen = sigma_c if sigma_c is not None else sigma
    spec = CiSpec.default(level, panel.n, fit.theta.size)
    ci = confidence_interval(beta, chosen, spec)
    diag.update(iterations=fit.iterations, converged=fit.converged, score_norm=fit.score_norm,
                runtime=time.perf_counter() - started)
    return EstimateReport(method.name, link.value, beta, sigma, sigma_c,
                          np.sqrt(np.clip(np.diag(chosen), 0.0, None)), ci, level, spec.family,
                          beta_init, diag, fit)


def diagnose_wa2(panel: Panel, beta, mu, link="identity") -> np.ndarray:
    """Normalised cross-time Gram summary ||P_n phi_t phi_u^T||_F, unit diagonal.

    ``mu`` is a pair (mu1, mu0) of (n, T) arrays or a fitted nuisance.
    Entries for decision points with a vanishing diagonal are NaN.
    """
    link = LinkKind.parse(link)
    mu1, mu0 = mu.predict_panel(panel) if hasattr(mu, "predict_panel") else mu
    terms = cee_terms(link, panel.avail, panel.prob, panel.treat, panel.outcome,
                      panel.moderator, mu1, mu0, np.asarray(beta, float))
    phi = phi_values(terms, panel.moderator)
    gram = np.einsum("ita,iub->tuab", phi, phi) / panel.n
    norms = np.sqrt((gram ** 2).sum(axis=(-1, -2)))
    d = np.sqrt(np.diag(norms))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = norms / np.outer(d, d)
    np.fill_diagonal(out, np.where(d > 0, 1.0, np.nan))
    return out


__all__ = [
    "BaselineSystem", "CeeSystem", "Emee", "EstimateReport", "NonConvergenceError", "Oracle",
    "TwoStage", "TwoStageCF", "Wcls", "control_design", "diagnose_wa2", "estimate",
    "tilde_probability",
]
