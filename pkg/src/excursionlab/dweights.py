"""Estimated efficient weights d_t applied to the estimating-function atoms.

The efficient weight is E(d phi_t | S_t) E(phi_t phi_t^T | S_t)^{-1}.  The
moderator vector f_t plays the role of S_t throughout.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cee import LinkKind, cee_terms, phi_jacobians, phi_values
from .panel import Panel
from .splines import DEFAULT_KNOTS, AdditiveSplineBasis

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-8
DEGENERATE = 1e-20


class DWeightWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Unit:
    pass


@dataclass(frozen=True)
class PerTimeEmpirical:
    """t-specific sample means of both expectations; constant in s."""


@dataclass(frozen=True)
class PooledSmoother:
    """Both expectations regressed on a spline basis of (t, s), pooled over t."""

    knots: int = DEFAULT_KNOTS

    def __post_init__(self):
        if self.knots < 0 or self.knots in (1, 2):
            raise ValueError("knots must be 0 or at least 3")


@dataclass(frozen=True)
class AnalyticScalar:
    """Scalar weight E(W c | s) / E(W^2 r^2 | s) times the identity.

    Both conditional means are per-t least-squares fits on the
    non-constant moderator columns (intercept only when there are none).
    """


DWeightMode = Unit | PerTimeEmpirical | PooledSmoother | AnalyticScalar


def parse_dmode(name: str, knots: int = DEFAULT_KNOTS):
    key = name.strip().lower().replace("-", "_")
    table = {
        "unit": Unit(),
        "per_time": PerTimeEmpirical(),
        "pertimeempirical": PerTimeEmpirical(),
        "empirical": PerTimeEmpirical(),
        "pooled": PooledSmoother(knots),
        "smoother": PooledSmoother(knots),
        "pooledsmoother": PooledSmoother(knots),
        "scalar": AnalyticScalar(),
        "analyticscalar": AnalyticScalar(),
    }
    if key not in table:
        raise ValueError(f"unknown weight mode {name!r}")
    return table[key]


def default_dmode(link):
    return PerTimeEmpirical() if LinkKind.parse(link) is LinkKind.IDENTITY else PooledSmoother()


@dataclass(frozen=True)
class DWeightFit:
    """Fitted d_t as a vectorised evaluator.

    ``evaluator(t_index, S)`` maps 0-based decision indices of shape (m,)
    and moderator rows (m, p) to weights (m, p, p).
    """

    mode: object
    p: int
    T: int
    evaluator: Callable = field(repr=False)
    eps: np.ndarray = field(default=None, repr=False)
    fallback_times: tuple[int, ...] = ()
    model: object = field(default=None, repr=False)

    def on_panel(self, panel: Panel) -> np.ndarray:
        """d_t(f_it) for every point of ``panel``: (n, T, p, p)."""
        n, T = panel.n, panel.T
        tidx = np.broadcast_to(np.arange(T), (n, T)).reshape(-1)
        out = self.evaluator(tidx, panel.moderator.reshape(-1, panel.p))
        return out.reshape(n, T, self.p, self.p)


def eval_dweight(fit: DWeightFit, t: int, s) -> np.ndarray:
    """d_t(s) at 1-based decision point ``t``."""
    if not 1 <= t <= fit.T:
        raise ValueError(f"t={t} outside 1..{fit.T}")
    s = np.asarray(s, float).reshape(1, -1)
    if s.shape[1] != fit.p:
        raise ValueError(f"moderator length {s.shape[1]} does not match p={fit.p}")
    return fit.evaluator(np.array([t - 1]), s)[0]


def floored_inverse(V, rel_floor=EIG_FLOOR, min_trace=0.0):
    """Inverse of a symmetric matrix with eigenvalues floored at rel_floor * trace / p.

    Returns (inverse, floor); the inverse is None when the trace does not
    exceed ``min_trace``.
    """
    V = 0.5 * (V + V.T)
    p = V.shape[0]
    tr = float(np.trace(V))
    if not np.isfinite(tr) or tr <= max(min_trace, 0.0):
        return None, 0.0
    eps = rel_floor * tr / p
    vals, vecs = np.linalg.eigh(V)
    vals = np.maximum(vals, eps)
    return (vecs / vals) @ vecs.T, eps


def _batched_floored_inverse(V, fallback):
    """Row-wise floored inverse; rows with non-positive trace use ``fallback``."""
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    p = V.shape[-1]
    tr = np.trace(V, axis1=-2, axis2=-1)
    bad = ~(np.isfinite(tr) & (tr > 0))
    if bad.any():
        V = V.copy()
        V[bad] = fallback
        tr = np.trace(V, axis1=-2, axis2=-1)
    eps = EIG_FLOOR * tr / p
    vals, vecs = np.linalg.eigh(V)
    vals = np.maximum(vals, eps[..., None])
    return np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / vals, vecs), int(bad.sum())


def _unit_evaluator(p):
    eye = np.eye(p)

    def ev(tidx, S):
        return np.broadcast_to(eye, (len(tidx), p, p)).copy()

    return ev


def fit_dweights(panel: Panel, mu, beta_init, link, mode) -> DWeightFit:
    """Fit d_t at ``beta_init`` given nuisance predictions ``mu = (mu1, mu0)``.

    ``mu`` may also be a fitted nuisance object exposing ``predict_panel``.
    """
    link = LinkKind.parse(link)
    beta_init = np.asarray(beta_init, float)
    if not np.all(np.isfinite(beta_init)):
        raise ValueError("beta_init must be finite")
    p, T = panel.p, panel.T
    if isinstance(mode, Unit):
        return DWeightFit(mode, p, T, _unit_evaluator(p), np.zeros(T))
    mu1, mu0 = mu.predict_panel(panel) if hasattr(mu, "predict_panel") else mu
    terms = cee_terms(link, panel.avail, panel.prob, panel.treat, panel.outcome,
                      panel.moderator, mu1, mu0, beta_init)
    F = panel.moderator
    scale = _residual_scale(terms, panel, mu1, mu0)
    if isinstance(mode, PerTimeEmpirical):
        return _fit_per_time(mode, terms, F, p, T, scale)
    if isinstance(mode, AnalyticScalar):
        return _fit_scalar(mode, terms, panel, p, T, scale)
    if isinstance(mode, PooledSmoother):
        return _fit_smoother(mode, terms, panel, p, T, scale)
    raise TypeError(f"unsupported weight mode {mode!r}")


def _residual_scale(terms, panel, mu1, mu0):
    """Typical squared size of W r before cancellation; round-off sits ~1e-32 below it."""
    raw = np.abs(panel.outcome) + np.abs(mu1) + np.abs(mu0)
    return float(np.mean((terms.weight * raw) ** 2))


def _fit_per_time(mode, terms, F, p, T, scale):
    jac = phi_jacobians(terms, F).mean(axis=0)  # (T, p, p)
    phi = phi_values(terms, F)
    second = np.einsum("ita,itb->tab", phi, phi) / phi.shape[0]
    mats = np.empty((T, p, p))
    eps = np.zeros(T)
    failed = []
    for t in range(T):
        inv, eps[t] = floored_inverse(second[t], min_trace=DEGENERATE * scale)
        if inv is None or not np.all(np.isfinite(jac[t])):
            failed.append(t + 1)
            mats[t] = np.eye(p)
        else:
            mats[t] = jac[t] @ inv
    if failed:
        msg = f"degenerate second moment at t={failed}; using unit weights there"
        log.warning(msg)
        warnings.warn(msg, DWeightWarning)

    def ev(tidx, S):
        return mats[np.asarray(tidx)]

    return DWeightFit(mode, p, T, ev, eps, tuple(failed))


def _moderator_design(F2d, keep):
    return np.column_stack([np.ones(F2d.shape[0]), F2d[:, keep]])


def _fit_scalar(mode, terms, panel, p, T, scale):
    F = panel.moderator
    on = panel.avail == 1
    num_y = terms.weight * terms.dresid
    den_y = (terms.weight * terms.resid) ** 2
    models = []
    failed = []
    for t in range(T):
        rows = on[:, t]
        Ft = F[rows, t]
        keep = np.flatnonzero(Ft.std(axis=0) > 1e-12) if rows.any() else np.array([], int)
        if not rows.any():
            models.append(None)
            failed.append(t + 1)
            continue
        X = _moderator_design(Ft, keep)
        cn = np.linalg.lstsq(X, num_y[rows, t], rcond=None)[0]
        cd = np.linalg.lstsq(X, den_y[rows, t], rcond=None)[0]
        mean_den = float(np.mean(den_y[rows, t]))
        floor = EIG_FLOOR * mean_den
        if not mean_den > DEGENERATE * scale:
            models.append(None)
            failed.append(t + 1)
            continue
        models.append((keep, cn, cd, floor))
    if failed:
        msg = f"degenerate second moment at t={failed}; using unit weights there"
        log.warning(msg)
        warnings.warn(msg, DWeightWarning)
    eye = np.eye(p)

    def ev(tidx, S):
        tidx = np.asarray(tidx)
        S = np.asarray(S, float)
        out = np.empty(len(tidx))
        for t in np.unique(tidx):
            sel = tidx == t
            model = models[t]
            if model is None:
                out[sel] = 1.0
                continue
            keep, cn, cd, floor = model
            X = _moderator_design(S[sel], keep)
            out[sel] = (X @ cn) / np.maximum(X @ cd, floor)
        return out[:, None, None] * eye

    return DWeightFit(mode, p, T, ev, np.zeros(T), tuple(failed))


@dataclass(frozen=True)
class SmootherModel:
    basis: AdditiveSplineBasis
    jac_coef: np.ndarray  # (width, p*p)
    second_coef: np.ndarray  # (width, p*p)
    fallback: np.ndarray  # pooled mean second moment, (p, p)

    def features(self, tidx, S):
        return np.column_stack([np.asarray(tidx, float) + 1.0, np.asarray(S, float)])

    def expectations(self, tidx, S):
        X = self.basis.transform(self.features(tidx, S))
        p = self.fallback.shape[0]
        return (X @ self.jac_coef).reshape(-1, p, p), (X @ self.second_coef).reshape(-1, p, p)


def _fit_smoother(mode, terms, panel, p, T, scale):
    on = panel.avail == 1
    if not on.any():
        raise ValueError("no available decision points")
    F = panel.moderator[on]
    tidx = np.broadcast_to(np.arange(T), on.shape)[on]
    jac = phi_jacobians(terms, panel.moderator)[on].reshape(-1, p * p)
    phi = phi_values(terms, panel.moderator)[on]
    second = (phi[:, :, None] * phi[:, None, :]).reshape(-1, p * p)
    feats = np.column_stack([tidx + 1.0, F])
    basis = AdditiveSplineBasis.fit(feats, mode.knots)
    X = basis.transform(feats)
    jac_coef = np.linalg.lstsq(X, jac, rcond=None)[0]
    second_coef = np.linalg.lstsq(X, second, rcond=None)[0]
    pooled_second = second.mean(axis=0).reshape(p, p)
    if floored_inverse(pooled_second, min_trace=DEGENERATE * scale)[0] is None:
        msg = "degenerate pooled second moment; using unit weights"
        log.warning(msg)
        warnings.warn(msg, DWeightWarning)
        return DWeightFit(mode, p, T, _unit_evaluator(p), np.zeros(T), tuple(range(1, T + 1)))
    model = SmootherModel(basis, jac_coef, second_coef, pooled_second)

    def ev(tidx, S):
        J, V = model.expectations(tidx, S)
        inv, _ = _batched_floored_inverse(V, model.fallback)
        return J @ inv

    eps = np.full(T, EIG_FLOOR * np.trace(pooled_second) / p)
    return DWeightFit(mode, p, T, ev, eps, model=model)


def explicit_dweights(p: int, T: int, func, mode="explicit") -> DWeightFit:
    """Wrap a known weight function ``func(t_index, S) -> (m, p, p)``."""
    return DWeightFit(mode, p, T, func, np.zeros(T))
