"""Outcome-regression learners for mu_t(h, a) = E(Y_{t+1} | H_t, A_t = a, I_t = 1).

Each treatment arm gets its own predictor.  Learners are either fitted
separately per decision point or pooled across decision points, in which
case the decision index ``t`` is used as a feature.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import kernels
from .cee import LinkKind
from .panel import Panel
from .splines import DEFAULT_KNOTS, AdditiveSplineBasis

log = logging.getLogger(__name__)


class NuisanceWarning(UserWarning):
    pass


class Predictor(Protocol):
    def predict(self, X: np.ndarray) -> np.ndarray: ...


# -- learner specifications -------------------------------------------------


@dataclass(frozen=True)
class PerTimeMean:
    """Arm-specific sample mean at each decision point."""

    def fit(self, X, y, seed):
        return _Constant(float(np.mean(y)))


@dataclass(frozen=True)
class Constant:
    """A frozen, data-independent prediction (used to probe robustness)."""

    value: float = 0.0

    def fit(self, X, y, seed):
        return _Constant(float(self.value))


@dataclass(frozen=True)
class LinearLS:
    """Ridge-stabilised least squares, optionally on an additive spline basis.

    ``spline_knots > 0`` expands every feature in a natural cubic spline
    basis with knots at sample quantiles, giving an additive-model fit.
    The intercept is never penalised.
    """

    ridge: float = 1e-8
    spline_knots: int = 0

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.spline_knots < 0 or self.spline_knots in (1, 2):
            raise ValueError("spline_knots must be 0 or at least 3")

    def fit(self, X, y, seed):
        basis = AdditiveSplineBasis.fit(X, self.spline_knots)
        design = basis.transform(X)
        return _Linear(basis, _ridge_solve(design, y, self.ridge))


@dataclass(frozen=True)
class KernelKNN:
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")

    def fit(self, X, y, seed):
        X = np.asarray(X, float)
        centre = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return _Knn((X - centre) / scale, np.asarray(y, float), min(self.k, len(y)), centre, scale)


@dataclass(frozen=True)
class Tree:
    max_depth: int | None = 6
    min_leaf: int = 5

    def __post_init__(self):
        _check_tree_args(self.max_depth, self.min_leaf)

    def fit(self, X, y, seed):
        rows = np.arange(len(y), dtype=np.int64)[None, :]
        return _Forest(kernels.grow_forest(X, y, rows, _depth(self.max_depth), self.min_leaf))


@dataclass(frozen=True)
class Forest:
    n_trees: int = 200
    max_depth: int | None = 6
    min_leaf: int = 5
    subsample: float = 0.8
    seed: int = 0

    def __post_init__(self):
        _check_tree_args(self.max_depth, self.min_leaf)
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")

    def fit(self, X, y, seed):
        m = len(y)
        rng = np.random.default_rng([self.seed, *seed])
        size = max(1, int(round(self.subsample * m)))
        samples = np.stack([np.sort(rng.choice(m, size, replace=False)) for _ in range(self.n_trees)])
        return _Forest(kernels.grow_forest(X, y, samples, _depth(self.max_depth), self.min_leaf))


@dataclass(frozen=True)
class Stack:
    """Weighted average of member learners, weights from a one-pass GLM."""

    members: tuple = ()
    link: LinkKind = LinkKind.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "link", LinkKind.parse(self.link))
        if len(self.members) < 2:
            raise ValueError("a stack needs at least two members")

    def fit(self, X, y, seed):
        return fit_stack(self.members, X, y, self.link, seed)


RegressorKind = PerTimeMean | Constant | LinearLS | KernelKNN | Tree | Forest | Stack


def _check_tree_args(max_depth, min_leaf):
    if max_depth is not None and max_depth < 1:
        raise ValueError("max_depth must be positive (or None for unbounded)")
    if min_leaf < 1:
        raise ValueError("min_leaf must be positive")


def _depth(max_depth):
    return kernels.UNBOUNDED_DEPTH if max_depth is None else int(max_depth)


def _ridge_solve(design, y, ridge):
    y = np.asarray(y, float)
    if ridge == 0:
        return np.linalg.lstsq(design, y, rcond=None)[0]
    penalty = np.full(design.shape[1], ridge)
    penalty[0] = 0.0
    gram = design.T @ design + np.diag(penalty * len(y))
    try:
        return np.linalg.solve(gram, design.T @ y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(design, y, rcond=None)[0]


# -- fitted predictors ------------------------------------------------------


@dataclass(frozen=True)
class _Constant:
    value: float

    def predict(self, X):
        return np.full(len(X), self.value)


@dataclass(frozen=True)
class _Linear:
    basis: AdditiveSplineBasis
    coef: np.ndarray

    def predict(self, X):
        return self.basis.transform(X) @ self.coef


@dataclass(frozen=True)
class _Knn:
    X: np.ndarray
    y: np.ndarray
    k: int
    centre: np.ndarray
    scale: np.ndarray

    def predict(self, X):
        Q = (np.asarray(X, float) - self.centre) / self.scale
        return kernels.knn_predict(self.X, self.y, Q, self.k)


@dataclass(frozen=True)
class _Forest:
    arrays: tuple

    def predict(self, X):
        return kernels.predict_forest(X, self.arrays)


@dataclass(frozen=True)
class StackPredictor:
    members: tuple
    weights: np.ndarray
    nonneg: bool

    def member_predictions(self, X):
        P = np.column_stack([m.predict(X) for m in self.members])
        return np.maximum(P, 0.0) if self.nonneg else P

    def predict(self, X):
        return self.member_predictions(X) @ self.weights


def _poisson_weights(P, y, max_iter=50, tol=1e-8):
    """Poisson log-linear regression of y on log member predictions."""
    Z = np.log(np.maximum(P, 1e-8))
    K = Z.shape[1]
    w = np.full(K, 1.0 / K)

    def loglik(w):
        eta = Z @ w
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.sum(y * eta - np.exp(eta)))

    current = loglik(w)
    for _ in range(max_iter):
        mu = np.exp(Z @ w)
        score = Z.T @ (y - mu)
        if np.max(np.abs(score)) <= tol * max(1.0, float(np.sum(y))):
            return w, True
        info = Z.T @ (mu[:, None] * Z)
        step = np.linalg.pinv(info) @ score
        for _ in range(30):
            trial = w + step
            value = loglik(trial)
            if np.isfinite(value) and value >= current - 1e-12 * abs(current):
                break
            step = step / 2
        else:
            return w, False
        w, current = trial, value
    mu = np.exp(Z @ w)
    return w, bool(np.max(np.abs(Z.T @ (y - mu))) <= 1e-6 * max(1.0, float(np.sum(y))))


def fit_stack(members: Sequence, X, y, link=LinkKind.IDENTITY, seed=(0,)) -> StackPredictor:
    """Fit every member on (X, y) and combine them by a non-negative weighting.

    Identity link: least squares of y on member predictions, negative
    weights clipped to zero.  Log link: Poisson log-linear regression of y
    on log member predictions solved by Newton.  Weights are renormalised
    to sum to one; in-sample member predictions are used throughout.
    """
    link = LinkKind.parse(link)
    y = np.asarray(y, float)
    fitted = tuple(m.fit(X, y, (*seed, j)) for j, m in enumerate(members))
    nonneg = link is LinkKind.LOG
    probe = StackPredictor(fitted, np.zeros(len(fitted)), nonneg)
    P = probe.member_predictions(X)
    K = P.shape[1]
    equal = np.full(K, 1.0 / K)
    if link is LinkKind.IDENTITY:
        w = np.linalg.lstsq(P, y, rcond=None)[0]
    else:
        w, ok = _poisson_weights(P, y)
        if not ok:
            warnings.warn("stack weighting did not converge; using equal weights", NuisanceWarning)
            w = equal
    w = np.clip(w, 0.0, None)
    total = w.sum()
    w = equal if not np.isfinite(total) or total <= 0 else w / total
    return StackPredictor(fitted, w, nonneg)


# -- panel-level fitting ----------------------------------------------------


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted mu-hat for both arms.

    ``predictors`` maps ``(t, a)`` to a predictor, with ``t = None`` for a
    model pooled over decision points.
    """

    kind: object
    pooled: bool
    T: int
    features: tuple[int, ...]
    predictors: dict = field(repr=False)
    fold: int | None = None
    nonneg: bool = False

    def _design(self, t_index, history):
        X = np.asarray(history, float)[..., list(self.features)]
        if self.pooled:
            X = np.concatenate([np.full(X.shape[:-1] + (1,), float(t_index + 1)), X], axis=-1)
        return X

    def _predictor(self, t_index, a):
        key = (None if self.pooled else t_index, int(a))
        return self.predictors[key]

    def predict_mu(self, t: int, history, a: int) -> float:
        """Prediction at 1-based decision point ``t`` for one history vector."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside 1..{self.T}")
        history = np.asarray(history, float)
        if self.features and history.shape[-1] <= max(self.features):
            raise ValueError("history vector is shorter than the fitted feature set")
        X = self._design(t - 1, history.reshape(1, -1))
        out = float(self._predictor(t - 1, a).predict(X)[0])
        return max(out, 0.0) if self.nonneg else out

    def predict_panel(self, panel: Panel):
        """(mu1, mu0) arrays of shape (n, T) evaluated on ``panel``."""
        if panel.T != self.T:
            raise ValueError("panel has a different number of decision points")
        out = []
        for a in (1, 0):
            mu = np.empty((panel.n, panel.T))
            if self.pooled:
                X = self._design_all(panel)
                mu[:] = self.predictors[(None, a)].predict(X.reshape(-1, X.shape[-1])).reshape(panel.n, panel.T)
            else:
                for t in range(panel.T):
                    X = panel.history[:, t][:, list(self.features)]
                    mu[:, t] = self._predictor(t, a).predict(X)
            out.append(np.maximum(mu, 0.0) if self.nonneg else mu)
        return out[0], out[1]

    def _design_all(self, panel):
        X = panel.history[..., list(self.features)]
        tcol = np.broadcast_to(np.arange(1, panel.T + 1, dtype=float)[None, :, None], (panel.n, panel.T, 1))
        return np.concatenate([tcol, X], axis=-1)


def _feature_index(panel: Panel, features) -> tuple[int, ...]:
    if features is None:
        names = [nm for nm in panel.history_names if nm != "t"]
    else:
        names = list(features)
    missing = [nm for nm in names if nm not in panel.history_names]
    if missing:
        raise ValueError(f"unknown history features {missing}")
    return tuple(panel.history_names.index(nm) for nm in names)


def fit_nuisance(panel: Panel, kind, pooled: bool = True, subset=None, features=None,
                 fold: int | None = None) -> NuisanceFit:
    """Fit mu-hat for both arms on the available points of ``panel[subset]``.

    Pooled learners see the decision index ``t`` followed by the chosen
    history columns (all but a column named ``t`` by default).
    ``PerTimeMean`` is inherently per decision point and ignores ``pooled``.
    """
    if subset is not None:
        subset = np.asarray(subset)
        if subset.size == 0:
            raise ValueError("empty training subset")
        panel = panel.subset(subset)
    feats = _feature_index(panel, features)
    if isinstance(kind, (PerTimeMean, Constant)):
        pooled = False
    nonneg = isinstance(kind, Stack) and kind.link is LinkKind.LOG
    fit = NuisanceFit(kind, pooled, panel.T, feats, {}, fold, nonneg)
    on = panel.avail == 1
    fold_tag = 0 if fold is None else fold + 1
    for a in (1, 0):
        arm = on & (panel.treat == a)
        if pooled:
            X = fit._design_all(panel)[arm]
            fit.predictors[(None, a)] = _fit_one(kind, X, panel.outcome[arm], (a, 0, fold_tag))
            continue
        pooled_fallback = None
        for t in range(panel.T):
            rows = arm[:, t]
            X = panel.history[rows, t][:, list(feats)]
            y = panel.outcome[rows, t]
            if rows.sum() == 0 and not isinstance(kind, Constant):
                if pooled_fallback is None:
                    if not arm.any():
                        raise ValueError(f"arm a={a} has no available observations")
                    fallback_kind = PerTimeMean() if isinstance(kind, PerTimeMean) else kind
                    Xp = fit._design_all(panel)[arm]
                    pooled_fallback = _PooledAt(_fit_one(fallback_kind, Xp, panel.outcome[arm], (a, 0, fold_tag)))
                msg = f"no available a={a} observations at t={t + 1}; using a pooled fit"
                log.warning(msg)
                warnings.warn(msg, NuisanceWarning)
                fit.predictors[(t, a)] = pooled_fallback.at(t)
                continue
            fit.predictors[(t, a)] = _fit_one(kind, X, y, (a, t + 1, fold_tag))
    return fit


@dataclass(frozen=True)
class _PooledAt:
    predictor: object
    t_index: int = 0

    def at(self, t_index):
        return _PooledAt(self.predictor, t_index)

    def predict(self, X):
        X = np.asarray(X, float)
        tcol = np.full((X.shape[0], 1), float(self.t_index + 1))
        return self.predictor.predict(np.concatenate([tcol, X], axis=1))


def _fit_one(kind, X, y, seed):
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    return kind.fit(X, np.asarray(y, float), seed)


def predict_mu(fit: NuisanceFit, t: int, history, a: int) -> float:
    return fit.predict_mu(t, history, a)
