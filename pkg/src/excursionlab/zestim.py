"""Z-estimation engine: Newton root finding, K-fold cross-fitting and sandwich variance.

An estimating system exposes per-trajectory scores m_i(theta) and their
Jacobians.  Solving targets (1/n) sum_i w_i m_i(theta) = 0, where the
optional row weights are all one except under cross-fitting, where they
turn the plain average into the average of fold-wise averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

COND_LIMIT = 1e14


class NonConvergenceError(RuntimeError):
    """Raised when the solver cannot reach a root; ``fit`` holds the last iterate."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class FoldError(RuntimeError):
    def __init__(self, message, fold, train_size, eval_size):
        super().__init__(f"fold {fold} (train={train_size}, eval={eval_size}): {message}")
        self.fold = fold
        self.train_size = train_size
        self.eval_size = eval_size


class Decomposition(NamedTuple):
    """m_i = rows_i^T resid_i with rows (n, T, q), resid (n, T), dresid (n, T, q)."""

    rows: np.ndarray
    resid: np.ndarray
    dresid: np.ndarray


class EstimatingSystem:
    """Base class; subclasses set ``dim`` and ``n`` and implement ``score``/``jacobian``."""

    dim: int
    n: int
    row_weights: np.ndarray | None = None

    def score(self, theta) -> np.ndarray:  # (n, q)
        raise NotImplementedError

    def jacobian(self, theta) -> np.ndarray:  # (n, q, q)
        raise NotImplementedError

    def decompose(self, theta) -> Decomposition | None:
        return None


class FunctionSystem(EstimatingSystem):
    """System built from plain callables."""

    def __init__(self, score, jacobian, n, dim, decompose=None, row_weights=None):
        self._score, self._jacobian, self._decompose = score, jacobian, decompose
        self.n, self.dim = int(n), int(dim)
        self.row_weights = row_weights

    def score(self, theta):
        return np.asarray(self._score(theta), float).reshape(self.n, self.dim)

    def jacobian(self, theta):
        return np.asarray(self._jacobian(theta), float).reshape(self.n, self.dim, self.dim)

    def decompose(self, theta):
        return None if self._decompose is None else self._decompose(theta)


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30
    theta0: tuple | None = None
    strict: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1 or self.max_halvings < 0:
            raise ValueError("max_iter must be positive and max_halvings non-negative")


@dataclass(frozen=True)
class ZFit:
    theta: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    sigma: np.ndarray
    scores: np.ndarray = field(repr=False)
    jacobians: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    iterations: int
    converged: bool
    score_norm: float
    bread_singular: bool = False
    folds: tuple | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma), 0.0, None))


def _weights(system):
    w = getattr(system, "row_weights", None)
    return np.ones(system.n) if w is None else np.asarray(w, float)


def weighted_mean_score(system, theta, w=None):
    w = _weights(system) if w is None else w
    return (w[:, None] * system.score(theta)).sum(axis=0) / system.n


def sandwich(scores, jacobians, weights):
    """(bread, meat, sigma, singular) with sigma = bread^-1 meat bread^-T / n."""
    n = scores.shape[0]
    bread = np.einsum("i,iab->ab", weights, jacobians) / n
    meat = np.einsum("i,ia,ib->ab", weights, scores, scores) / n
    meat = 0.5 * (meat + meat.T)
    inv = invert_bread(bread)
    if inv is None:
        return bread, meat, np.full_like(meat, np.nan), True
    sigma = inv @ meat @ inv.T / n
    return bread, meat, 0.5 * (sigma + sigma.T), False


def invert_bread(bread):
    if not np.all(np.isfinite(bread)):
        return None
    if np.linalg.cond(bread) > COND_LIMIT:
        return None
    return np.linalg.inv(bread)


def _newton_step(bread, g):
    if np.all(np.isfinite(bread)) and np.linalg.cond(bread) <= COND_LIMIT:
        return np.linalg.solve(bread, g)
    if not np.all(np.isfinite(bread)):
        return None
    return np.linalg.lstsq(bread, g, rcond=None)[0]


def solve_z(system: EstimatingSystem, options: SolveOptions | None = None, folds=None) -> ZFit:
    """Solve the weighted mean score equation by damped Newton.

    Steps are halved until the Euclidean norm of the mean score decreases.
    The fit reports ``converged=False`` when ``max_iter`` is reached or no
    step length improves the merit; with ``options.strict`` that raises
    ``NonConvergenceError`` instead.
    """
    opts = options or SolveOptions()
    q = system.dim
    w = _weights(system)
    theta = np.zeros(q) if opts.theta0 is None else np.asarray(opts.theta0, float).copy()
    if theta.shape != (q,):
        raise ValueError(f"theta0 has shape {theta.shape}, expected ({q},)")
    g = weighted_mean_score(system, theta, w)
    converged = False
    iterations = 0
    while True:
        norm = float(np.max(np.abs(g))) if np.all(np.isfinite(g)) else np.inf
        if norm <= opts.tol:
            converged = True
            break
        if iterations >= opts.max_iter:
            break
        J = np.einsum("i,iab->ab", w, system.jacobian(theta)) / system.n
        step = _newton_step(J, g)
        if step is None or not np.all(np.isfinite(step)):
            break
        merit = float(np.linalg.norm(g))
        accepted = False
        lam = 1.0
        for _ in range(opts.max_halvings + 1):
            trial = theta - lam * step
            gt = weighted_mean_score(system, trial, w)
            if np.all(np.isfinite(gt)) and np.linalg.norm(gt) < merit:
                accepted = True
                break
            lam /= 2
        iterations += 1
        if not accepted:
            # a root already reached up to round-off still counts
            scale = float(np.mean(np.abs(w[:, None] * system.score(theta)))) + 1.0
            converged = norm <= 1e3 * np.finfo(float).eps * scale
            break
        theta, g = trial, gt
    scores = system.score(theta)
    jacs = system.jacobian(theta)
    bread, meat, sigma, singular = sandwich(scores, jacs, w)
    fit = ZFit(theta, bread, meat, sigma, scores, jacs, w, iterations, converged,
               float(np.max(np.abs(g))) if np.all(np.isfinite(g)) else np.inf, singular, folds)
    if opts.strict and (not converged or singular):
        reason = "singular bread at the solution" if converged else "Newton iteration did not converge"
        raise NonConvergenceError(reason, fit)
    return fit


# -- cross-fitting ----------------------------------------------------------


def partition(n: int, K: int, seed) -> tuple[np.ndarray, ...]:
    """Random partition of range(n) into K folds whose sizes differ by at most one."""
    if K < 2:
        raise ValueError("cross-fitting needs K >= 2")
    if n < K:
        raise ValueError(f"cannot split n={n} trajectories into K={K} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return tuple(np.sort(part) for part in np.array_split(perm, K))


class StackedSystem(EstimatingSystem):
    """Fold-wise systems evaluated on their own folds and reassembled in row order."""

    def __init__(self, systems: Sequence[EstimatingSystem], folds: Sequence[np.ndarray], n: int):
        self.systems = tuple(systems)
        self.folds = tuple(folds)
        self.n = n
        self.dim = self.systems[0].dim
        K = len(self.folds)
        self.row_weights = np.empty(n)
        for idx in self.folds:
            self.row_weights[idx] = n / (K * len(idx))

    def _gather(self, method, theta, tail):
        out = np.empty((self.n,) + tail)
        for sys_k, idx in zip(self.systems, self.folds):
            out[idx] = getattr(sys_k, method)(theta)
        return out

    def score(self, theta):
        return self._gather("score", theta, (self.dim,))

    def jacobian(self, theta):
        return self._gather("jacobian", theta, (self.dim, self.dim))

    def decompose(self, theta):
        parts = [s.decompose(theta) for s in self.systems]
        if any(p is None for p in parts):
            return None
        T = parts[0].resid.shape[1]
        rows = np.empty((self.n, T, self.dim))
        resid = np.empty((self.n, T))
        dresid = np.empty((self.n, T, self.dim))
        for part, idx in zip(parts, self.folds):
            rows[idx], resid[idx], dresid[idx] = part
        return Decomposition(rows, resid, dresid)


def crossfit_system(fit_system: Callable, n: int, K: int = 5, seed=0) -> StackedSystem:
    """Build the cross-fitted system; ``fit_system(train_idx, eval_idx)`` fits the
    nuisance on ``train_idx`` only and returns a system over ``eval_idx``."""
    folds = partition(n, K, seed)
    everything = np.arange(n)
    systems = []
    for k, idx in enumerate(folds):
        train = np.setdiff1d(everything, idx, assume_unique=True)
        try:
            sys_k = fit_system(train, idx)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FoldError(str(exc), k, len(train), len(idx)) from exc
        if sys_k.n != len(idx):
            raise FoldError("system size does not match its evaluation fold", k, len(train), len(idx))
        systems.append(sys_k)
    return StackedSystem(systems, folds, n)


def crossfit_solve(fit_system: Callable, n: int, K: int = 5, seed=0,
                   options: SolveOptions | None = None) -> ZFit:
    """Solve K^-1 sum_k P_{n,k} m(theta, eta_k) = 0 with eta_k fitted off-fold."""
    stacked = crossfit_system(fit_system, n, K, seed)
    return solve_z(stacked, options, folds=stacked.folds)


# -- global robustness harness ----------------------------------------------


@dataclass(frozen=True)
class RobustnessRow:
    name: str
    mean: np.ndarray
    se: np.ndarray
    flagged: bool


@dataclass(frozen=True)
class RobustnessReport:
    rows: tuple[RobustnessRow, ...]
    threshold: float = 4.0

    @property
    def passed(self) -> bool:
        return not any(r.flagged for r in self.rows)

    def row(self, name) -> RobustnessRow:
        return next(r for r in self.rows if r.name == name)


def check_global_robustness(build_system: Callable, sampler: Callable, theta_star, etas: dict,
                            n_mc: int, threshold: float = 4.0) -> RobustnessReport:
    """Monte Carlo check that P m(theta_star, eta) = 0 for each supplied eta.

    ``sampler(n_mc)`` draws i.i.d. trajectories and ``build_system(data, eta)``
    returns the system evaluated on them.  A coordinate whose mean exceeds
    ``threshold`` standard errors flags that eta.
    """
    data = sampler(n_mc)
    theta_star = np.asarray(theta_star, float)
    rows = []
    for name, eta in etas.items():
        m = build_system(data, eta).score(theta_star)
        mean = m.mean(axis=0)
        se = m.std(axis=0, ddof=1) / np.sqrt(m.shape[0])
        flagged = bool(np.any(np.abs(mean) > threshold * np.maximum(se, 1e-300)))
        rows.append(RobustnessRow(name, mean, se, flagged))
    return RobustnessReport(tuple(rows), threshold)
