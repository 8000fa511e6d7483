"""Confidence intervals and the leverage-corrected (small-sample) sandwich."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .zestim import invert_bread

log = logging.getLogger(__name__)

MAX_COND = 1e12
FALLBACK_BUDGET = 0.10
T_QUANTILE_BELOW = 50


class CorrectionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CorrectionInputs:
    """m_i = rows_i^T resid_i, with bread M = (1/n) sum_i w_i dm_i.

    rows: (n, T, q); resid: (n, T); dresid: (n, T, q) holds d resid / d theta.
    weights default to one (they differ only under cross-fitting).
    """

    rows: np.ndarray
    resid: np.ndarray
    dresid: np.ndarray
    bread: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        n, T, q = np.shape(self.rows)
        if np.shape(self.resid) != (n, T) or np.shape(self.dresid) != (n, T, q):
            raise ValueError("resid must be (n, T) and dresid (n, T, q) to match rows")
        if np.shape(self.bread) != (q, q):
            raise ValueError("bread must be q x q")
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(n))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def T(self) -> int:
        return self.rows.shape[1]

    @property
    def q(self) -> int:
        return self.rows.shape[2]

    def scores(self):
        return np.einsum("itq,it->iq", self.rows, self.resid)


@dataclass(frozen=True)
class CorrectionResult:
    meat: np.ndarray
    sigma: np.ndarray
    applied: bool
    n_fallback: int
    fallback: np.ndarray = field(repr=False)


def _sandwich_from_meat(bread_inv, meat, n):
    sigma = bread_inv @ meat @ bread_inv.T / n
    return 0.5 * (sigma + sigma.T)


def small_sample_correct(inputs: CorrectionInputs, max_cond: float = MAX_COND,
                         budget: float = FALLBACK_BUDGET) -> CorrectionResult:
    """Replace r_i by (I - H_ii)^{-1} r_i in the meat, H_ii = (w_i/n) dr_i M^{-1} D_i^T.

    Trajectories whose (I - H_ii) is ill-conditioned keep their uncorrected
    contribution.  If more than ``budget`` of them do, the correction is
    refused and the uncorrected sandwich is returned with ``applied=False``.
    """
    bread_inv = invert_bread(inputs.bread)
    if bread_inv is None:
        raise np.linalg.LinAlgError("bread matrix is singular")
    n = inputs.n
    w = np.asarray(inputs.weights, float)
    meat, fallback = kernels.leverage_corrected_meat(
        inputs.rows, inputs.resid, inputs.dresid, bread_inv, w, n, max_cond)
    meat = 0.5 * (meat + meat.T)
    count = int(fallback.sum())
    if count > budget * n:
        msg = f"leverage correction refused: {count} of {n} trajectories ill-conditioned"
        log.warning(msg)
        warnings.warn(msg, CorrectionWarning)
        g = inputs.scores()
        plain = np.einsum("i,ia,ib->ab", w, g, g) / n
        return CorrectionResult(plain, _sandwich_from_meat(bread_inv, plain, n), False, count, fallback)
    if count:
        msg = f"{count} trajectories kept their uncorrected contribution"
        log.warning(msg)
        warnings.warn(msg, CorrectionWarning)
    return CorrectionResult(meat, _sandwich_from_meat(bread_inv, meat, n), True, count, fallback)


@dataclass(frozen=True)
class CiSpec:
    level: float = 0.95
    family: str = "normal"  # or "t"
    df: int | None = None

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.family not in ("normal", "t"):
            raise ValueError("family must be 'normal' or 't'")
        if self.family == "t" and (self.df is None or self.df < 1):
            raise ValueError("t quantiles need df >= 1")

    @classmethod
    def default(cls, level: float, n: int, q: int) -> "CiSpec":
        """t with n - q degrees of freedom for n < 50, normal otherwise."""
        if n < T_QUANTILE_BELOW and n - q >= 1:
            return cls(level, "t", n - q)
        return cls(level, "normal")

    def quantile(self) -> float:
        upper = 0.5 + self.level / 2
        if self.family == "t":
            return float(stats.t.ppf(upper, self.df))
        return float(stats.norm.ppf(upper))


def confidence_interval(beta, sigma, spec: CiSpec = CiSpec()) -> np.ndarray:
    """(p, 2) array of beta_j -/+ q * sqrt(sigma_jj)."""
    beta = np.asarray(beta, float)
    diag = np.diag(np.asarray(sigma, float)).copy()
    if not np.all(np.isfinite(diag)):
        raise ValueError("variance matrix has non-finite diagonal")
    tol = 1e-12 * max(1.0, float(np.max(np.abs(diag))))
    if np.any(diag < -tol):
        raise ValueError("variance matrix has a negative diagonal entry")
    half = spec.quantile() * np.sqrt(np.clip(diag, 0.0, None))
    return np.column_stack([beta - half, beta + half])
