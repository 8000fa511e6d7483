"""Link-specific algebra for causal excursion effect estimating functions.

Everything here works for a linear effect model ``gamma_t = f_t @ beta``.
The vectorised helpers take ``(n, T)`` arrays for per-decision-point
quantities and ``(n, T, p)`` arrays for the moderator design, and return
arrays of matching shape; the scalar ``*_atom`` functions are thin
wrappers used for single decision points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

if TYPE_CHECKING:
    from .panel import DecisionPoint


class LinkKind(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"

    @classmethod
    def parse(cls, value: "LinkKind | str") -> "LinkKind":
        if isinstance(value, LinkKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown link {value!r}; expected 'identity' or 'log'") from None


@dataclass(frozen=True)
class CeeSpec:
    """Effect model: link, parameter dimension and optional numerator probability."""

    link: LinkKind
    p: int
    tilde_prob: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "link", LinkKind.parse(self.link))
        if self.p < 1:
            raise ValueError("parameter dimension p must be >= 1")
        if self.tilde_prob is not None and not 0.0 < self.tilde_prob < 1.0:
            raise ValueError("tilde_prob must lie strictly inside (0, 1)")


class PhiAtom(NamedTuple):
    value: np.ndarray  # (p,)
    jac: np.ndarray  # (p, p)
    resid: float
    dvec: np.ndarray  # (p,)


class CeeTerms(NamedTuple):
    """Per-point factors of phi_t = weight * resid * f_t.

    ``dresid`` is the scalar c_t with d(resid)/d(beta) = c_t * f_t, so the
    Jacobian of phi_t is ``weight * dresid * f f^T``.
    """

    weight: np.ndarray  # (n, T)  (A - p) / (p (1 - p)) * I
    resid: np.ndarray  # (n, T)
    dresid: np.ndarray  # (n, T)


def exposure_free_outcome(link, y, a, gamma):
    """Outcome with the immediate treatment effect removed."""
    link = LinkKind.parse(link)
    y, a, gamma = np.asarray(y, float), np.asarray(a, float), np.asarray(gamma, float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(a)) and np.all(np.isfinite(gamma))):
        raise ValueError("non-finite input to exposure_free_outcome")
    if link is LinkKind.IDENTITY:
        out = y - a * gamma
    else:
        if np.any(y < 0):
            raise ValueError("log link requires non-negative outcomes")
        out = y * np.exp(-a * gamma)
    return out[()] if out.ndim == 0 else out


def centering_weight(avail, prob, treat):
    avail = np.asarray(avail, float)
    prob = np.asarray(prob, float)
    on = avail > 0
    if np.any(on & ~((prob > 0) & (prob < 1))):
        raise ValueError("randomization probability must lie in (0, 1) at available points")
    safe = np.where(on, prob, 0.5)
    return np.where(on, (np.asarray(treat, float) - safe) / (safe * (1.0 - safe)), 0.0)


def cee_terms(link, avail, prob, treat, outcome, moderator, mu1, mu0, beta) -> CeeTerms:
    """Vectorised factors of the estimating-function atom at ``beta``."""
    link = LinkKind.parse(link)
    weight = centering_weight(avail, prob, treat)
    prob = np.where(np.asarray(avail) > 0, prob, 0.5)
    treat = np.asarray(treat, float)
    outcome = np.asarray(outcome, float)
    gamma = np.asarray(moderator, float) @ np.asarray(beta, float)
    if link is LinkKind.IDENTITY:
        resid = outcome - (treat + prob - 1.0) * gamma - (1.0 - prob) * mu1 - prob * mu0
        dresid = -(treat + prob - 1.0)
    else:
        e_treat = np.exp(-treat * gamma) * outcome
        e_ctrl = (1.0 - prob) * np.exp(-gamma) * mu1
        resid = e_treat - e_ctrl - prob * mu0
        dresid = -treat * e_treat + e_ctrl
    return CeeTerms(weight, resid, dresid)


def phi_values(terms: CeeTerms, moderator):
    """phi_t for every point: shape (n, T, p)."""
    return (terms.weight * terms.resid)[..., None] * moderator


def phi_jacobians(terms: CeeTerms, moderator):
    """d phi_t / d beta for every point: shape (n, T, p, p)."""
    scale = terms.weight * terms.dresid
    return scale[..., None, None] * moderator[..., :, None] * moderator[..., None, :]


def _point_arrays(point: "DecisionPoint"):
    f = np.asarray(point.moderator, float)
    return float(point.avail), float(point.prob), float(point.treat), float(point.outcome), f


def phi_atom(link, point: "DecisionPoint", mu1: float, mu0: float, beta) -> PhiAtom:
    avail, prob, treat, outcome, f = _point_arrays(point)
    beta = np.asarray(beta, float)
    if f.shape != beta.shape:
        raise ValueError(f"moderator length {f.size} does not match beta length {beta.size}")
    terms = cee_terms(link, avail, prob, treat, outcome, f, mu1, mu0, beta)
    w, r, c = float(terms.weight), float(terms.resid), float(terms.dresid)
    dvec = w * f
    return PhiAtom(value=dvec * r, jac=w * c * np.outer(f, f), resid=r, dvec=dvec)


def phi_jacobian(link, point: "DecisionPoint", mu1: float, beta, mu0: float = 0.0):
    # mu0 never enters the derivative; accepted only for call symmetry.
    return phi_atom(link, point, mu1, mu0, beta).jac


# -- WCLS / EMEE baselines -------------------------------------------------


def stabilized_weight(avail, prob, treat, tilde_prob):
    """I_t * W_t with W_t the stabilized inverse-probability weight."""
    avail = np.asarray(avail, float)
    treat = np.asarray(treat, float)
    safe = np.where(avail > 0, prob, 0.5)
    w = treat * tilde_prob / safe + (1.0 - treat) * (1.0 - tilde_prob) / (1.0 - safe)
    return avail * w


class BaselineTerms(NamedTuple):
    """m = sum_t D_t^T r_t with D_t = I W x_t and x_t = (b_t, (A - p~) f_t)."""

    rows: np.ndarray  # (n, T, q)  D_t
    resid: np.ndarray  # (n, T)
    dresid: np.ndarray  # (n, T, q)


def baseline_terms(link, avail, prob, treat, outcome, controls, moderator, tilde_prob, alpha, beta):
    link = LinkKind.parse(link)
    treat = np.asarray(treat, float)
    outcome = np.asarray(outcome, float)
    centred = (treat - tilde_prob)[..., None] * moderator
    x = np.concatenate([controls, centred], axis=-1)
    weight = stabilized_weight(avail, prob, treat, tilde_prob)
    base = controls @ np.asarray(alpha, float)
    gamma = moderator @ np.asarray(beta, float)
    if link is LinkKind.IDENTITY:
        resid = outcome - base - (treat - tilde_prob) * gamma
        dresid = -x
    else:
        e_base = np.exp(base)
        e_out = np.exp(-treat * gamma) * outcome
        resid = e_out - e_base
        dresid = np.concatenate(
            [-e_base[..., None] * controls, -(treat * e_out)[..., None] * moderator], axis=-1
        )
    return BaselineTerms(weight[..., None] * x, resid, dresid)


class BaselineAtom(NamedTuple):
    value: np.ndarray
    resid: float
    weight: float
    design: np.ndarray


def _baseline_atom(link, point, spec: CeeSpec, alpha, beta, b_t):
    if spec.tilde_prob is None:
        raise ValueError("baseline estimators need a numerator probability tilde_prob")
    avail, prob, treat, outcome, f = _point_arrays(point)
    b = np.asarray(b_t, float)
    terms = baseline_terms(link, avail, prob, treat, outcome, b, f, spec.tilde_prob, alpha, beta)
    weight = float(stabilized_weight(avail, prob, treat, spec.tilde_prob))
    design = np.concatenate([b, (treat - spec.tilde_prob) * f])
    resid = float(terms.resid)
    return BaselineAtom(value=weight * resid * design, resid=resid, weight=weight, design=design)


def wcls_atom(point, spec: CeeSpec, alpha, beta, b_t) -> BaselineAtom:
    if spec.link is not LinkKind.IDENTITY:
        raise ValueError("WCLS is defined for the identity link")
    return _baseline_atom(LinkKind.IDENTITY, point, spec, alpha, beta, b_t)


def emee_atom(point, spec: CeeSpec, alpha, beta, b_t) -> BaselineAtom:
    if spec.link is not LinkKind.LOG:
        raise ValueError("EMEE is defined for the log link")
    if point.outcome < 0:
        raise ValueError("EMEE requires non-negative outcomes")
    return _baseline_atom(LinkKind.LOG, point, spec, alpha, beta, b_t)
