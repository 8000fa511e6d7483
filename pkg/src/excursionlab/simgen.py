"""Simulated micro-randomized trials with known truth.

Three outcome families share the covariate and treatment mechanism:
Z_t ~ Unif[-2, 2] independently, A_t ~ Bernoulli(0.5), always available.

* continuous: Y = A (b0 + b1 Z) + mu0(t, Z) + eps, eps ~ N(0, C) with
  Corr(eps_t, eps_u) = rho^{|t-u|/2} and Var(eps_t) = (t-1) lam2 + lam3;
* binary: Y ~ Bernoulli(exp{A (b0 + b1 Z)} mu0(t, Z, Y_lag));
* count: Y ~ Poisson(exp{A b0} mu0(t, Y_lag)).

Trajectory i draws from its own stream ``default_rng([seed, i])``, so the
first m trajectories of a panel do not depend on n.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import integrate, stats

from .cee import LinkKind, cee_terms
from .dweights import explicit_dweights, floored_inverse
from .panel import Panel

MC_CHUNK = 100_000
DEFAULT_MC_BUDGET = 1_000_000


class Form(str, enum.Enum):
    LINEAR = "linear"
    SIMPLE_NONLINEAR = "simple_nonlinear"
    PERIODIC = "periodic"
    STEP = "step"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Form):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"log_linear": "linear", "loglinear": "linear", "nonlinear": "simple_nonlinear",
                   "simple": "simple_nonlinear"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown mean form {value!r}") from None


def beta22_pdf(x):
    """Beta(2, 2) density 6x(1-x); zero outside [0, 1]."""
    x = np.asarray(x, float)
    out = np.where((x >= 0) & (x <= 1), 6.0 * x * (1.0 - x), 0.0)
    return out[()] if out.ndim == 0 else out


def _even(k):
    return (np.mod(np.floor(k), 2) == 0).astype(float)


def _common_checks(cfg):
    if cfg.n < 1 or cfg.T < 1:
        raise ValueError("n and T must be positive")
    if not 0.0 <= cfg.rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")


@dataclass(frozen=True)
class ContinuousConfig:
    n: int = 100
    T: int = 10
    form: Form = Form.LINEAR
    lam1: float = 0.0
    lam2: float = 0.0
    lam3: float = 1.0
    rho: float = 0.5
    seed: int = 0
    beta0: float = 0.5
    beta1: float = 0.2
    alpha0: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0

    kind = "continuous"

    def __post_init__(self):
        object.__setattr__(self, "form", Form.parse(self.form))
        _common_checks(self)
        if self.lam2 < 0 or self.lam3 < 0:
            raise ValueError("lam2 and lam3 must be non-negative")

    @property
    def link(self):
        return LinkKind.IDENTITY

    def mu0(self, t, z, ylag=None):
        t = np.asarray(t, float)
        z = np.asarray(z, float)
        if self.form is Form.LINEAR:
            return self.alpha0 + self.alpha1 * t + self.alpha2 * z
        if self.form is Form.SIMPLE_NONLINEAR:
            return self.alpha0 + self.lam1 * (beta22_pdf(z / 6 + 0.5) + beta22_pdf(t / self.T))
        if self.form is Form.PERIODIC:
            return self.alpha0 + self.lam1 * (np.sin(t) + np.sin(z))
        return self.alpha0 + self.lam1 * (_even(t) + _even(10 * z))

    def effect(self, z):
        return self.beta0 + self.beta1 * np.asarray(z, float)

    def mu(self, t, z, a, ylag=None):
        return np.asarray(a, float) * self.effect(z) + self.mu0(t, z)

    def error_sd(self):
        t = np.arange(1, self.T + 1)
        return np.sqrt((t - 1) * self.lam2 + self.lam3)

    def correlation(self):
        t = np.arange(self.T)
        return self.rho ** (np.abs(t[:, None] - t[None, :]) / 2.0)


@dataclass(frozen=True)
class BinaryConfig:
    n: int = 100
    T: int = 10
    form: Form = Form.SIMPLE_NONLINEAR
    lam: float = 0.8
    rho: float = 0.1
    seed: int = 0
    beta0: float = 0.225
    beta1: float = 0.025
    alpha0: float = -2.5
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.05

    kind = "binary"

    def __post_init__(self):
        object.__setattr__(self, "form", Form.parse(self.form))
        _common_checks(self)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @property
    def link(self):
        return LinkKind.LOG

    def z_part(self, z):
        """The Z-dependent summand of log mu0."""
        z = np.asarray(z, float)
        if self.form is Form.LINEAR:
            return self.alpha2 * (z / 6 + 0.5)
        if self.form is Form.SIMPLE_NONLINEAR:
            return 2.0 / 3.0 * self.lam * beta22_pdf(z / 6 + 0.5)
        if self.form is Form.PERIODIC:
            return 0.5 * self.lam * np.sin(z)
        return self.lam * _even(2 * z)

    def log_mu0(self, t, z, ylag):
        t = np.asarray(t, float)
        ylag = np.asarray(ylag, float)
        drift = self.alpha3 * (t - 1) / self.T
        shift = 2.0 * (1.0 - self.lam)
        if self.form is Form.LINEAR:
            rest = self.alpha0 + self.alpha1 * t / self.T + self.rho * ylag
        elif self.form is Form.SIMPLE_NONLINEAR:
            # the lag sits inside the lam-scaled bracket for this form only
            rest = self.alpha0 + shift + 2.0 / 3.0 * self.lam * (beta22_pdf(t / self.T) + self.rho * ylag)
        elif self.form is Form.PERIODIC:
            rest = self.alpha0 + shift + 0.5 * self.lam * (np.sin(t / 5) + 2.0) + self.rho * ylag
        else:
            rest = self.alpha0 + shift + self.lam * _even(t / 5) + self.rho * ylag
        return rest + drift + self.z_part(z)

    def mu0(self, t, z, ylag):
        return np.exp(self.log_mu0(t, z, ylag))

    def effect(self, z):
        return self.beta0 + self.beta1 * np.asarray(z, float)

    def mu(self, t, z, a, ylag):
        return np.exp(np.asarray(a, float) * self.effect(z)) * self.mu0(t, z, ylag)


@dataclass(frozen=True)
class CountConfig:
    n: int = 100
    T: int = 10
    form: Form = Form.SIMPLE_NONLINEAR
    lam: float = 0.8
    rho: float = 0.01
    seed: int = 0
    beta0: float = 0.1
    alpha0: float = -5.0
    alpha1: float = 0.8
    alpha2: float = 0.5

    kind = "count"

    def __post_init__(self):
        object.__setattr__(self, "form", Form.parse(self.form))
        _common_checks(self)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @property
    def link(self):
        return LinkKind.LOG

    def log_mu0(self, t, z, ylag):
        t = np.asarray(t, float)
        lag = self.rho * np.asarray(ylag, float)
        if self.form is Form.LINEAR:
            return self.alpha0 + self.alpha1 * t + lag
        if self.form is Form.SIMPLE_NONLINEAR:
            return self.alpha2 + self.lam * beta22_pdf(t / self.T) + lag
        if self.form is Form.PERIODIC:
            return self.alpha2 + self.lam * np.sin(t) + lag
        return self.alpha2 + self.lam * _even(t) + lag

    def mu0(self, t, z, ylag):
        return np.exp(self.log_mu0(t, z, ylag))

    def effect(self, z):
        return np.full(np.shape(z), self.beta0)

    def mu(self, t, z, a, ylag):
        return np.exp(np.asarray(a, float) * self.beta0) * self.mu0(t, z, ylag)


SimConfig = ContinuousConfig | BinaryConfig | CountConfig

CONFIG_TYPES = {"continuous": ContinuousConfig, "binary": BinaryConfig, "count": CountConfig}


def make_config(kind: str, **params) -> SimConfig:
    try:
        cls = CONFIG_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown outcome type {kind!r}; expected one of {sorted(CONFIG_TYPES)}") from None
    return cls(**params)


# -- exact marginal effects -------------------------------------------------


@lru_cache(maxsize=None)
def _binary_beta_star(cfg_key):
    cfg = BinaryConfig(**dict(cfg_key))
    dens = 0.25  # Unif[-2, 2]
    opts = dict(limit=400, epsabs=1e-13, epsrel=1e-12)
    if cfg.form is Form.STEP:
        # piecewise constant in Z: integrate cell by cell
        pts = list(np.arange(-1.5, 1.5001, 0.5))
        opts["points"] = pts
    top = integrate.quad(lambda z: dens * np.exp(cfg.beta1 * z + cfg.z_part(z)), -2, 2, **opts)[0]
    bottom = integrate.quad(lambda z: dens * np.exp(cfg.z_part(z)), -2, 2, **opts)[0]
    return cfg.beta0 + float(np.log(top / bottom))


def marginal_beta_star(cfg: SimConfig) -> float:
    """True marginal excursion effect (moderator = intercept only).

    Continuous: b0 + b1 E Z = b0.  Binary: the log ratio of E mu(H, 1) to
    E mu(H, 0), which differs slightly from b0 because Z enters both the
    effect and mu0; it does not depend on t since Z is independent of the
    lagged outcome.  Count: b0.
    """
    if isinstance(cfg, BinaryConfig):
        key = tuple(sorted((k, v) for k, v in _identity_fields(cfg).items()))
        return _binary_beta_star(key)
    return float(cfg.beta0)


def _identity_fields(cfg):
    out = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    out["n"], out["seed"] = 1, 0
    return out


# -- generation ---------------------------------------------------------------


def _streams(cfg):
    """Per-trajectory uniforms (Z, A) and a third array (normals or uniforms for Y)."""
    n, T = cfg.n, cfg.T
    uz = np.empty((n, T))
    ua = np.empty((n, T))
    third = np.empty((n, T))
    gaussian = isinstance(cfg, ContinuousConfig)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        uz[i] = rng.random(T)
        ua[i] = rng.random(T)
        third[i] = rng.standard_normal(T) if gaussian else rng.random(T)
    return uz, ua, third


def _bulk_streams(cfg, m, rng):
    T = cfg.T
    uz = rng.random((m, T))
    ua = rng.random((m, T))
    third = rng.standard_normal((m, T)) if isinstance(cfg, ContinuousConfig) else rng.random((m, T))
    return uz, ua, third


@dataclass(frozen=True)
class SimDraw:
    """Raw simulated arrays, each (n, T)."""

    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    ylag: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray


def _simulate(cfg, uz, ua, third) -> SimDraw:
    n, T = uz.shape
    z = -2.0 + 4.0 * uz
    a = (ua < 0.5).astype(float)
    tgrid = np.broadcast_to(np.arange(1, T + 1, dtype=float), (n, T))
    if isinstance(cfg, ContinuousConfig):
        L = np.linalg.cholesky(cfg.correlation())
        eps = (third @ L.T) * cfg.error_sd()
        mu0 = cfg.mu0(tgrid, z)
        mu1 = mu0 + cfg.effect(z)
        y = np.where(a == 1, mu1, mu0) + eps
        return SimDraw(z, a, y, np.zeros((n, T)), mu1, mu0)
    y = np.empty((n, T))
    ylag = np.zeros((n, T))
    mu1 = np.empty((n, T))
    mu0 = np.empty((n, T))
    for t in range(T):
        if t:
            ylag[:, t] = y[:, t - 1]
        mu0[:, t] = cfg.mu0(t + 1.0, z[:, t], ylag[:, t])
        mu1[:, t] = cfg.mu(t + 1.0, z[:, t], 1.0, ylag[:, t])
        mean = np.where(a[:, t] == 1, mu1[:, t], mu0[:, t])
        if isinstance(cfg, BinaryConfig):
            if np.any(mean >= 1.0) or np.any(mean <= 0.0):
                raise ValueError(f"success probability left (0, 1) at t={t + 1} under {cfg!r}")
            y[:, t] = (third[:, t] < mean).astype(float)
        else:
            if not np.all(np.isfinite(mean)) or np.any(mean <= 0):
                raise ValueError(f"Poisson mean not finite and positive at t={t + 1} under {cfg!r}")
            y[:, t] = poisson_quantile(third[:, t], mean)
    return SimDraw(z, a, y, ylag, mu1, mu0)


def poisson_quantile(u, mean):
    """Smallest k with P(Poisson(mean) <= k) >= u, elementwise."""
    u = np.asarray(u, float)
    mean = np.asarray(mean, float)
    pmf = np.exp(-mean)
    cdf = pmf.copy()
    k = np.zeros_like(u)
    active = u > cdf
    j = 0
    while active.any():
        j += 1
        pmf = pmf * mean / j
        cdf = cdf + pmf
        k[active] = j
        # stop once the tail mass is below round-off
        active = active & (u > cdf) & (pmf > 0)
    big = mean > 500  # exp(-mean) underflows; hand those to scipy
    if big.any():
        k[big] = stats.poisson.ppf(u[big], mean[big])
    return k


def _history(cfg, draw):
    n, T = draw.z.shape
    tcol = np.broadcast_to(np.arange(1, T + 1, dtype=float), (n, T))
    if isinstance(cfg, ContinuousConfig):
        return np.stack([tcol, draw.z], axis=-1), ("t", "z")
    return np.stack([tcol, draw.z, draw.ylag], axis=-1), ("t", "z", "ylag")


def _to_panel(cfg, draw):
    n, T = draw.z.shape
    hist, names = _history(cfg, draw)
    return Panel(np.ones((n, T)), np.full((n, T), 0.5), draw.a, draw.y, hist,
                 np.ones((n, T, 1)), names, ("intercept",))


def simulate_draw(cfg: SimConfig) -> SimDraw:
    return _simulate(cfg, *_streams(cfg))


def generate(cfg: SimConfig):
    """(Panel, TruthHandle) for any of the three configs."""
    draw = simulate_draw(cfg)
    return _to_panel(cfg, draw), TruthHandle(cfg)


def gen_continuous(cfg: ContinuousConfig):
    if not isinstance(cfg, ContinuousConfig):
        raise TypeError("expected a ContinuousConfig")
    return generate(cfg)


def gen_binary(cfg: BinaryConfig):
    if not isinstance(cfg, BinaryConfig):
        raise TypeError("expected a BinaryConfig")
    return generate(cfg)


def gen_count(cfg: CountConfig):
    if not isinstance(cfg, CountConfig):
        raise TypeError("expected a CountConfig")
    return generate(cfg)


# -- truth ----------------------------------------------------------------------


_DSTAR_CACHE: dict = {}


@dataclass(frozen=True)
class TruthHandle:
    cfg: object
    mc_budget: int = DEFAULT_MC_BUDGET
    mc_seed: int = 20240101

    @property
    def link(self):
        return self.cfg.link

    @property
    def beta_star(self) -> np.ndarray:
        return np.array([marginal_beta_star(self.cfg)])

    def mu(self, t, history, a):
        """mu*(t, h, a) for 1-based t and history rows laid out as in the panel."""
        history = np.asarray(history, float)
        z = history[..., 1]
        ylag = history[..., 2] if history.shape[-1] > 2 else np.zeros_like(z)
        return self.cfg.mu(np.asarray(t, float), z, a, ylag)

    def mu_panel(self, panel: Panel):
        t = np.broadcast_to(np.arange(1, panel.T + 1, dtype=float), (panel.n, panel.T))
        return self.mu(t, panel.history, 1.0), self.mu(t, panel.history, 0.0)

    def dstar_matrices(self, mc_budget: int | None = None) -> np.ndarray:
        """(T, p, p) oracle weights for the intercept-only moderator."""
        budget = int(mc_budget or self.mc_budget)
        return oracle_dstar_all(self.cfg, budget, self.mc_seed)

    def dstar_fit(self, mc_budget: int | None = None):
        mats = self.dstar_matrices(mc_budget)
        T, p, _ = mats.shape
        return explicit_dweights(p, T, lambda tidx, S: mats[np.asarray(tidx)], mode="oracle")


def _dstar_key(cfg, budget, seed):
    return (type(cfg).__name__, tuple(sorted(_identity_fields(cfg).items())), budget, seed)


def oracle_dstar_all(cfg: SimConfig, mc_budget: int = DEFAULT_MC_BUDGET, mc_seed: int = 20240101):
    """Monte Carlo E(d phi_t) E(phi_t^2)^{-1} at the truth for every t; cached."""
    key = _dstar_key(cfg, mc_budget, mc_seed)
    if key in _DSTAR_CACHE:
        return _DSTAR_CACHE[key]
    rng = np.random.default_rng([mc_seed, 0xD57A])
    beta = np.array([marginal_beta_star(cfg)])
    T = cfg.T
    jac = np.zeros(T)
    second = np.zeros(T)
    done = 0
    while done < mc_budget:
        m = min(MC_CHUNK, mc_budget - done)
        draw = _simulate(cfg, *_bulk_streams(cfg, m, rng))
        ones = np.ones((m, T))
        terms = cee_terms(cfg.link, ones, np.full((m, T), 0.5), draw.a, draw.y, ones[..., None],
                          draw.mu1, draw.mu0, beta)
        jac += (terms.weight * terms.dresid).sum(axis=0)
        second += ((terms.weight * terms.resid) ** 2).sum(axis=0)
        done += m
    mats = np.empty((T, 1, 1))
    for t in range(T):
        inv, _ = floored_inverse(np.array([[second[t] / mc_budget]]))
        if inv is None:
            raise ValueError(f"singular second moment at t={t + 1}")
        mats[t] = (jac[t] / mc_budget) * inv
    mats.setflags(write=False)
    _DSTAR_CACHE[key] = mats
    return mats


def oracle_dstar(truth: TruthHandle, t: int, s=None, mc_budget: int | None = None) -> np.ndarray:
    """d*_t(s) at 1-based ``t``; constant in s for the intercept-only moderator."""
    mats = truth.dstar_matrices(mc_budget)
    if not 1 <= t <= mats.shape[0]:
        raise ValueError(f"t={t} outside 1..{mats.shape[0]}")
    return mats[t - 1].copy()


def with_size(cfg: SimConfig, n: int, seed: int) -> SimConfig:
    return replace(cfg, n=n, seed=seed)
