"""Additive natural cubic spline design matrices.

Used as the smooth-regression workhorse: the additive-model nuisance
learner and the pooled smoother for the optimal weights both regress on
``AdditiveSplineBasis.transform(X)`` by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_KNOTS = 5


def natural_cubic_columns(x, knots):
    """Truncated-power natural cubic spline basis without the constant.

    Returns ``len(knots) - 1`` columns: x itself followed by the
    ``d_k - d_{K-1}`` terms, which keep the fit linear beyond the
    boundary knots.
    """
    x = np.asarray(x, float)
    knots = np.asarray(knots, float)
    K = knots.size
    last = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    cols = [x]
    if K >= 3:
        tail = d(K - 2)
        cols.extend(d(k) - tail for k in range(K - 2))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class _ColumnSpec:
    lo: float
    scale: float
    knots: tuple[float, ...]  # on the unit scale; empty means linear only
    constant: bool


@dataclass(frozen=True)
class AdditiveSplineBasis:
    columns: tuple[_ColumnSpec, ...]

    @classmethod
    def fit(cls, X, n_knots: int = DEFAULT_KNOTS) -> "AdditiveSplineBasis":
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[:, None]
        specs = []
        for j in range(X.shape[1]):
            x = X[:, j]
            lo, hi = float(np.min(x)), float(np.max(x))
            if hi - lo <= 1e-12 * max(1.0, abs(lo)):
                specs.append(_ColumnSpec(lo, 1.0, (), True))
                continue
            scale = hi - lo
            u = (x - lo) / scale
            knots: tuple[float, ...] = ()
            if n_knots >= 3 and np.unique(u).size > 2:
                q = np.unique(np.quantile(u, np.linspace(0.0, 1.0, n_knots)))
                if q.size >= 3:
                    knots = tuple(q.tolist())
            specs.append(_ColumnSpec(lo, scale, knots, False))
        return cls(tuple(specs))

    def transform(self, X, intercept: bool = True):
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[:, None]
        blocks = [np.ones((X.shape[0], 1))] if intercept else []
        for j, spec in enumerate(self.columns):
            if spec.constant:
                continue
            u = (X[:, j] - spec.lo) / spec.scale
            if spec.knots:
                blocks.append(natural_cubic_columns(u, spec.knots))
            else:
                blocks.append(u[:, None])
        if not blocks:
            return np.zeros((X.shape[0], 0))
        return np.concatenate(blocks, axis=1)

    @property
    def width(self) -> int:
        return 1 + sum(0 if c.constant else max(1, len(c.knots) - 1) for c in self.columns)
