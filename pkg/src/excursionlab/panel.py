"""Immutable micro-randomized trial panel and its validation rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cee import LinkKind

DEFAULT_TAU = 0.01


class StructuralError(ValueError):
    """Raised when panel pieces cannot be assembled into a rectangular panel."""


@dataclass(frozen=True)
class DecisionPoint:
    avail: int
    prob: float
    treat: int
    outcome: float
    history: tuple[float, ...] = ()
    moderator: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class Trajectory:
    points: tuple[DecisionPoint, ...]

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Violation:
    trajectory: int
    t: int  # 1-based decision point, 0 for panel-level rules
    rule: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def raise_if_failed(self):
        if self.violations:
            head = ", ".join(f"{v.rule}@(i={v.trajectory}, t={v.t})" for v in self.violations[:5])
            more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
            raise ValueError(f"panel failed validation: {head}{more}")


def _frozen(a, ndim):
    a = np.array(a, dtype=float, copy=True)
    if a.ndim != ndim:
        raise StructuralError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """n trajectories of T decision points stored as dense arrays.

    ``history`` is (n, T, h) and ``moderator`` is (n, T, p); the other
    fields are (n, T).
    """

    avail: np.ndarray
    prob: np.ndarray
    treat: np.ndarray
    outcome: np.ndarray
    history: np.ndarray
    moderator: np.ndarray
    history_names: tuple[str, ...] = ()
    moderator_names: tuple[str, ...] = ()
    ids: tuple = field(default=())

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("avail", "prob", "treat", "outcome"):
            set_(self, name, _frozen(getattr(self, name), 2))
        set_(self, "history", _frozen(self.history, 3))
        set_(self, "moderator", _frozen(self.moderator, 3))
        n, T = self.avail.shape
        if n < 1 or T < 1:
            raise StructuralError("a panel needs at least one trajectory and one decision point")
        for name in ("prob", "treat", "outcome"):
            if getattr(self, name).shape != (n, T):
                raise StructuralError(f"{name} has shape {getattr(self, name).shape}, expected {(n, T)}")
        if self.history.shape[:2] != (n, T) or self.moderator.shape[:2] != (n, T):
            raise StructuralError("history/moderator arrays must be (n, T, k)")
        if self.moderator.shape[2] < 1:
            raise StructuralError("moderator design needs at least one column")
        for name in ("avail", "prob", "treat", "outcome", "history", "moderator"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise StructuralError(f"non-finite values in {name}")
        hn = tuple(self.history_names) or tuple(f"h{j}" for j in range(self.history.shape[2]))
        mn = tuple(self.moderator_names) or tuple(f"f{j}" for j in range(self.moderator.shape[2]))
        if len(hn) != self.history.shape[2] or len(mn) != self.moderator.shape[2]:
            raise StructuralError("column names do not match feature dimensions")
        set_(self, "history_names", hn)
        set_(self, "moderator_names", mn)
        set_(self, "ids", tuple(self.ids) or tuple(range(1, n + 1)))
        if len(self.ids) != n:
            raise StructuralError("ids must have one entry per trajectory")

    @property
    def n(self) -> int:
        return self.avail.shape[0]

    @property
    def T(self) -> int:
        return self.avail.shape[1]

    @property
    def p(self) -> int:
        return self.moderator.shape[2]

    def subset(self, idx) -> "Panel":
        idx = np.asarray(idx)
        return Panel(
            self.avail[idx],
            self.prob[idx],
            self.treat[idx],
            self.outcome[idx],
            self.history[idx],
            self.moderator[idx],
            self.history_names,
            self.moderator_names,
            tuple(self.ids[i] for i in np.arange(self.n)[idx]),
        )

    def with_moderator(self, moderator, names=()) -> "Panel":
        return Panel(self.avail, self.prob, self.treat, self.outcome, self.history,
                     moderator, self.history_names, tuple(names), self.ids)

    def history_column(self, name: str) -> np.ndarray:
        return self.history[..., self.history_names.index(name)]

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return tuple(
            Trajectory(tuple(
                DecisionPoint(
                    int(self.avail[i, t]), float(self.prob[i, t]), int(self.treat[i, t]),
                    float(self.outcome[i, t]), tuple(self.history[i, t].tolist()),
                    tuple(self.moderator[i, t].tolist()),
                )
                for t in range(self.T)
            ))
            for i in range(self.n)
        )

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], history_names=(), moderator_names=()):
        if not trajectories:
            raise StructuralError("no trajectories")
        lengths = {len(tr.points) for tr in trajectories}
        if len(lengths) != 1:
            raise StructuralError(f"trajectories have differing lengths {sorted(lengths)}")
        p = moderator_dim(trajectories)
        h = {len(pt.history) for tr in trajectories for pt in tr.points}
        if len(h) != 1:
            raise StructuralError("history vectors have inconsistent lengths")
        (h,) = h
        (T,) = lengths

        def grab(attr, width=None):
            rows = [[getattr(pt, attr) for pt in tr.points] for tr in trajectories]
            arr = np.array(rows, dtype=float)
            if width is None:
                return arr
            return arr.reshape(len(trajectories), T, width)

        return cls(grab("avail"), grab("prob"), grab("treat"), grab("outcome"),
                   grab("history", h), grab("moderator", p), history_names, moderator_names)

    def equals(self, other: "Panel") -> bool:
        return (
            self.history_names == other.history_names
            and self.moderator_names == other.moderator_names
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("avail", "prob", "treat", "outcome", "history", "moderator")
            )
        )


def moderator_dim(data) -> int:
    """Common moderator length of a panel or a sequence of trajectories."""
    if isinstance(data, Panel):
        return data.p
    lengths = {len(pt.moderator) for tr in data for pt in tr.points}
    if len(lengths) != 1:
        raise StructuralError(f"moderator rows have inconsistent lengths {sorted(lengths)}")
    return lengths.pop()


def validate_panel(panel: Panel, link=LinkKind.IDENTITY, tau: float = DEFAULT_TAU) -> ValidationReport:
    """Check the structural constraints of an MRT panel; never raises."""
    link = LinkKind.parse(link)
    found: list[Violation] = []
    if panel.n < 2:
        found.append(Violation(0, 0, "too-few-trajectories"))

    def flag(mask, rule):
        for i, t in zip(*np.nonzero(mask)):
            found.append(Violation(int(i), int(t) + 1, rule))

    flag(~np.isin(panel.avail, (0.0, 1.0)), "non-binary-availability")
    flag(~np.isin(panel.treat, (0.0, 1.0)), "non-binary-treatment")
    on = panel.avail == 1
    flag((panel.avail == 0) & (panel.treat != 0), "treated-while-unavailable")
    flag(on & ((panel.prob < tau) | (panel.prob > 1 - tau)), "probability-out-of-bounds")
    if link is LinkKind.LOG:
        flag(panel.outcome < 0, "negative-outcome-under-log-link")
    found.sort(key=lambda v: (v.trajectory, v.t, v.rule))
    return ValidationReport(tuple(found))
