"""Long-format panel CSV files and JSON helpers.

Columns: id, t, avail, prob, treat, outcome, then ``h_*`` history columns
and ``f_*`` moderator columns.  Without any ``f_*`` column the moderator is
an intercept.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .panel import Panel

REQUIRED = ("id", "t", "avail", "prob", "treat", "outcome")


class SchemaError(ValueError):
    pass


def write_panel_csv(panel: Panel, path) -> None:
    header = list(REQUIRED) + [f"h_{nm}" for nm in panel.history_names] + [f"f_{nm}" for nm in panel.moderator_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(panel.n):
            for t in range(panel.T):
                row = [panel.ids[i], t + 1, _num(panel.avail[i, t]), _num(panel.prob[i, t]),
                       _num(panel.treat[i, t]), _num(panel.outcome[i, t])]
                row += [_num(v) for v in panel.history[i, t]]
                row += [_num(v) for v in panel.moderator[i, t]]
                w.writerow(row)


def _num(v):
    v = float(v)
    return repr(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def _parse(value, column, lineno):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"line {lineno}: column {column!r} has non-numeric value {value!r}") from None


def load_panel_csv(path, moderator: tuple[str, ...] | None = None) -> Panel:
    """Read a long-format panel; ``moderator`` picks ``f_*`` columns by name."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        rows = [(lineno, r) for lineno, r in enumerate(reader, start=2) if any(x.strip() for x in r)]
    if not rows:
        raise SchemaError("no data rows")
    col = {h: j for j, h in enumerate(header)}
    hist_cols = [h for h in header if h.startswith("h_")]
    mod_cols = [h for h in header if h.startswith("f_")]
    if moderator is not None:
        wanted = [f"f_{m}" if not m.startswith("f_") else m for m in moderator]
        absent = [m for m in wanted if m not in col]
        if absent:
            raise SchemaError(f"moderator column(s) not found: {', '.join(absent)}")
        mod_cols = wanted

    by_id: dict = {}
    order = []
    for lineno, r in rows:
        if len(r) != len(header):
            raise SchemaError(f"line {lineno}: expected {len(header)} fields, found {len(r)}")
        key = r[col["id"]].strip()
        t = _parse(r[col["t"]], "t", lineno)
        if not t.is_integer():
            raise SchemaError(f"line {lineno}: t must be an integer")
        if key not in by_id:
            by_id[key] = []
            order.append(key)
        by_id[key].append((int(t), lineno, r))

    T = None
    recs = []
    for key in order:
        pts = sorted(by_id[key], key=lambda x: x[0])
        ts = [p[0] for p in pts]
        if ts != list(range(1, len(ts) + 1)):
            raise SchemaError(f"id {key!r}: decision points must run 1..T without gaps (line {pts[0][1]})")
        if T is None:
            T = len(ts)
        elif len(ts) != T:
            raise SchemaError(f"id {key!r} has {len(ts)} decision points, expected {T} (ragged panel)")
        recs.append(pts)

    n = len(order)

    def grab(names):
        out = np.empty((n, T, len(names)))
        for i, pts in enumerate(recs):
            for t, (_, lineno, r) in enumerate(pts):
                for j, nm in enumerate(names):
                    out[i, t, j] = _parse(r[col[nm]], nm, lineno)
        return out

    base = grab(["avail", "prob", "treat", "outcome"])
    hist = grab(hist_cols)
    if mod_cols:
        mod = grab(mod_cols)
        mod_names = tuple(c[2:] for c in mod_cols)
    else:
        mod = np.ones((n, T, 1))
        mod_names = ("intercept",)
    return Panel(base[..., 0], base[..., 1], base[..., 2], base[..., 3], hist, mod,
                 tuple(c[2:] for c in hist_cols), mod_names, tuple(order))


def write_rows_csv(rows, path, fields=None) -> None:
    rows = list(rows)
    if fields is None:
        fields = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in fields})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def read_rows_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
