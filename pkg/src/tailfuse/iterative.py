"""Capture the point of the B-curve whose ordinate is close to ``p``.

Two monotone relations between an order index ``j`` and a probability are
iterated against each other:

* the B-curve, ``j -> B_(j)``, read backwards as "the index whose bound is
  closest to ``p``";
* the order-statistic inequality ``P(B_(j) > p) <= cap``, read as "the smallest
  grid value ``p`` satisfying it for this ``j``".

Starting from a large ``j`` the alternation descends ("Down"), from a small one
it ascends ("Up"); the estimate sits where a ladder of starting indices flips
from Down to Up.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import bdtr

from .fusion import BoundCollection, subsample_bounds

__all__ = [
    "DownUpEstimate",
    "DownUpFailure",
    "GridExhausted",
    "IterationTrace",
    "PGrid",
    "default_increment",
    "down_up_estimate",
    "iterate",
    "nearest_bound_index",
    "orderstat_exceed_prob",
    "single_start_estimate",
    "smallest_p",
    "trim_reference",
]

SCHEMA_VERSION = 1
DEFAULT_CAP = 0.95
DEFAULT_SUBSAMPLE = 1000
MAX_STEPS = 100

DOWN, UP, IMMEDIATE = "Down", "Up", "Immediate"


class GridExhausted(LookupError):
    """No grid point satisfies the order-statistic inequality for this ``j``."""


class DownUpFailure(RuntimeError):
    """The starting-index ladder never produced a Down-to-Up shift.

    ``reason`` is ``"max_too_large"`` when no Up trace appeared (the target
    sits at the bottom end of the B-curve) and ``"max_too_small"`` when no
    Down trace appeared.
    """

    HINTS = {
        "max_too_large": (
            "no converging Up sequence: max(reference) is too large relative to T; "
            "remove a few of the largest observations and rerun"
        ),
        "max_too_small": (
            "no converging Down sequence: max(reference) is too small relative to T; "
            "a larger reference sample is needed"
        ),
    }

    def __init__(self, reason: str, traces: list["IterationTrace"]):
        super().__init__(self.HINTS[reason])
        self.reason = reason
        self.traces = traces


def orderstat_exceed_prob(n: int, j: int, F_at_p: float) -> float:
    """``P(B_(j) > p) = sum_{k<j} C(n, k) F^k (1 - F)^(n - k)``.

    Evaluated as a binomial CDF through the regularized incomplete beta
    function, so no binomial coefficient is ever formed.
    """
    if not 1 <= j <= n:
        raise ValueError(f"order index j={j} outside 1..{n}")
    if not 0.0 <= F_at_p <= 1.0:
        raise ValueError(f"F_B(p)={F_at_p} is not a probability")
    return float(bdtr(j - 1, n, F_at_p))


def default_increment(p: float) -> float:
    """Grid spacing used for targets near 1e-3 and near 1e-4."""
    return 0.0001 if p >= 5e-4 else 0.000015


@dataclass(frozen=True)
class PGrid:
    """Probability grid ``origin, origin + increment, ...`` scanned upward.

    ``origin`` defaults to one increment. The grid runs up to ``max_p`` and
    includes the first point at or beyond it, so the largest bound of a
    collection is always reachable.
    """

    increment: float
    max_p: float | None = None
    origin: float | None = None

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("grid increment must be positive")
        if self.origin is not None and not self.origin > 0:
            raise ValueError("grid origin must be positive")

    def anchored(self, curve: np.ndarray) -> "PGrid":
        """Same spacing, starting at the smallest positive bound of ``curve``."""
        curve = np.asarray(curve)
        positive = curve[curve > 0]
        return self if positive.size == 0 else replace(self, origin=float(positive[0]))

    @property
    def start(self) -> float:
        return self.increment if self.origin is None else self.origin

    def size(self, max_p: float) -> int:
        top = max_p if self.max_p is None else self.max_p
        count = max(int(math.floor((top - self.start) / self.increment)) + 1, 1)
        if self.start + self.increment * (count - 1) < top:
            count += 1
        return count

    def points(self, max_p: float) -> np.ndarray:
        return self.start + self.increment * np.arange(self.size(max_p))

    def first_at_or_above(self, b: float, max_p: float) -> float:
        """Smallest grid point ``>= b``; same arithmetic as :meth:`points`."""
        start, inc = self.start, self.increment
        m = max(int(math.ceil((b - start) / inc)), 0)
        while m > 0 and start + inc * (m - 1) >= b:
            m -= 1
        while start + inc * m < b:
            m += 1
        if m >= self.size(max_p):
            raise GridExhausted(f"no grid point at or above {b}")
        return start + inc * m


def smallest_p(
    j: int,
    fb: Callable[[np.ndarray], np.ndarray],
    grid: PGrid,
    n: int,
    cap: float = DEFAULT_CAP,
    max_p: float = 1.0,
) -> float:
    """Scan ``grid`` upward for the first ``p`` with ``P(B_(j) > p) <= cap``.

    ``fb`` evaluates ``F_B`` on an array of probabilities and ``n`` is the
    number of bounds behind the order statistic.
    """
    if not 1 <= j <= n:
        raise ValueError(f"order index j={j} outside 1..{n}")
    pts = grid.points(max_p)
    prob = bdtr(j - 1, n, np.asarray(fb(pts), dtype=float))
    hit = np.flatnonzero(prob <= cap)
    if hit.size == 0:
        raise GridExhausted(f"no grid point satisfies the inequality for j={j}")
    return float(pts[hit[0]])


def nearest_bound_index(curve: np.ndarray, p: float) -> int:
    """1-based ``j`` minimizing ``|B_(j) - p|``; ties go to the smaller ``j``."""
    curve = np.asarray(curve)
    if curve.size == 0:
        raise ValueError("empty B-curve")
    # argmin keeps the first of equal distances, which is the smaller j
    return int(np.argmin(np.abs(curve - p))) + 1


@lru_cache(maxsize=64)
def _threshold_levels(n: int, levels: int, cap: float) -> np.ndarray:
    """For each ``j`` in 1..n, the least ``i`` with ``bdtr(j-1, n, i/levels) <= cap``.

    ``F_B`` of an ``levels``-point ECDF only takes the values ``i/levels``, so
    this table turns every :func:`smallest_p` query into a lookup.
    """
    j = np.arange(1, n + 1)
    lo = np.zeros(n, dtype=np.int64)  # bdtr(j-1, n, 0) = 1 > cap
    hi = np.full(n, levels, dtype=np.int64)  # bdtr(j-1, n, 1) = 0 <= cap
    while np.any(hi - lo > 1):
        mid = (lo + hi) // 2
        ok = bdtr(j - 1, n, mid / levels) <= cap
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    hi.flags.writeable = False
    return hi


@dataclass
class IterationTrace:
    """One alternating sequence ``(j_1, p_1), (j_2, p_2), ...``."""

    start_j: int
    steps: list[tuple[int, float]]
    direction: str
    converged: bool

    @property
    def converged_p(self) -> float:
        return self.steps[-1][1]

    @property
    def final_j(self) -> int:
        return self.steps[-1][0]

    @property
    def iterations(self) -> int:
        return len(self.steps) - 1

    def to_dict(self) -> dict:
        return {
            "start_j": self.start_j,
            "converged_p": self.converged_p,
            "iterations": self.iterations,
            "direction": self.direction,
            "converged": self.converged,
        }


class _Crossing:
    """B-curve of a working collection and its order-statistic inequality."""

    def __init__(self, curve: BoundCollection, grid: PGrid, cap: float, fb: BoundCollection | None = None):
        self.curve = curve.sorted
        self.n = self.curve.size
        self.fb = self.curve if fb is None else fb.sorted
        self.grid = grid
        self.cap = cap
        self.max_p = float(max(self.curve[-1], self.fb[-1]))
        self._levels = _threshold_levels(self.n, self.fb.size, float(cap))

    def smallest_p(self, j: int) -> float:
        i = int(self._levels[j - 1])
        return self.grid.first_at_or_above(float(self.fb[i - 1]), self.max_p)

    def nearest(self, p: float) -> int:
        return nearest_bound_index(self.curve, p)

    def trace(self, start_j: int, max_steps: int = MAX_STEPS) -> IterationTrace:
        if not 1 <= start_j <= self.n:
            raise ValueError(f"start index {start_j} outside 1..{self.n}")
        steps = [(start_j, self.smallest_p(start_j))]
        converged = False
        for _ in range(max_steps):
            j = self.nearest(steps[-1][1])
            step = (j, self.smallest_p(j))
            steps.append(step)
            if step == steps[-2]:
                converged = True
                break
        final = steps[-1][0]
        direction = DOWN if final < start_j else UP if final > start_j else IMMEDIATE
        return IterationTrace(start_j, steps, direction, converged)


def iterate(
    start_j: int,
    coll: BoundCollection,
    grid: PGrid,
    cap: float = DEFAULT_CAP,
    fb: BoundCollection | None = None,
    max_steps: int = MAX_STEPS,
) -> IterationTrace:
    """Alternate the B-curve and the inequality until a ``(j, p)`` pair repeats.

    ``fb`` supplies the bounds behind ``F_B`` (defaults to ``coll``). A trace
    that hits ``max_steps`` comes back with ``converged=False``.
    """
    return _Crossing(coll, grid, cap, fb).trace(start_j, max_steps)


def _quartile_start(curve: np.ndarray) -> int:
    return nearest_bound_index(curve, float(np.quantile(curve, 0.75)))


@dataclass
class DownUpEstimate:
    p_hat: float
    shift_pair: tuple[float, float]
    traces: list[IterationTrace]
    subsample_seed: int | None
    subsample_size: int
    estimator: str = "shift_mean"
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "p_hat": self.p_hat,
            "shift_pair": list(self.shift_pair),
            "estimator": self.estimator,
            "subsample": {"seed": self.subsample_seed, "size": self.subsample_size},
            "traces": [t.to_dict() for t in self.traces],
            **self.meta,
        }


def _ladder(start: int, step: int, n: int, descending: bool):
    j = start
    while 1 <= j <= n:
        yield j
        j = j - step if descending else j + step


def down_up_estimate(
    full: BoundCollection,
    grid: PGrid,
    k: int = DEFAULT_SUBSAMPLE,
    seed: int | None = 0,
    cap: float = DEFAULT_CAP,
    use_full_ecdf: bool = False,
    estimator: str = "shift_mean",
    window: int = 3,
    anchor: str = "increment",
    start: str = "quartile",
) -> DownUpEstimate:
    """Down-Up shift estimate from one random subsample of ``k`` bounds.

    With ``seed=None`` and ``k == len(full)`` the whole collection is used.

    Starting indices run down in steps of ``max(10, k // 100)`` from the index
    of the subsample's third quartile, or from ``k`` itself with
    ``start="top"``. The estimate is the mean of the last
    Down and the first Up converged values (``estimator="shift_mean"``), or
    with ``estimator="window_mean"`` the mean over up to ``window`` traces on
    each side of the shift. ``anchor="min_bound"`` starts the grid at the
    smallest bound of the subsample instead of at one increment.

    If the very first trace is already Up the ladder climbs instead, looking
    for the Down region above it.

    Raises
    ------
    DownUpFailure
        When no Up (or no Down) trace occurs anywhere on the ladder.
    """
    if estimator not in ("shift_mean", "window_mean"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if start not in ("quartile", "top"):
        raise ValueError(f"unknown start rule {start!r}")
    if anchor not in ("increment", "min_bound"):
        raise ValueError(f"unknown grid anchor {anchor!r}")
    if len(full) < k:
        raise ValueError(f"collection has {len(full)} bounds, fewer than the subsample size {k}")
    if seed is None:
        if k != len(full):
            raise ValueError("a subsample seed is required when k is smaller than the collection")
        work = full
    else:
        work = subsample_bounds(full, k, seed)
    if anchor == "min_bound":
        grid = grid.anchored(work.sorted)
    cross = _Crossing(work, grid, cap, full if use_full_ecdf else None)
    n = cross.n
    step = max(10, n // 100)
    first_j = _quartile_start(cross.curve) if start == "quartile" else n

    traces: list[IterationTrace] = []
    first = cross.trace(first_j)
    traces.append(first)
    descending = first.direction != UP
    wanted_before, wanted_after = (DOWN, UP) if descending else (UP, DOWN)

    shift = None
    before: list[IterationTrace] = [first] if first.direction == wanted_before else []
    after: list[IterationTrace] = []
    for j in _ladder(first_j, step, n, descending):
        if j == first_j:
            continue
        tr = cross.trace(j)
        traces.append(tr)
        if shift is None:
            if tr.direction == wanted_before:
                before.append(tr)
            elif tr.direction == wanted_after and before:
                shift = len(traces) - 1
                after.append(tr)
                if estimator == "shift_mean":
                    break
        elif tr.direction != wanted_before:
            after.append(tr)
            if len(after) >= window:
                break
        else:
            break
    if shift is None:
        seen = {t.direction for t in traces}
        reason = "max_too_small" if DOWN not in seen else "max_too_large"
        raise DownUpFailure(reason, traces)

    down, up = (before[-1], after[0]) if descending else (after[0], before[-1])
    pair = (down.converged_p, up.converged_p)
    if estimator == "shift_mean":
        p_hat = pair[0] if pair[0] == pair[1] else 0.5 * (pair[0] + pair[1])
    else:
        vals = [t.converged_p for t in before[-window:]] + [t.converged_p for t in after[:window]]
        p_hat = float(np.mean(vals))
    return DownUpEstimate(
        p_hat=float(p_hat),
        shift_pair=pair,
        traces=traces,
        subsample_seed=seed,
        subsample_size=n,
        estimator=estimator,
        meta={
            "fb_source": "full" if use_full_ecdf else "subsample",
            "cap": cap,
            "start": start,
            "grid": {"increment": grid.increment, "origin": grid.start},
        },
    )


def single_start_estimate(coll: BoundCollection, grid: PGrid, cap: float = DEFAULT_CAP) -> IterationTrace:
    """One trace over the whole collection, started at its third quartile."""
    cross = _Crossing(coll, grid, cap)
    return cross.trace(_quartile_start(cross.curve))


def trim_reference(reference, drop: int) -> np.ndarray:
    """Remove the ``drop`` largest observations, keeping the original order."""
    reference = np.asarray(reference, dtype=float).ravel()
    if not 0 <= drop < reference.size:
        raise ValueError(f"cannot drop {drop} of {reference.size} observations")
    if drop == 0:
        return reference.copy()
    keep = np.ones(reference.size, dtype=bool)
    keep[np.argsort(reference, kind="stable")[reference.size - drop:]] = False
    return reference[keep]


def write_traces_csv(traces: list[IterationTrace], path: str | Path) -> None:
    """Concatenated traces; ``step`` restarts at 1 for each trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "j", "p", "direction"])
        for tr in traces:
            for s, (j, p) in enumerate(tr.steps, start=1):
                w.writerow([s, j, format(p, ".17g"), tr.direction])


def write_estimate_json(est: DownUpEstimate, path: str | Path) -> None:
    Path(path).write_text(json.dumps(est.to_dict(), indent=1) + "\n")
