"""Pole counting ``n(r)``, its integral asymptote, ``N(r)``, and the ``n``-th order estimator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, InsufficientRange
from .growth import GrowthModel, log_q, log_q_prime, p_of, q_of
from .quadrature import adaptive_simpson
from .towerscale import LogDepthMagnitude

__all__ = [
    "CountReport",
    "pole_count",
    "counting_integral",
    "pole_count_asymptote",
    "order_samples",
    "ring_midpoints",
    "order_estimate",
    "count_reports",
    "reports_to_csv",
]

_BLOCK = 1_000_000
MAX_RINGS = 200_000_000


def _ring_top(model: GrowthModel, r: float) -> int:
    """``floor(q(r))``, or ``k0`` when ``r`` lies below the first admissible radius."""
    if r < model.r_min:
        return model.k0
    q = q_of(model, r)
    if not q.fits_float:
        raise DomainError(f"q({r}) is too large to enumerate rings")
    return max(model.k0, math.floor(float(q)))


def _prefix_sums(model: GrowthModel, tops: Sequence[int]) -> list[tuple[int, float]]:
    """``(sum n_k, sum n_k log p(k))`` over ``k0 < k <= top`` for each top, in one pass."""
    order = sorted(range(len(tops)), key=lambda i: tops[i])
    out: list[tuple[int, float]] = [(0, 0.0)] * len(tops)
    hi_all = max(tops) if tops else model.k0
    if hi_all - model.k0 > MAX_RINGS:
        raise DomainError(f"counting past {MAX_RINGS} rings is out of reach")
    total_n = 0
    total_w = 0.0
    pos = 0
    k = model.k0 + 1
    while pos < len(order):
        top = tops[order[pos]]
        while k <= top:
            stop = min(top, k + _BLOCK - 1)
            ks = np.arange(k, stop + 1, dtype=float)
            v = ks
            quotient = model.rho * ks
            for _ in range(model.n):
                v = np.log(v)
                quotient = quotient * v
            nk = np.floor(quotient)
            total_n += int(nk.astype(np.int64).sum())
            total_w += math.fsum(nk * (np.log(v) / model.rho))
            k = stop + 1
        out[order[pos]] = (total_n, total_w)
        pos += 1
    return out


def pole_count(model: GrowthModel, r: float) -> int:
    """``n(r) = 2 sum_{k=k0+1}^{floor q(r)} n_k`` as an exact integer."""
    top = _ring_top(model, r)
    return 2 * _prefix_sums(model, [top])[0][0]


def counting_integral(model: GrowthModel, r: float) -> float:
    """``N(r) = int_0^r n(t)/t dt = sum_{|a_j| <= r} log(r/|a_j|)``, integrated exactly per step."""
    top = _ring_top(model, r)
    cnt, w = _prefix_sums(model, [top])[0]
    return 2.0 * (cnt * math.log(r) - w)


@dataclass(frozen=True)
class Asymptote:
    log_integral: float      # log of 2 int_{r0}^{r} q'(s)^2 s ds
    log_closed_form: float   # log of q(r) q'(r) r
    r0: float

    @property
    def quadrature_over_closed_form(self) -> float:
        return math.exp(self.log_integral - self.log_closed_form)


def _log_integrand(model: GrowthModel, s: float) -> float:
    lq = log_q_prime(model, s)
    if not lq.depth == 0:
        raise DomainError(f"log q'({s}) leaves double range; the asymptote is not representable")
    return math.log(2.0) + 2.0 * lq.mantissa + math.log(s)


def pole_count_asymptote(model: GrowthModel, r: float, rel_tol: float = 1e-8) -> Asymptote | None:
    """``2 int_{r0}^{r} q'(s)^2 s ds`` in log form, with ``r0 = p(k0+1)``; ``None`` when ``r <= r0``.

    The integrand is rescaled by its value at ``r`` so the quadrature works
    on numbers of order one; the scale is added back in log space.
    """
    r0 = p_of(model, model.k0 + 1)
    if r <= r0:
        return None
    top = _log_integrand(model, r)
    f = lambda s: math.exp(_log_integrand(model, s) - top)
    # the rescaled integrand decays very fast below r; split so the mass near r is resolved
    pts = [r0]
    width = r - r0
    for frac in (1e-3, 1e-2, 1e-1):
        if frac * width > 0 and r - frac * width > r0:
            pts.append(r - frac * width)
    pts.append(r)
    pts = sorted(set(pts))
    total = math.fsum(adaptive_simpson(f, a, b, rel_tol=rel_tol) for a, b in zip(pts, pts[1:]))
    if total <= 0:
        raise DomainError("asymptote quadrature lost all precision")
    log_int = top + math.log(total)
    lq = log_q(model, r)
    lqp = log_q_prime(model, r)
    if lq.depth or lqp.depth:
        raise DomainError("q(r) q'(r) r is not representable in log form")
    closed = lq.mantissa + lqp.mantissa + math.log(r)
    return Asymptote(log_int, closed, r0)


def ring_midpoints(model: GrowthModel, radii: Sequence[float]) -> list[float]:
    """Snap each radius to ``p(floor(q(r)) + 1/2)``, midway between its ring and the next.

    ``n(r)`` jumps by ``2 n_k`` at every ring, so comparisons against a smooth
    asymptote at arbitrary radii inherit an oscillation of that relative size.
    """
    return [p_of(model, _ring_top(model, float(r)) + 0.5) for r in radii]


def order_samples(model: GrowthModel, k_lo: float, k_hi: float, count: int = 8) -> list[float]:
    """Radii ``p(k + 1/2)`` for ``count`` ring indices spaced geometrically in ``[k_lo, k_hi]``."""
    ks = np.unique(np.round(np.geomspace(k_lo, k_hi, count)).astype(np.int64))
    return [p_of(model, float(k) + 0.5) for k in ks]


def order_estimate(model: GrowthModel, r_samples: Sequence[float]) -> float:
    """Slope of ``log^{n+1} N(r)`` against ``log r``; ``N`` stands in for ``T`` (the proximity term is bounded)."""
    xs, ys = [], []
    rs = sorted(float(r) for r in r_samples)
    tops = [_ring_top(model, r) for r in rs]
    sums = _prefix_sums(model, tops)
    for r, (cnt, w) in zip(rs, sums):
        N = 2.0 * (cnt * math.log(r) - w)
        if N <= 0:
            continue
        y = N
        ok = True
        for _ in range(model.n + 1):
            if y <= 0:
                ok = False
                break
            y = math.log(y)
        if ok and math.isfinite(y):
            xs.append(math.log(r))
            ys.append(y)
    if len(xs) < 4:
        raise InsufficientRange(f"only {len(xs)} usable radii; need at least 4")
    slope, _ = np.polyfit(xs, ys, 1)
    return float(slope)


@dataclass(frozen=True)
class CountReport:
    r: float
    exact_count: int
    asymptote_log: float | None
    ratio: float | None


def count_reports(model: GrowthModel, radii: Sequence[float]) -> list[CountReport]:
    rs = sorted(float(r) for r in radii)
    tops = [_ring_top(model, r) for r in rs]
    sums = _prefix_sums(model, tops)
    out = []
    for r, (cnt, _) in zip(rs, sums):
        exact = 2 * cnt
        asym = pole_count_asymptote(model, r)
        if asym is None:
            out.append(CountReport(r, exact, None, None))
            continue
        ratio = math.exp(math.log(exact) - asym.log_integral) if exact > 0 else 0.0
        out.append(CountReport(r, exact, asym.log_integral, ratio))
    return out


def reports_to_csv(rows: Sequence[CountReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "exact", "asymptote_log", "ratio"])
    for row in rows:
        w.writerow([repr(float(row.r)), row.exact_count,
                    "" if row.asymptote_log is None else repr(float(row.asymptote_log)),
                    "" if row.ratio is None else repr(float(row.ratio))])
    return buf.getvalue()
