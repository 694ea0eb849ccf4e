"""Growth scaffolding ``q(r) = exp^n(r^rho)``, its inverse ``p``, and the ring sizes ``n_k``.

``q`` maps ``[2^(1/rho), inf)`` onto ``[exp^n(2), inf)``; ``p`` is its
inverse.  Ring ``k >= k0+1`` of the constructed function carries ``2 n_k``
poles on the circle of radius ``p(k)``, with ``n_k = floor(p(k)/p'(k))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from typing import Sequence

import numpy as np

from .errors import DomainError
from .quadrature import adaptive_simpson
from .towerscale import LogDepthMagnitude, Real, iter_exp, iter_log

__all__ = [
    "GrowthModel",
    "separation_constant",
    "p_of",
    "p_prime",
    "p_over_p_prime",
    "p_increment",
    "q_of",
    "log_q",
    "log_q_prime",
    "q_prime",
    "q_over_q_prime",
    "q_over_r_q_prime",
    "d_q_over_q_prime",
    "n_index",
    "ring_sizes",
    "first_nk_at_least_k",
    "separation_margin",
    "separation_grid",
    "partial_sum_nk",
    "pm_threshold",
    "p_prime_monotone_threshold",
]


def _tower_floor(n: int, x: float) -> int:
    """``floor(exp^n(x))`` as an exact integer, using decimal arithmetic when it overflows doubles."""
    v = iter_exp(n, x)
    if v.depth == 0:
        return math.floor(v.mantissa)
    if v.depth > 1:
        raise DomainError(f"exp^{n}({x}) has too many digits to index rings")
    digits = int(v.mantissa / math.log(10)) + 40
    with localcontext() as ctx:
        ctx.prec = digits
        d = Decimal(x)
        for _ in range(n):
            d = d.exp()
        return int(d.to_integral_value(rounding="ROUND_FLOOR"))


@dataclass(frozen=True)
class GrowthModel:
    """``(rho, n)`` for ``q(r) = exp^n(r^rho)``; ``k0 = floor(exp^n 2) + 1``."""

    rho: float
    n: int
    k0: int = field(init=False)

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise DomainError(f"rho must be positive, got {self.rho}")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")
        object.__setattr__(self, "k0", _tower_floor(self.n, 2.0) + 1)

    @property
    def t_min(self) -> LogDepthMagnitude:
        return iter_exp(self.n, 2.0)

    @property
    def r_min(self) -> float:
        return 2.0 ** (1.0 / self.rho)


def separation_constant(n: int) -> float:
    """``c = (log 2)^(n+1) / 2``."""
    return math.log(2.0) ** (n + 1) / 2.0


# --- p and its derivative -----------------------------------------------------

def _check_t(model: GrowthModel, t: Real) -> LogDepthMagnitude:
    tt = LogDepthMagnitude.of(t)
    lo = model.t_min
    if tt < lo and not (lo.depth == 0 and tt.depth == 0 and tt.mantissa >= lo.mantissa * (1 - 1e-13)):
        raise DomainError(f"t={t!r} below exp^{model.n}(2)")
    return tt


def _log_chain(n: int, t: LogDepthMagnitude) -> list[LogDepthMagnitude]:
    """``[log t, log^2 t, ..., log^n t]``."""
    out = []
    v = t
    for _ in range(n):
        v = v.log()
        out.append(v)
    return out


def p_of(model: GrowthModel, t: Real) -> float:
    """``p(t) = (log^n t)^(1/rho)`` for ``t >= exp^n(2)``."""
    tt = _check_t(model, t)
    return iter_log(model.n, tt) ** (1.0 / model.rho)


def _log_p_over_p_prime(model: GrowthModel, tt: LogDepthMagnitude) -> LogDepthMagnitude:
    # log(p/p') = log rho + log t + sum_i log(log^i t)
    chain = _log_chain(model.n, tt)
    acc = tt.log() + math.log(model.rho)
    for v in chain:
        acc = acc + v.log()
    return acc


def p_over_p_prime(model: GrowthModel, t: Real) -> float:
    """``p(t)/p'(t) = rho * t * log t * ... * log^n t``."""
    tt = _check_t(model, t)
    if tt.depth == 0:
        prod = model.rho * tt.mantissa
        v = tt.mantissa
        for _ in range(model.n):
            v = math.log(v)
            prod *= v
        return prod
    return float(_log_p_over_p_prime(model, tt).exp())


def _check_formula_domain(model: GrowthModel, t: Real) -> LogDepthMagnitude:
    # the closed form only needs log^n t > 0, which is wider than [exp^n 2, inf)
    tt = LogDepthMagnitude.of(t)
    if iter_log(model.n, tt) <= 0:
        raise DomainError(f"log^{model.n}({t!r}) is not positive")
    return tt


def p_prime(model: GrowthModel, t: Real) -> float:
    """``p'(t) = (1/rho) (log^n t)^(1/rho) / (t log t ... log^n t)``; may underflow to 0.

    Accepts any ``t`` with ``log^n t > 0``, so values just below ``exp^n(2)``
    are still evaluated by the closed form.
    """
    tt = _check_formula_domain(model, t)
    lp = math.log(iter_log(model.n, tt)) / model.rho
    lq = _log_p_over_p_prime(model, tt)
    if lq.depth > 0:
        return 0.0
    return math.exp(lp - lq.mantissa)


def _log_ratio(model: GrowthModel, hi: float, lo: float) -> float:
    """``log(p(hi)/p(lo))`` without cancellation, for ``hi >= lo >= exp^n 2``.

    Propagates ``D_i = log^i(hi) - log^i(lo)`` through ``D_i = log1p(D_{i-1}/log^{i-1}(lo))``.
    """
    d = float(hi - lo)
    base = float(lo)
    for _ in range(model.n):
        d = math.log1p(d / base)
        base = math.log(base)
    return math.log1p(d / base) / model.rho


def p_increment(model: GrowthModel, t: float, dt: float = 0.5) -> float:
    """``p(t + dt) - p(t)`` computed stably."""
    p = p_of(model, t)
    return p * math.expm1(_log_ratio(model, t + dt, t))


# --- q and its derivative -----------------------------------------------------

def _r_pow(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    rr = LogDepthMagnitude.of(r)
    if rr < model.r_min * (1 - 1e-13):
        raise DomainError(f"r={r!r} below 2^(1/rho)")
    return rr ** model.rho


def q_of(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    """``q(r) = exp^n(r^rho)``."""
    return iter_exp(model.n, _r_pow(model, r))


def log_q(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    """``log q(r) = exp^(n-1)(r^rho)``."""
    return iter_exp(model.n - 1, _r_pow(model, r))


def _log_r(r: Real) -> float:
    lr = LogDepthMagnitude.of(r).log()
    return float(lr)


def log_q_prime(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    """``log q'(r) = sum_{i=0}^{n-1} exp^i(r^rho) + log rho + (rho-1) log r``.

    Each ``exp^i(r^rho)`` is the log of one factor of ``q'``; the product is
    never formed.
    """
    x = _r_pow(model, r)
    acc = LogDepthMagnitude.of(math.log(model.rho) + (model.rho - 1.0) * _log_r(r))
    v = x
    for _ in range(model.n):
        acc = acc + v
        v = v.exp()
    return acc


def q_prime(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    return log_q_prime(model, r).exp()


def _log_q_prime_minus_log_q(model: GrowthModel, r: Real) -> LogDepthMagnitude:
    # log q' - log q = sum_{i=0}^{n-2} exp^i(r^rho) + log rho + (rho-1) log r
    x = _r_pow(model, r)
    acc = LogDepthMagnitude.of(math.log(model.rho) + (model.rho - 1.0) * _log_r(r))
    v = x
    for _ in range(model.n - 1):
        acc = acc + v
        v = v.exp()
    return acc


def q_over_q_prime(model: GrowthModel, r: Real) -> float:
    """``q(r)/q'(r)``, formed from logs so it never overflows."""
    d = _log_q_prime_minus_log_q(model, r)
    if d.depth > 0:
        return 0.0
    return math.exp(-d.mantissa)


def q_over_r_q_prime(model: GrowthModel, r: Real) -> float:
    d = _log_q_prime_minus_log_q(model, r) + _log_r(r)
    if d.depth > 0:
        return 0.0
    return math.exp(-d.mantissa)


def d_q_over_q_prime(model: GrowthModel, r: float, rel_step: float = 1e-5) -> float:
    """Central-difference derivative of ``q/q'`` at ``r``."""
    h = rel_step * r
    lo = max(r - h, model.r_min)
    hi = r + h
    return (q_over_q_prime(model, hi) - q_over_q_prime(model, lo)) / (hi - lo)


# --- ring sizes ---------------------------------------------------------------

def ring_sizes(model: GrowthModel, ks) -> np.ndarray:
    """``n_k = floor(rho k log k ... log^n k)`` for an array of ring indices (int64)."""
    k = np.asarray(ks, dtype=float)
    prod = model.rho * k
    v = k
    for _ in range(model.n):
        v = np.log(v)
        prod = prod * v
    return np.floor(prod).astype(np.int64)


def n_index(model: GrowthModel, k: int) -> int:
    """``n_k = floor(p(k)/p'(k))`` for integer ``k >= k0``."""
    if int(k) != k:
        raise DomainError(f"ring index must be an integer, got {k}")
    if k < model.k0:
        raise DomainError(f"k={k} below k0={model.k0}")
    return int(ring_sizes(model, [k])[0])


def first_nk_at_least_k(model: GrowthModel, search: int = 100_000) -> int | None:
    """First ``k >= k0`` from which ``n_k >= k`` holds for every ``k`` in the search window."""
    ks = np.arange(model.k0, model.k0 + search, dtype=np.int64)
    ok = ring_sizes(model, ks) >= ks
    if not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    return int(ks[0] if bad.size == 0 else ks[bad[-1] + 1])


def separation_margin(model: GrowthModel, k: int, l: float) -> float:
    """Slack in the ring separation inequalities.

    For ``l > k``: ``n_k log(p(l)/p(k)) - c min(k, l-k)``.
    For ``l < k``: ``n_k log(p(k)/p(l)) - c (k-l)``.
    Both are non-negative; ``c = (log 2)^(n+1)/2``.
    """
    if int(k) != k:
        raise DomainError("k must be an integer")
    if k < model.k0 or l < model.k0:
        raise DomainError(f"indices must be >= k0={model.k0}")
    if l == k:
        raise DomainError("k and l must differ")
    nk = n_index(model, int(k))
    c = separation_constant(model.n)
    if l > k:
        return nk * _log_ratio(model, l, k) - c * min(k, l - k)
    return nk * _log_ratio(model, k, l) - c * (k - l)


def separation_grid(model: GrowthModel, ks, ls) -> np.ndarray:
    """Vectorized :func:`separation_margin` over the outer grid ``ks x ls``; ``nan`` where ``k == l``."""
    k = np.asarray(ks, dtype=float)[:, None]
    l = np.asarray(ls, dtype=float)[None, :]
    if k.min() < model.k0 or l.min() < model.k0:
        raise DomainError(f"indices must be >= k0={model.k0}")
    nk = ring_sizes(model, k[:, 0]).astype(float)[:, None]
    hi = np.maximum(k, l)
    lo = np.minimum(k, l)
    d = hi - lo
    base = lo
    for _ in range(model.n):
        d = np.log1p(d / base)
        base = np.log(base)
    log_ratio = np.log1p(d / base) / model.rho
    c = separation_constant(model.n)
    penalty = np.where(l > k, c * np.minimum(k, l - k), c * (k - l))
    out = nk * log_ratio - penalty
    return np.where(k == l, np.nan, out)


def partial_sum_nk(model: GrowthModel, l: float, rel_tol: float = 1e-6) -> tuple[int, float, float]:
    """``(sum_{k=k0+1}^{floor l} n_k, integral_{k0+1}^{l} p/p' dt, ratio)``.

    The integral is taken by adaptive Simpson in ``u = log t``.
    """
    top = math.floor(l)
    if top < model.k0 + 1:
        raise DomainError(f"floor(l)={top} below k0+1={model.k0 + 1}")
    ks = np.arange(model.k0 + 1, top + 1)
    total = int(ring_sizes(model, ks).sum())
    a = math.log(model.k0 + 1)
    b = math.log(l)

    def integrand(u: float) -> float:
        t = math.exp(u)
        return p_over_p_prime(model, t) * t

    integral = adaptive_simpson(integrand, a, b, rel_tol=rel_tol) if b > a else 0.0
    ratio = total / integral if integral > 0 else math.inf
    return total, integral, ratio


def pm_threshold(model: GrowthModel, ts: Sequence[float], lo: float = 0.45, hi: float = 0.55) -> float | None:
    """First grid point from which ``p(t+1/2)-p(t)`` stays within ``[lo, hi] * p'(t)``."""
    ts = sorted(float(t) for t in ts)
    ok = []
    for t in ts:
        ratio = p_increment(model, t) / p_prime(model, t)
        ok.append(lo <= ratio <= hi)
    for i in range(len(ts)):
        if all(ok[i:]):
            return ts[i]
    return None


def p_prime_monotone_threshold(model: GrowthModel, ts: Sequence[float]) -> float | None:
    """First grid point after which sampled ``p'`` never increases."""
    ts = sorted(float(t) for t in ts)
    vals = [p_prime(model, t) for t in ts]
    for i in range(len(ts) - 1):
        if all(vals[j + 1] <= vals[j] for j in range(i, len(ts) - 1)):
            return ts[i]
    return None
