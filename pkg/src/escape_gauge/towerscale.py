"""Iterated exponentials, iterated logarithms and the gauge ``t^2 (log^n 1/t)^gamma``.

Values such as ``exp(exp(exp(2)))`` do not fit in a double, so they are
carried as :class:`LogDepthMagnitude` ``(depth, mantissa)`` pairs meaning
``exp^depth(mantissa)``.

Gauge arguments ``t`` that underflow (``t <= 1/exp^3(2)`` is about
``e^-1618``) are handled through their log-inverse ``x = log(1/t)``; every
gauge routine has a ``*_x`` variant taking ``x`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Sequence, Union

import numpy as np

from .errors import DomainError

__all__ = [
    "LogDepthMagnitude",
    "Real",
    "iter_exp",
    "iter_log",
    "GaugeSpec",
    "gauge_h",
    "log_gauge_h_x",
    "gauge_concavity_margin",
    "gauge_concavity_margin_x",
    "gauge_G_prime_x",
    "concavity_second_differences",
    "Margin",
    "MarginReport",
    "gauge_inequality_margins",
    "random_lemma_suite",
    "ROUNDOFF_TOL",
]

#: Canonical form keeps depth-0 mantissas at or below ``exp(LIFT)``.
LIFT = 700.0
_E_LIFT = math.exp(LIFT)

#: Absolute slack on margins of mathematically non-strict inequalities.
ROUNDOFF_TOL = 1e-12

# relative slack when testing a float against a domain endpoint
_EDGE_RTOL = 1e-13


@total_ordering
@dataclass(frozen=True, eq=False)
class LogDepthMagnitude:
    """The real number ``exp^depth(mantissa)`` in canonical form.

    Canonical means ``depth == 0`` with ``mantissa <= exp(700)``, or
    ``depth > 0`` with ``700 < mantissa <= exp(700)``.  Construction always
    normalizes, so ``LogDepthMagnitude(1, 2.0)`` becomes ``(0, e^2)``.
    """

    depth: int = 0
    mantissa: float = 0.0

    def __post_init__(self):
        d = int(self.depth)
        m = float(self.mantissa)
        if d < 0:
            raise DomainError(f"depth must be non-negative, got {d}")
        if not math.isfinite(m):
            raise DomainError(f"mantissa must be finite, got {m}")
        while m > _E_LIFT:
            m = math.log(m)
            d += 1
        while d > 0 and m <= LIFT:
            m = math.exp(m)
            d -= 1
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "mantissa", m)

    # construction -------------------------------------------------------
    @classmethod
    def of(cls, value: Real) -> "LogDepthMagnitude":
        if isinstance(value, LogDepthMagnitude):
            return value
        return cls(0, float(value))

    @classmethod
    def from_log(cls, log_value: Real) -> "LogDepthMagnitude":
        """The number whose natural log is ``log_value``."""
        return cls.of(log_value).exp()

    # elementary maps ----------------------------------------------------
    def exp(self) -> "LogDepthMagnitude":
        if self.depth == 0:
            if self.mantissa <= LIFT:
                return LogDepthMagnitude(0, math.exp(self.mantissa))
            return LogDepthMagnitude(1, self.mantissa)
        return LogDepthMagnitude(self.depth + 1, self.mantissa)

    def log(self) -> "LogDepthMagnitude":
        if self.depth == 0:
            if self.mantissa <= 0.0:
                raise DomainError(f"log of non-positive value {self.mantissa!r}")
            return LogDepthMagnitude(0, math.log(self.mantissa))
        return LogDepthMagnitude(self.depth - 1, self.mantissa)

    @property
    def fits_float(self) -> bool:
        return self.depth == 0 or (self.depth == 1 and self.mantissa < 709.78)

    def __float__(self) -> float:
        if self.depth == 0:
            return self.mantissa
        if self.fits_float:
            return math.exp(self.mantissa)
        raise OverflowError(f"{self!r} exceeds double range")

    def log_float(self) -> float:
        """``log(self)`` as a plain float (must fit)."""
        return float(self.log())

    # arithmetic on positive magnitudes ------------------------------------
    def __add__(self, other: Real) -> "LogDepthMagnitude":
        a, b = self, LogDepthMagnitude.of(other)
        if a.depth == 0 and b.depth == 0:
            return LogDepthMagnitude(0, a.mantissa + b.mantissa)
        if a < b:
            a, b = b, a
        # now a.depth >= 1, a > exp(700)
        la = a.log()
        if la.depth > 0:
            return a
        if b.depth == 0:
            if b.mantissa == 0.0:
                return a
            ratio = math.copysign(math.exp(math.log(abs(b.mantissa)) - la.mantissa), b.mantissa)
        else:
            ratio = math.exp(b.log().mantissa - la.mantissa)
        return LogDepthMagnitude.from_log(la.mantissa + math.log1p(ratio))

    __radd__ = __add__

    def __mul__(self, other: Real) -> "LogDepthMagnitude":
        b = LogDepthMagnitude.of(other)
        if self.depth == 0 and b.depth == 0:
            prod = self.mantissa * b.mantissa
            if math.isfinite(prod):
                return LogDepthMagnitude(0, prod)
        if self.sign() <= 0 or b.sign() <= 0:
            raise DomainError("extended-range product needs positive factors")
        return LogDepthMagnitude.from_log(self.log() + b.log())

    __rmul__ = __mul__

    def __pow__(self, exponent: float) -> "LogDepthMagnitude":
        if self.sign() <= 0:
            raise DomainError("power of a non-positive magnitude")
        if exponent == 0:
            return LogDepthMagnitude(0, 1.0)
        la = self.log()
        if exponent > 0:
            return LogDepthMagnitude.from_log(la * float(exponent))
        if la.depth > 0:
            return LogDepthMagnitude(0, 0.0)
        return LogDepthMagnitude(0, math.exp(float(exponent) * la.mantissa))

    def sign(self) -> int:
        if self.depth > 0:
            return 1
        return (self.mantissa > 0) - (self.mantissa < 0)

    # ordering -----------------------------------------------------------
    def _key(self):
        return (self.depth, self.mantissa)

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float, LogDepthMagnitude)):
            return self._key() == LogDepthMagnitude.of(other)._key()
        return NotImplemented

    def __lt__(self, other) -> bool:
        if isinstance(other, (int, float, LogDepthMagnitude)):
            return self._key() < LogDepthMagnitude.of(other)._key()
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._key())

    def __repr__(self) -> str:
        if self.depth == 0:
            return f"LogDepthMagnitude({self.mantissa!r})"
        return f"LogDepthMagnitude(exp^{self.depth}({self.mantissa!r}))"


Real = Union[float, int, LogDepthMagnitude]


def iter_exp(n: int, x: Real) -> LogDepthMagnitude:
    """``exp^n(x)`` in canonical extended form."""
    if n < 0:
        raise DomainError(f"iteration count must be >= 0, got {n}")
    v = LogDepthMagnitude.of(x)
    for _ in range(n):
        v = v.exp()
    return v


def iter_log(n: int, v: Real) -> float:
    """``log^n(v)`` as a plain float.

    Raises DomainError as soon as a log would be taken of a non-positive
    number.  The final value may be any real.
    """
    if n < 0:
        raise DomainError(f"iteration count must be >= 0, got {n}")
    w = LogDepthMagnitude.of(v)
    for i in range(n):
        if w.sign() <= 0:
            raise DomainError(f"log^{i + 1} undefined: argument {w!r} <= 0")
        w = w.log()
    return float(w)


def _iter_log_float(n: int, x: float) -> float:
    for _ in range(n):
        if x <= 0.0:
            raise DomainError(f"log of non-positive value {x!r}")
        x = math.log(x)
    return x


@dataclass(frozen=True)
class GaugeSpec:
    """Parameters of ``h(t) = t^2 (log^n(1/t))^gamma`` on ``(0, delta_n]``."""

    n: int
    gamma: float
    log_inv_delta: LogDepthMagnitude = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"gauge depth n must be a positive integer, got {self.n}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "log_inv_delta", iter_exp(self.n - 1, self.gamma))

    @property
    def delta_n(self) -> float:
        """``1/exp^n(gamma)``; 0.0 when it underflows (use ``log_inv_delta``)."""
        lid = self.log_inv_delta
        if lid.depth > 0:
            return 0.0
        return math.exp(-lid.mantissa)

    def x_min(self) -> float:
        """Smallest admissible ``x = log(1/t)``."""
        return float(self.log_inv_delta)


def _x_of(t: float) -> float:
    if not (t > 0.0 and math.isfinite(t)):
        raise DomainError(f"t must be a positive finite real, got {t!r}")
    return -math.log(t)


def _at_least(x: float, bound: float) -> bool:
    return x >= bound * (1.0 - _EDGE_RTOL)


def _check_h_domain(spec: GaugeSpec, x: float, what: str = "t") -> None:
    if not _at_least(x, spec.x_min()):
        raise DomainError(f"{what} outside (0, delta_n] for n={spec.n}, gamma={spec.gamma}")


def gauge_h(spec: GaugeSpec, t: float) -> float:
    """``h(t)`` for ``0 < t <= delta_n``."""
    x = _x_of(t)
    _check_h_domain(spec, x)
    return t * t * _iter_log_float(spec.n - 1, x) ** spec.gamma


def log_gauge_h_x(spec: GaugeSpec, x: float, check: bool = True) -> float:
    """``log h(t)`` given ``x = log(1/t)``."""
    if check:
        _check_h_domain(spec, x)
    return -2.0 * x + spec.gamma * math.log(_iter_log_float(spec.n - 1, x))


def _sqrt_chain(n: int, y: float) -> tuple[float, float]:
    """Return ``(log^n(1/sqrt t), prod_{i=1..n} log^i(1/sqrt t))`` for ``y = log(1/sqrt t)``."""
    prod = 1.0
    v = y
    for i in range(n):
        prod *= v
        if i < n - 1:
            v = math.log(v)
    return v, prod


def gauge_concavity_margin_x(spec: GaugeSpec, x: float) -> float:
    """Bracket factor of ``G'(t)`` for ``G(t) = h(sqrt t)``, given ``x = log(1/t)``."""
    if not _at_least(x, 2.0 * spec.x_min()):
        raise DomainError("t outside (0, delta_n^2]")
    _, prod = _sqrt_chain(spec.n, 0.5 * x)
    return 1.0 - 0.5 * spec.gamma / prod


def gauge_concavity_margin(spec: GaugeSpec, t: float) -> float:
    """``1 - (gamma/2) / prod_{i=1..n} log^i(1/sqrt t)`` on ``(0, delta_n^2]``.

    Non-negative on the whole domain, which is what makes ``G = h(sqrt .)``
    increasing; see :func:`gauge_G_prime_x` for the derivative itself.
    """
    return gauge_concavity_margin_x(spec, _x_of(t))


def gauge_G_prime_x(spec: GaugeSpec, x: float) -> float:
    """``G'(t)`` in closed form, given ``x = log(1/t)``."""
    top, _ = _sqrt_chain(spec.n, 0.5 * x)
    return top ** spec.gamma * gauge_concavity_margin_x(spec, x)


def _phi(spec: GaugeSpec, x: float) -> float:
    # G(t) = t * phi(log 1/t)
    return _iter_log_float(spec.n - 1, 0.5 * x) ** spec.gamma


def concavity_second_differences(spec: GaugeSpec, xs: Sequence[float]) -> np.ndarray:
    """Successive differences of a numerically differentiated ``G'`` along increasing ``t``.

    ``xs`` are log-inverse abscissae.  With ``t = exp(-x)`` one has
    ``G'(t) = phi(x) - phi'(x)``; ``phi'`` is taken by central differences,
    so the check is independent of the closed-form bracket.  Concavity means
    every returned entry is ``<= 0`` up to roundoff.
    """
    xs = np.sort(np.asarray(xs, dtype=float))[::-1]  # decreasing x == increasing t
    gp = []
    for x in xs:
        hstep = 1e-5 * max(1.0, x)
        lo = x - hstep
        if not _at_least(lo, 2.0 * spec.x_min()):
            lo, hi = x, x + 2 * hstep
            dphi = (_phi(spec, hi) - _phi(spec, lo)) / (hi - lo)
        else:
            dphi = (_phi(spec, x + hstep) - _phi(spec, lo)) / (2 * hstep)
        gp.append(_phi(spec, x) - dphi)
    return np.diff(np.asarray(gp))


@dataclass(frozen=True)
class Margin:
    """One side-by-side evaluation of an inequality ``lhs <= rhs``."""

    lhs: float
    rhs: float
    scale: str = "linear"

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def holds(self, tol: float = ROUNDOFF_TOL) -> bool:
        return self.margin >= -tol


@dataclass(frozen=True)
class MarginReport:
    scaling: Margin | None
    superadditivity: Margin
    product: Margin

    def all_hold(self, tol: float = ROUNDOFF_TOL) -> bool:
        parts = [self.superadditivity, self.product]
        if self.scaling is not None:
            parts.append(self.scaling)
        return all(m.holds(tol) for m in parts)


def _lemma_xs(spec: GaugeSpec, inputs, log_inverse: bool) -> list[float]:
    if len(inputs) == 0:
        raise DomainError("need at least one input")
    xs = [float(v) for v in inputs] if log_inverse else [_x_of(float(t)) for t in inputs]
    bound = float(iter_exp(spec.n - 1, 2.0))
    for x in xs:
        if not _at_least(x, bound):
            raise DomainError(f"input outside (0, 1/exp^{spec.n}(2)]")
    return xs


def scaling_margin_x(spec: GaugeSpec, x: float, c: float) -> Margin:
    """``log h(ct)`` against ``log(c^2 h(t))`` for ``x = log(1/t)``."""
    if not c > 1.0:
        raise DomainError(f"scaling lemma needs c > 1, got {c}")
    xc = x - math.log(c)
    _check_h_domain(spec, xc, "c*t")
    lhs = log_gauge_h_x(spec, xc)
    rhs = 2.0 * math.log(c) + log_gauge_h_x(spec, x)
    return Margin(lhs, rhs, "log")


def gauge_inequality_margins(
    spec: GaugeSpec,
    inputs: Sequence[float],
    c: float | None = None,
    log_inverse: bool = False,
) -> MarginReport:
    """Evaluate both sides of the scaling, superadditivity and product lemmas.

    ``inputs`` are the ``t_j`` (or their ``log(1/t_j)`` if ``log_inverse``).
    The superadditivity margin is on the natural scale; scaling and product
    margins compare logarithms of both sides, since ``h`` of a product of
    small arguments underflows long before the inequality becomes
    uninteresting.  The scaling check uses the first input.
    """
    xs = _lemma_xs(spec, inputs, log_inverse)
    n, g = spec.n, spec.gamma
    lhs_log = _iter_log_float(n - 1, math.fsum(xs))
    logs = [_iter_log_float(n - 1, x) for x in xs]
    superadd = Margin(lhs_log, math.prod(logs))
    # log h(prod t) vs sum log h(t_j); the t^2 parts cancel exactly
    two_x = 2.0 * math.fsum(xs)
    product = Margin(-two_x + g * math.log(lhs_log), -two_x + g * math.fsum(math.log(v) for v in logs), "log")
    scaling = None if c is None else scaling_margin_x(spec, xs[0], c)
    return MarginReport(scaling, superadd, product)


def _iter_log_array(n: int, x: np.ndarray) -> np.ndarray:
    for _ in range(n):
        x = np.log(x)
    return x


def random_lemma_suite(n: int, gamma: float, count: int = 10_000, seed: int = 0, max_len: int = 6) -> dict:
    """Seeded randomized check of all four gauge lemmas.

    Returns minimum margins together with the seed and sample count, so a
    report reproduces exactly.  Inputs are drawn log-uniformly in ``x``
    over five decades above the lemma thresholds.
    """
    spec = GaugeSpec(n, gamma)
    rng = np.random.default_rng(seed)
    x_lemma = float(iter_exp(n - 1, 2.0))
    x_h = spec.x_min()

    lengths = rng.integers(1, max_len + 1, size=count)
    xs = x_lemma * np.exp(rng.uniform(0.0, math.log(1e5), size=(count, max_len)))
    mask = np.arange(max_len)[None, :] < lengths[:, None]
    # padded slots contribute 0 to sums and 1 to products
    xs_sum = np.where(mask, xs, 0.0).sum(axis=1)
    lhs = _iter_log_array(n - 1, xs_sum)
    per = _iter_log_array(n - 1, xs)
    rhs = np.where(mask, per, 1.0).prod(axis=1)
    superadd = rhs - lhs
    prod_margin = gamma * (np.where(mask, np.log(per), 0.0).sum(axis=1) - np.log(lhs))

    # scaling lemma: t, c*t both in (0, delta_n]
    c = np.exp(rng.uniform(0.0, math.log(10.0), size=count))
    x0 = np.maximum(x_h, x_lemma) + np.log(c) + x_h * np.expm1(rng.uniform(0.0, math.log(1e5), size=count))
    scale_margin = gamma * (np.log(_iter_log_array(n - 1, x0)) - np.log(_iter_log_array(n - 1, x0 - np.log(c))))

    # concavity: bracket on (0, delta_n^2] and monotone G'
    xc = 2.0 * x_h * np.exp(rng.uniform(0.0, math.log(1e5), size=count))
    xc[0] = 2.0 * x_h
    y = 0.5 * xc
    prod = np.ones_like(y)
    v = y.copy()
    for i in range(n):
        prod *= v
        if i < n - 1:
            v = np.log(v)
    conc = 1.0 - 0.5 * gamma / prod
    grid = 2.0 * x_h * np.geomspace(1.0, 1e5, 200)
    second = concavity_second_differences(spec, grid)

    return {
        "n": n,
        "gamma": gamma,
        "seed": seed,
        "count": count,
        "min_scaling_margin": float(scale_margin.min()),
        "min_superadditivity_margin": float(superadd.min()),
        "min_product_log_margin": float(prod_margin.min()),
        "min_concavity_margin": float(conc.min()),
        "max_G_prime_increase": float(second.max()),
    }
