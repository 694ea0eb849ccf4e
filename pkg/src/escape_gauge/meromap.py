"""The meromorphic function ``g`` with rings of poles at ``|z| = p(k)``, and ``f = g^M``.

Each ring contributes ``2 p^n z^n / (z^{2n} - p^{2n}) = 1/sinh(n log(z/p))``
with ``n = n_k`` and ``p = p(k)``.  Writing ``z = u (1 + s)`` with ``u`` the
nearest pole of the ring turns this into ``(-1)^l / sinh(n log1p(s))``,
which stays accurate both next to a pole and far from the ring.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, PoleProximity, TruncationUnsafe
from .growth import GrowthModel, p_of, ring_sizes, separation_constant

__all__ = [
    "FunctionParams",
    "PoleDatum",
    "OrbitStatus",
    "OrbitRecord",
    "WebSpec",
    "WebReport",
    "choose_k_max",
    "tail_bound_log2",
    "tail_bound",
    "poles_up_to",
    "poles_to_csv",
    "eval_g",
    "eval_g_prime",
    "eval_f",
    "eval_f_prime",
    "ring_term_bound_margin",
    "web_constant",
    "web_points",
    "web_sup",
    "orbit",
    "orbit_many",
]

# 2^-1100 is below the smallest subnormal double: such ring terms are exact zeros
_NEGLIGIBLE_NK = 1100
_PROXIMITY_RTOL = 1e-12
_ASYMPTOTIC_RE = 30.0
_RING_CHUNK = 256
_TINY = 1e-150


def tail_bound_log2(model: GrowthModel, k_max: int) -> float:
    """``log2`` of the geometric majorant ``2^(3 - n_{k_max+1})`` of the truncation tail of ``g``."""
    return 3.0 - float(ring_sizes(model, [k_max + 1])[0])


def tail_bound(model: GrowthModel, k_max: int) -> float:
    return 2.0 ** tail_bound_log2(model, k_max)


def _verify_increasing(model: GrowthModel, k_max: int) -> None:
    # the ratio-1/2 majorant needs n_k strictly increasing beyond k_max
    ks = np.arange(k_max, k_max + 64)
    if np.any(np.diff(ring_sizes(model, ks)) < 1):
        raise DomainError(f"n_k is not strictly increasing past k_max={k_max}")


def choose_k_max(model: GrowthModel, tail_policy: float, z_radius: float = 0.0) -> int:
    """Smallest ``k_max`` whose tail majorant is below ``tail_policy/2`` and with ``p(k_max) >= 2 z_radius``."""
    if not tail_policy > 0:
        raise DomainError("tail_policy must be positive")
    need_n = 3.0 - math.log2(tail_policy) + 1.0
    k = model.k0 + 1
    while ring_sizes(model, [k + 1])[0] < need_n:
        k += 1
    if z_radius > 0:
        target = 2.0 * z_radius
        if target > p_of(model, k):
            lo, hi = k, k
            while p_of(model, hi) < target:
                lo, hi = hi, hi * 2
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if p_of(model, mid) < target:
                    lo = mid
                else:
                    hi = mid
            k = hi
    return int(k)


@dataclass(frozen=True)
class FunctionParams:
    """Truncated ``g`` (rings ``k0+1 .. k_max``) and its power ``f = g^M``."""

    model: GrowthModel
    M: int = 1
    k_max: int = 0
    tail_policy: float = 1e-12
    _rings: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise DomainError(f"M must be a positive integer, got {self.M}")
        k_max = self.k_max or choose_k_max(self.model, self.tail_policy)
        object.__setattr__(self, "k_max", int(k_max))
        if self.k_max < self.model.k0 + 1:
            raise DomainError(f"k_max={self.k_max} below k0+1={self.model.k0 + 1}")
        _verify_increasing(self.model, self.k_max)
        if self.tail_bound > self.tail_policy:
            raise DomainError(
                f"tail bound 2^{tail_bound_log2(self.model, self.k_max):.0f} exceeds policy {self.tail_policy}"
            )
        ks = np.arange(self.model.k0 + 1, self.k_max + 1, dtype=np.int64)
        v = ks.astype(float)
        quotient = self.model.rho * v
        for _ in range(self.model.n):
            v = np.log(v)
            quotient = quotient * v
        ps = v ** (1.0 / self.model.rho)
        ns = np.floor(quotient).astype(np.int64)
        object.__setattr__(self, "_rings", (ks, ps, ns, ps / quotient))

    @classmethod
    def for_radius(cls, model: GrowthModel, z_radius: float, M: int = 1, tail_policy: float = 1e-12):
        """Parameters whose safe evaluation disk contains ``|z| <= z_radius``."""
        return cls(model, M, choose_k_max(model, tail_policy, z_radius), tail_policy)

    @property
    def rings(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(k, p(k), n_k)`` arrays for the retained rings."""
        return self._rings[:3]

    @property
    def ring_p_prime(self) -> np.ndarray:
        return self._rings[3]

    @property
    def tail_bound(self) -> float:
        return tail_bound(self.model, self.k_max)

    @property
    def tail_bound_log2(self) -> float:
        return tail_bound_log2(self.model, self.k_max)

    @property
    def safe_radius(self) -> float:
        """Largest ``|z|`` at which the tail majorant is certified."""
        return 0.5 * float(self._rings[1][-1])


@dataclass(frozen=True)
class PoleDatum:
    k: int
    l: int
    n_k: int
    location: complex
    residue: complex
    multiplicity_f: int = 1

    @property
    def a(self) -> complex:
        return self.location

    @property
    def b(self) -> complex:
        return self.residue


def _pole(model: GrowthModel, k: int, l: int, n: int, p: float, M: int) -> PoleDatum:
    rot = complex(math.cos(math.pi * l / n), math.sin(math.pi * l / n))
    if l == 0:
        rot = 1 + 0j
    elif l == n:
        rot = -1 + 0j
    sign = -1.0 if l % 2 else 1.0
    return PoleDatum(int(k), int(l), int(n), p * rot, sign * (p / n) * rot, M)


def poles_up_to(params: FunctionParams, k_max: int | None = None) -> list[PoleDatum]:
    """All poles on rings ``k0+1 .. k_max``, ordered by ring and then by angle index ``l``."""
    k_max = params.k_max if k_max is None else int(k_max)
    model = params.model
    if k_max < model.k0 + 1:
        raise DomainError(f"k_max={k_max} below k0+1={model.k0 + 1}")
    out = []
    for k in range(model.k0 + 1, k_max + 1):
        n = int(ring_sizes(model, [k])[0])
        p = p_of(model, k)
        out.extend(_pole(model, k, l, n, p, params.M) for l in range(2 * n))
    return out


def poles_to_csv(poles: Iterable[PoleDatum]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "l", "re_u", "im_u", "re_nu", "im_nu", "n_k"])
    for d in poles:
        w.writerow([d.k, d.l, repr(d.location.real), repr(d.location.imag),
                    repr(d.residue.real), repr(d.residue.imag), d.n_k])
    return buf.getvalue()


# --- evaluation ---------------------------------------------------------------

def _clog1p(s: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """``log(1 + s)``; pass ``w = 1 + s`` when it is known more accurately than ``1 + s``."""
    # numpy's complex log1p loses the real part for small |s|
    a, b = s.real, s.imag
    w = 1 + s if w is None else w
    small = np.abs(s) < 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        re = np.where(small, 0.5 * np.log1p(2 * a + a * a + b * b), np.log(np.abs(w)))
    im = np.where(small, np.arctan2(b, 1 + a), np.angle(w))
    return re + 1j * im


@dataclass
class _RingEval:
    value: np.ndarray
    deriv: np.ndarray | None
    hit: np.ndarray      # bool: within tolerance of a pole
    hit_k: np.ndarray
    hit_l: np.ndarray


def _active_rings(params: FunctionParams, rmax: float) -> int:
    ks, ps, ns = params.rings
    # past this index every term is below 2^-1100 at all requested points
    idx_p = int(np.searchsorted(ps, 2.0 * rmax, side="left"))
    idx_n = int(np.searchsorted(ns, _NEGLIGIBLE_NK, side="right"))
    return min(len(ks), max(idx_p, idx_n) + 1)


def _ring_sum(params: FunctionParams, z: np.ndarray, want_deriv: bool) -> _RingEval:
    z = np.asarray(z, dtype=complex)
    shape = z.shape
    zf = z.reshape(-1)
    ks, ps, ns = params.rings
    value = np.zeros(zf.shape, dtype=complex)
    deriv = np.zeros(zf.shape, dtype=complex) if want_deriv else None
    hit = np.zeros(zf.shape, dtype=bool)
    hit_k = np.full(zf.shape, -1, dtype=np.int64)
    hit_l = np.full(zf.shape, -1, dtype=np.int64)
    if zf.size == 0:
        return _RingEval(value.reshape(shape), deriv, hit, hit_k, hit_l)
    # below this modulus every ring term underflows to zero (g has a zero of order n_{k0+1} at 0)
    nz = np.abs(zf) > _TINY
    zz = zf[nz]
    if zz.size == 0:
        return _RingEval(value.reshape(shape), deriv.reshape(shape) if want_deriv else None,
                         hit.reshape(shape), hit_k.reshape(shape), hit_l.reshape(shape))
    count = _active_rings(params, float(np.abs(zz).max()))
    arg = np.angle(zz)[:, None]
    acc = np.zeros(zz.shape, dtype=complex)
    dacc = np.zeros(zz.shape, dtype=complex)
    zhit = np.zeros(zz.shape, dtype=bool)
    zk = np.full(zz.shape, -1, dtype=np.int64)
    zl = np.full(zz.shape, -1, dtype=np.int64)
    # fixed ring blocks keep summation order independent of k_max
    for start in range(0, count, _RING_CHUNK):
        stop = min(count, start + _RING_CHUNK)
        p = ps[start:stop][None, :]
        n = ns[start:stop].astype(float)[None, :]
        ls = np.rint(n * arg / math.pi)
        u = p * np.exp(1j * math.pi * ls / n)
        w = zz[:, None] / u
        s = (zz[:, None] - u) / u
        dist = np.abs(s) * p
        pprime = params.ring_p_prime[start:stop][None, :]
        close = dist <= _PROXIMITY_RTOL * math.pi * pprime
        L = n * _clog1p(s, w)
        par = np.where(np.mod(ls, 2) == 0, 1.0, -1.0)
        re = L.real
        far_pos = re > _ASYMPTOTIC_RE
        far_neg = re < -_ASYMPTOTIC_RE
        mid = ~(far_pos | far_neg)
        with np.errstate(all="ignore"):
            inv_sinh = np.where(mid, 1.0 / np.sinh(np.where(mid, L, 0.0)), 0.0)
            inv_sinh = np.where(far_pos, 2.0 * np.exp(-np.where(far_pos, L, 0.0)), inv_sinh)
            inv_sinh = np.where(far_neg, -2.0 * np.exp(np.where(far_neg, L, 0.0)), inv_sinh)
            inv_sinh = np.where(close, 0.0, inv_sinh)
            terms = par * inv_sinh
        acc = acc + np.cumsum(terms, axis=1)[:, -1]
        if want_deriv:
            with np.errstate(all="ignore"):
                coth = np.where(mid, np.cosh(np.where(mid, L, 0.0)) * inv_sinh, 0.0)
                coth = np.where(far_pos, 1.0, coth)
                coth = np.where(far_neg, -1.0, coth)
                dterms = -par * n * coth * inv_sinh / zz[:, None]
                dterms = np.where(close, 0.0, dterms)
            dacc = dacc + np.cumsum(dterms, axis=1)[:, -1]
        if close.any():
            rows, cols = np.nonzero(close)
            first = ~zhit[rows]
            zhit[rows] = True
            zk[rows[first]] = ks[start:stop][cols[first]]
            lv = ls[rows[first], cols[first]]
            nv = ns[start:stop][cols[first]]
            zl[rows[first]] = np.mod(lv, 2 * nv).astype(np.int64)
    value[nz] = acc
    if want_deriv:
        deriv[nz] = dacc
    hit[nz] = zhit
    hit_k[nz] = zk
    hit_l[nz] = zl
    return _RingEval(
        value.reshape(shape),
        deriv.reshape(shape) if want_deriv else None,
        hit.reshape(shape),
        hit_k.reshape(shape),
        hit_l.reshape(shape),
    )


def _scalar_or_array(z, arr):
    return complex(arr) if np.ndim(z) == 0 else arr


def _guard(params: FunctionParams, z: np.ndarray, ev: _RingEval) -> None:
    if np.any(np.abs(z) > params.safe_radius):
        bad = np.asarray(z).reshape(-1)[np.argmax(np.abs(np.asarray(z).reshape(-1)))]
        raise TruncationUnsafe(
            f"|z|={abs(bad):.6g} exceeds p(k_max)/2={params.safe_radius:.6g}; raise k_max"
        )
    if ev.hit.any():
        i = int(np.argmax(ev.hit.reshape(-1)))
        k = int(ev.hit_k.reshape(-1)[i])
        l = int(ev.hit_l.reshape(-1)[i])
        raise PoleProximity(f"z is within tolerance of pole u[{k},{l}]", k=k, l=l)


def eval_g(params: FunctionParams, z):
    """``(g(z), tail_bound)``; ``z`` may be a scalar or an array."""
    za = np.asarray(z, dtype=complex)
    ev = _ring_sum(params, za, want_deriv=False)
    _guard(params, za, ev)
    return _scalar_or_array(z, ev.value), params.tail_bound


def eval_g_prime(params: FunctionParams, z):
    za = np.asarray(z, dtype=complex)
    ev = _ring_sum(params, za, want_deriv=True)
    _guard(params, za, ev)
    return _scalar_or_array(z, ev.deriv)


def _power_perturbation(absg, tb: float, M: int):
    return (absg + tb) ** M - absg ** M


def eval_f(params: FunctionParams, z, radii: Sequence[float] = ()):
    """``(f(z), tail_flag)`` with ``f = g^M``.

    ``tail_flag`` is true where the truncation tail could move ``|f|`` across
    one of ``radii``.
    """
    g, tb = eval_g(params, z)
    ga = np.asarray(g)
    f = ga ** params.M
    absf = np.abs(f)
    slack = _power_perturbation(np.abs(ga), tb, params.M)
    flag = np.zeros(absf.shape, dtype=bool)
    for R in radii:
        flag |= np.abs(absf - R) <= slack
    if np.ndim(z) == 0:
        return complex(f), bool(flag)
    return f, flag


def eval_f_prime(params: FunctionParams, z):
    """``f'(z) = M g^(M-1) g'``."""
    za = np.asarray(z, dtype=complex)
    ev = _ring_sum(params, za, want_deriv=True)
    _guard(params, za, ev)
    out = params.M * ev.value ** (params.M - 1) * ev.deriv
    return _scalar_or_array(z, out)


def ring_term_bound_margin(params: FunctionParams, k: int, z) -> np.ndarray:
    """``2^(1-n_k) - |p^n z^n / (z^(2n) - p^(2n))|`` for ``|z| <= p(k)/2`` (log-space)."""
    model = params.model
    n = int(ring_sizes(model, [k])[0])
    p = p_of(model, k)
    w = np.abs(np.asarray(z, dtype=complex)) / p
    if np.any(w > 0.5):
        raise DomainError("ring term bound needs |z| <= p(k)/2")
    with np.errstate(divide="ignore"):
        log_term = n * np.log(w) - np.log1p(-w ** (2 * n))
    bound = (1 - n) * math.log(2.0)
    # margin expressed relative to the bound to survive underflow
    return 1.0 - np.exp(log_term - bound)


# --- spider's web ---------------------------------------------------------------

def web_constant(n: int, tol: float = 1e-10) -> tuple[float, float]:
    """``(C, c)`` with ``C = sum_{k>=1} 1/(e^{ck}-1) + sum_{j>=0} 1/(e^{c(j+1/2)}-1)``."""
    c = separation_constant(n)
    total = 0.0
    k = 1
    ratio = math.exp(-c)
    while True:
        a = 1.0 / math.expm1(c * k)
        b = 1.0 / math.expm1(c * (k - 0.5))
        total += a + b
        # once e^{ck} >= 2, each series is majorized by 2 e^{-ck} geometrically
        nxt = c * (k + 0.5)
        if math.exp(nxt) >= 2.0:
            tail = 2.0 * (math.exp(-c * (k + 1)) + math.exp(-nxt)) / (1.0 - ratio)
            if tail < tol:
                break
        k += 1
    return total, c


@dataclass(frozen=True)
class WebSpec:
    m_range: tuple[int, int]
    samples_per_circle: int = 1024
    samples_per_segment: int = 32

    @property
    def rings(self) -> range:
        return range(self.m_range[0], self.m_range[1] + 1)


@dataclass(frozen=True)
class WebReport:
    sup_sampled: float
    theoretical_bound: float
    C: float
    c: float
    tail_allowance: float
    samples: int
    argmax: complex
    per_ring_sup: tuple

    @property
    def holds(self) -> bool:
        return self.sup_sampled <= self.theoretical_bound + self.tail_allowance


def web_points(model: GrowthModel, m: int, spec: WebSpec) -> np.ndarray:
    """Sample points of ``W1`` (the circle ``|z| = p(m+1/2)``) and ``W2`` (rays between the poles of ring ``m``)."""
    r_out = p_of(model, m + 0.5)
    r_in = p_of(model, m - 0.5)
    theta = 2 * math.pi * (np.arange(spec.samples_per_circle) + 0.5) / spec.samples_per_circle
    circle = r_out * np.exp(1j * theta)
    n = int(ring_sizes(model, [m])[0])
    eta = np.arange(1, 2 * n + 1)
    angles = math.pi * (2 * eta - 1) / (2 * n)
    radii = np.linspace(r_in, r_out, spec.samples_per_segment)
    rays = (radii[None, :] * np.exp(1j * angles)[:, None]).reshape(-1)
    return np.concatenate([circle, rays])


def web_sup(params: FunctionParams, web: WebSpec) -> WebReport:
    """Sampled ``sup |g|`` over the web rings against the bound ``4C + 4``."""
    model = params.model
    lo, hi = web.m_range
    if lo < model.k0 + 1 or hi > params.k_max - 1:
        raise DomainError(f"web rings must lie in [{model.k0 + 1}, {params.k_max - 1}]")
    C, c = web_constant(model.n)
    best = -1.0
    where = 0j
    per_ring = []
    total = 0
    for m in web.rings:
        pts = web_points(model, m, web)
        g, tb = eval_g(params, pts)
        a = np.abs(g)
        i = int(np.argmax(a))
        per_ring.append((m, float(a[i])))
        total += pts.size
        if a[i] > best:
            best, where = float(a[i]), complex(pts[i])
    # allow the truncation tail plus summation roundoff
    allowance = params.tail_bound + 1e-12 * (4 * C + 4)
    return WebReport(best, 4 * C + 4, C, c, allowance, total, where, tuple(per_ring))


# --- orbits ---------------------------------------------------------------------

@dataclass(frozen=True)
class OrbitStatus:
    kind: str  # escaped | bounded_after | hit_pole | truncation_unsafe
    step: int
    radius_index: int | None = None

    @property
    def escapes(self) -> bool:
        return self.kind in ("escaped", "hit_pole")

    @property
    def escape_step(self) -> int | None:
        """Step at which the orbit is classified as escaped; a pole escapes on the next step."""
        if self.kind == "escaped":
            return self.step
        if self.kind == "hit_pole":
            return self.step + 1
        return None


@dataclass(frozen=True)
class OrbitRecord:
    start: complex
    iterates: tuple
    status: OrbitStatus
    level_steps: tuple = ()


def orbit(params: FunctionParams, z0: complex, radii: Sequence[float], max_iter: int = 100) -> OrbitRecord:
    """Iterate ``f`` from ``z0`` through the nondecreasing escape schedule ``radii``."""
    radii = [float(r) for r in radii]
    if not radii or any(r <= 0 for r in radii) or any(b < a for a, b in zip(radii, radii[1:])):
        raise DomainError("radii must be a nonempty nondecreasing list of positive reals")
    if max_iter < 1:
        raise DomainError("max_iter must be at least 1")
    z = complex(z0)
    iterates = [z]
    level = 0
    level_steps: list[int] = []
    for step in range(max_iter + 1):
        while level < len(radii) and abs(z) > radii[level]:
            level_steps.append(step)
            level += 1
        if level == len(radii):
            return OrbitRecord(complex(z0), tuple(iterates), OrbitStatus("escaped", step, level - 1), tuple(level_steps))
        if step == max_iter:
            break
        if abs(z) > params.safe_radius:
            return OrbitRecord(complex(z0), tuple(iterates), OrbitStatus("truncation_unsafe", step), tuple(level_steps))
        ev = _ring_sum(params, np.array([z]), want_deriv=False)
        if ev.hit[0]:
            return OrbitRecord(complex(z0), tuple(iterates), OrbitStatus("hit_pole", step), tuple(level_steps))
        g = complex(ev.value[0])
        f = g ** params.M
        slack = _power_perturbation(abs(g), params.tail_bound, params.M)
        if any(abs(abs(f) - R) <= slack for R in radii[level:]) or not math.isfinite(abs(f)):
            return OrbitRecord(complex(z0), tuple(iterates), OrbitStatus("truncation_unsafe", step), tuple(level_steps))
        z = f
        iterates.append(z)
    return OrbitRecord(complex(z0), tuple(iterates), OrbitStatus("bounded_after", max_iter), tuple(level_steps))


ESCAPED, BOUNDED, HIT_POLE, UNSAFE = 0, 1, 2, 3


def orbit_many(params: FunctionParams, z0, escape_radius: float, max_iter: int = 100):
    """Vectorized escape test with a single radius.

    Returns ``(kind, step)`` integer arrays; ``kind`` uses the module codes
    ``ESCAPED``, ``BOUNDED``, ``HIT_POLE``, ``UNSAFE``.
    """
    z = np.array(z0, dtype=complex).reshape(-1)
    kind = np.full(z.shape, BOUNDED, dtype=np.int8)
    step = np.full(z.shape, max_iter, dtype=np.int64)
    active = np.ones(z.shape, dtype=bool)
    tb = params.tail_bound
    for it in range(max_iter + 1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        zz = z[idx]
        esc = np.abs(zz) > escape_radius
        kind[idx[esc]] = ESCAPED
        step[idx[esc]] = it
        active[idx[esc]] = False
        if it == max_iter:
            break
        idx = idx[~esc]
        zz = z[idx]
        unsafe = np.abs(zz) > params.safe_radius
        kind[idx[unsafe]] = UNSAFE
        step[idx[unsafe]] = it
        active[idx[unsafe]] = False
        idx = idx[~unsafe]
        if idx.size == 0:
            break
        ev = _ring_sum(params, z[idx], want_deriv=False)
        kind[idx[ev.hit]] = HIT_POLE
        step[idx[ev.hit]] = it
        active[idx[ev.hit]] = False
        keep = ~ev.hit
        idx = idx[keep]
        g = ev.value[keep]
        f = g ** params.M
        slack = _power_perturbation(np.abs(g), tb, params.M)
        flip = (np.abs(np.abs(f) - escape_radius) <= slack) | ~np.isfinite(f)
        kind[idx[flip]] = UNSAFE
        step[idx[flip]] = it
        active[idx[flip]] = False
        z[idx[~flip]] = f[~flip]
    return kind, step
