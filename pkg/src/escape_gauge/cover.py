"""Inverse branches of ``f`` at its poles, chain diameters, and the two summation ledgers.

The components ``U_j`` of ``f^{-1}(B(R))`` are never constructed; they are
replaced by the disks ``D(a_j, |b_j|/(4R))`` (inner) and
``D(a_j, 2|b_j| R^{-1/M})`` (outer), so every estimate below stays one-sided.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, NoConvergence
from .growth import GrowthModel, log_q_prime, p_of, q_of
from .meromap import FunctionParams, PoleDatum, _ring_sum
from .towerscale import LogDepthMagnitude, GaugeSpec

__all__ = [
    "MassParams",
    "InverseBranch",
    "CoverChain",
    "inverse_branch",
    "branch_derivative",
    "koebe_margin",
    "sandwich_check",
    "chordal",
    "chordal_diameter",
    "chain_diameter",
    "chain_bound",
    "all_chain_diameters",
    "pullback",
    "anchor_preimages",
    "KeyBin",
    "KeyLedger",
    "key_series",
    "MassLevel",
    "MassLedger",
    "mass_sequence",
    "required_R0",
    "DensityReport",
    "annulus_delta",
    "annulus_density",
    "ledgers_to_json",
]

NEWTON_MAX_STEPS = 50
NEWTON_HALVINGS = 8
RESIDUAL_RTOL = 1e-9
POLISH_RTOL = 1e-13
CONTINUATION_NEWTON = 4
PULLBACK_STAGES = 2


@dataclass(frozen=True)
class MassParams:
    """Constants of the mass-distribution argument.

    ``lam`` and ``delta`` exist only qualitatively in the construction and
    are plain inputs here.  ``A`` defaults to ``32 * 2^(1+1/M) * 12``.
    """

    R0: float = 50.0
    lam: float = 0.5
    delta: float = 0.1
    M: int = 1
    A: float | None = None

    def __post_init__(self):
        if not self.R0 > 1:
            raise DomainError("R0 must exceed 1")
        if not (self.lam > 0 and self.delta > 0):
            raise DomainError("lambda and delta must be positive")
        if int(self.M) != self.M or self.M < 1:
            raise DomainError("M must be a positive integer")
        if self.A is None:
            object.__setattr__(self, "A", 32.0 * self.chain_factor)
        elif not self.A > 0:
            raise DomainError("A must be positive")

    @property
    def chain_factor(self) -> float:
        return 2.0 ** (1.0 + 1.0 / self.M) * 12.0

    @property
    def tau(self) -> float:
        return 0.5 + math.pi / 2.0

    @property
    def alpha(self) -> float:
        return 1.0 / (16.0 * (1.0 + self.delta) * 324.0 ** 2 * self.tau ** 2)

    @property
    def B(self) -> float:
        return self.alpha / (81.0 * 256.0)

    def log_R(self, l: int) -> float:
        """``log R_l`` with ``R_l = R0 exp(2^l)``."""
        return math.log(self.R0) + 2.0 ** l

    def R(self, l: int) -> LogDepthMagnitude:
        return LogDepthMagnitude.from_log(self.log_R(l))


# --- inverse branches ------------------------------------------------------------

@dataclass(frozen=True)
class InverseBranch:
    pole: PoleDatum
    root_branch: int = 0
    domain_radius_hint: float = 0.0
    center: complex | None = None

    def apply(self, params: FunctionParams, z, R0: float = 1.0):
        return inverse_branch(params, self.pole, z, self.root_branch, R0=R0, center=self.center)


def _mth_root(z: np.ndarray, M: int, root_branch: int, center: complex | None) -> np.ndarray:
    # principal root has its cut on the negative real axis; a center keeps a disk on one sheet
    omega = np.exp(2j * math.pi * root_branch / M)
    if M == 1:
        return z.astype(complex)
    if center is None:
        return np.power(z, 1.0 / M) * omega
    c = np.asarray(center, dtype=complex)
    return np.power(c, 1.0 / M) * np.power(z / c, 1.0 / M) * omega


def inverse_branch(
    params: FunctionParams,
    pole: PoleDatum,
    z,
    root_branch: int = 0,
    R0: float = 1.0,
    center=None,
    seed=None,
    fallback: bool = True,
):
    """Solve ``f(w) = z`` for ``w`` near ``pole``; ``z`` may be an array.

    ``center`` (scalar, or one per target) picks the sheet of the ``M``-th
    root: targets are rooted relative to it, so a small disk around it never
    straddles the cut.

    Seeds with ``w0 = a + b/zeta`` where ``zeta`` is the chosen ``M``-th root
    of ``z`` (or with ``seed`` when given), then runs damped Newton on
    ``1/g(w) - 1/zeta``.  Targets where that stalls are retried by
    continuation in from large ``|z|`` unless ``fallback`` is off.
    """
    M = params.M
    if not 0 <= root_branch < M:
        raise DomainError(f"root_branch must lie in [0, {M - 1}]")
    za = np.asarray(z, dtype=complex)
    flat = za.reshape(-1)
    if np.any(np.abs(flat) < R0 * (1 - 1e-12)):
        raise DomainError(f"inverse branches are taken on |z| >= R0={R0}")
    zeta = _mth_root(flat, M, root_branch, center)
    a, b = pole.location, pole.residue
    w = a + b / zeta if seed is None else np.array(seed, dtype=complex).reshape(-1)
    target = 1.0 / zeta
    done = np.zeros(flat.shape, dtype=bool)

    def resid(wv, zt, zf):
        ev = _ring_sum(params, wv, want_deriv=True)
        g = ev.value
        with np.errstate(all="ignore"):
            F = 1.0 / g - zt
            r = np.abs(g ** M - zf)
        r = np.where(ev.hit | ~np.isfinite(r), np.inf, r)
        return F, g, ev.deriv, r

    if np.any(np.abs(w) > params.safe_radius):
        raise DomainError("branch lies outside the certified evaluation disk; raise k_max")
    F, g, dg, r = resid(w, target, flat)
    for _ in range(NEWTON_MAX_STEPS):
        # iterate past the acceptance threshold; Newton stalls at roundoff on its own
        done = r <= POLISH_RTOL * np.abs(flat)
        if done.all():
            break
        idx = np.nonzero(~done)[0]
        with np.errstate(all="ignore"):
            step = -g[idx] * (1.0 - g[idx] * target[idx]) / dg[idx]
        lam = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        w_new = w[idx].copy()
        F_new, g_new, dg_new, r_new = F[idx], g[idx], dg[idx], r[idx]
        for _h in range(NEWTON_HALVINGS + 1):
            sel = np.nonzero(pending)[0]
            if sel.size == 0:
                break
            trial = w[idx[sel]] - lam[sel] * step[sel]
            Ft, gt, dgt, rt = resid(trial, target[idx[sel]], flat[idx[sel]])
            better = np.abs(Ft) < np.abs(F[idx[sel]])
            acc = sel[better]
            w_new[acc], F_new[acc], g_new[acc], dg_new[acc], r_new[acc] = (
                trial[better], Ft[better], gt[better], dgt[better], rt[better])
            pending[acc] = False
            lam[sel[~better]] *= 0.5
        if pending.all():
            break
        w[idx], F[idx], g[idx], dg[idx], r[idx] = w_new, F_new, g_new, dg_new, r_new
    done = r <= RESIDUAL_RTOL * np.abs(flat)
    if fallback and not done.all():
        # the Laurent seed is poor when |z| is small next to the regular part of g;
        # follow the branch in from large |z| instead, where the seed is accurate
        idx = np.nonzero(~done)[0]
        w[idx] = _continue_along_ray(params, a, b, zeta[idx])
        F[idx], g[idx], dg[idx], r[idx] = resid(w[idx], target[idx], flat[idx])
        done = r <= RESIDUAL_RTOL * np.abs(flat)
    if not done.all():
        worst = float(np.max(r / np.abs(flat)))
        raise NoConvergence(
            f"Newton did not reach residual {RESIDUAL_RTOL:g}|z| near pole ({pole.k},{pole.l}); worst {worst:.3g}"
        )
    out = w.reshape(za.shape)
    return complex(out) if np.ndim(z) == 0 else out


def _continue_along_ray(params: FunctionParams, a: complex, b: complex, zeta: np.ndarray,
                        start: float = 100.0, h0: float = 0.05, h_max: float = 0.5,
                        h_min: float = 1e-7) -> np.ndarray:
    """Track ``g(w) = s*zeta`` from ``s = start`` down to ``s = 1`` (predictor-corrector).

    Steps are taken in ``log s`` with a per-point length.  A step is kept
    only when Newton contracts and its correction is small next to the Euler
    prediction; otherwise the step is halved.  Points whose step falls below
    ``h_min`` (a path through a critical value) come back as NaN.
    """
    zeta = np.asarray(zeta, dtype=complex).reshape(-1)
    w = a + b / (start * zeta)
    log_s = np.full(zeta.shape, math.log(start))
    h = np.full(zeta.shape, h0)
    for _ in range(CONTINUATION_NEWTON):
        ev = _ring_sum(params, w, want_deriv=True)
        with np.errstate(all="ignore"):
            w = w - (ev.value - start * zeta) / ev.deriv
    failed = np.zeros(zeta.shape, dtype=bool)
    while True:
        act = np.nonzero((log_s > 0) & ~failed)[0]
        if act.size == 0:
            break
        ls_new = np.maximum(log_s[act] - h[act], 0.0)
        z_old = np.exp(log_s[act]) * zeta[act]
        z_new = np.exp(ls_new) * zeta[act]
        ev = _ring_sum(params, w[act], want_deriv=True)
        with np.errstate(all="ignore"):
            pred = (z_new - z_old) / ev.deriv
            wp = w[act] + pred
            prev = np.full(act.shape, np.inf)
            ok = np.ones(act.shape, dtype=bool)
            total = np.zeros(act.shape, dtype=complex)
            for _ in range(CONTINUATION_NEWTON):
                ev = _ring_sum(params, wp, want_deriv=True)
                step = -(ev.value - z_new) / ev.deriv
                size = np.abs(step)
                ok &= np.isfinite(size) & ~ev.hit & (size <= 0.5 * prev + 1e-14 * np.abs(wp))
                step = np.where(np.isfinite(step), step, 0.0)
                wp = wp + step
                total = total + step
                prev = size
            ok &= prev <= 1e-12 * np.abs(wp)
            ok &= np.abs(total) <= 0.25 * np.abs(pred) + 1e-12 * np.abs(wp)
        good, bad = act[ok], act[~ok]
        w[good] = wp[ok]
        log_s[good] = ls_new[ok]
        h[good] = np.minimum(h[good] * 1.5, h_max)
        h[bad] *= 0.5
        failed[bad] = h[bad] < h_min
    w[failed] = np.nan
    return w


def branch_derivative(params: FunctionParams, w) -> np.ndarray:
    """``g_j'(z) = 1/f'(w)`` at the preimage ``w = g_j(z)``."""
    ev = _ring_sum(params, np.asarray(w, dtype=complex), want_deriv=True)
    return 1.0 / (params.M * ev.value ** (params.M - 1) * ev.deriv)


def koebe_margin(params: FunctionParams, pole: PoleDatum, z, w) -> np.ndarray:
    """Relative slack ``1 - |g_j'(z)| |z|^{1+1/M} / (12 |b|)``."""
    d = np.abs(branch_derivative(params, w))
    bound = 12.0 * abs(pole.residue) / np.abs(np.asarray(z)) ** (1.0 + 1.0 / params.M)
    return 1.0 - d / bound


def sandwich_check(params: FunctionParams, pole: PoleDatum, R: float, samples: int = 256) -> dict:
    """``min |f|`` on the inner circle (should exceed ``R``) and ``max |f|`` on the outer circle (should not)."""
    theta = 2 * math.pi * np.arange(samples) / samples
    ring = np.exp(1j * theta)
    b = abs(pole.residue)
    r_in = b / (4.0 * R)
    r_out = 2.0 * b * R ** (-1.0 / params.M)
    f_in = np.abs(_ring_sum(params, pole.location + r_in * ring, False).value) ** params.M
    f_out = np.abs(_ring_sum(params, pole.location + r_out * ring, False).value) ** params.M
    return {
        "inner_radius": r_in,
        "outer_radius": r_out,
        "min_f_inner": float(f_in.min()),
        "max_f_outer": float(f_out.max()),
        "holds": bool(f_in.min() > R and f_out.max() < R),
    }


# --- chains -----------------------------------------------------------------------

def chordal(z, w) -> np.ndarray:
    """Chordal distance ``|z-w| / sqrt((1+|z|^2)(1+|w|^2))``; the sphere has diameter 1, so it never exceeds ``|z-w|``."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    return np.abs(z - w) / np.sqrt((1.0 + np.abs(z) ** 2) * (1.0 + np.abs(w) ** 2))


def chordal_diameter(points) -> float:
    p = np.asarray(points, dtype=complex).reshape(-1)
    return float(chordal(p[:, None], p[None, :]).max())


@dataclass(frozen=True)
class CoverChain:
    """Poles ``(j_1, ..., j_l)`` and the escape radii ``R_0, ..., R_{l-1}`` they must clear."""

    levels: tuple
    radii_schedule: tuple

    def __post_init__(self):
        if not self.levels:
            raise DomainError("a chain needs at least one pole")
        if len(self.radii_schedule) < len(self.levels):
            raise DomainError("radii schedule shorter than the chain")

    @property
    def length(self) -> int:
        return len(self.levels)

    def admissible(self) -> bool:
        return all(abs(p.location) >= R for p, R in zip(self.levels, self.radii_schedule))


def chain_bound(chain: CoverChain, M: int) -> float:
    """``(2^{1+1/M} 12)^{l-1} (32/R^{1/M}) prod |b|/|a|^{1+1/M}`` with ``R`` the first schedule radius."""
    R = chain.radii_schedule[0]
    L = 1.0 + 1.0 / M
    log_b = (chain.length - 1) * math.log(2.0 ** L * 12.0) + math.log(32.0) - math.log(R) / M
    for p in chain.levels:
        log_b += math.log(abs(p.residue)) - L * math.log(abs(p.location))
    return math.exp(log_b)


def anchor_preimages(params: FunctionParams, pole: PoleDatum, anchors, R: float, root_branch: int = 0) -> np.ndarray:
    """``g_j`` at each anchor, with the branch fixed by continuation in from ``|z| = infinity`` along its ray."""
    z = np.asarray(anchors, dtype=complex).reshape(-1)
    if np.any(np.abs(z) < R * (1 - 1e-12)):
        raise DomainError(f"inverse branches are taken on |z| >= R0={R}")
    zeta = _mth_root(z, params.M, root_branch, None)
    w = _continue_along_ray(params, pole.location, pole.residue, zeta)
    if np.any(~np.isfinite(w)):
        raise NoConvergence(f"continuation toward an anchor passed through a critical value near pole ({pole.k},{pole.l})")
    return np.asarray(inverse_branch(params, pole, z, root_branch, R0=R, seed=w, fallback=False)).reshape(-1)


def pullback(params: FunctionParams, pole: PoleDatum, pts, anchor: complex, anchor_w: complex, R: float,
             root_branch: int = 0, stages: int = PULLBACK_STAGES) -> np.ndarray:
    """Image of a small set around ``anchor`` under the branch of ``f^{-1}`` with ``g_j(anchor) = anchor_w``.

    Each point is reached along the straight segment from the anchor.  When
    ``R`` is small the inverse is not single-valued on ``|z| > R``, and
    solving every point on its own could mix sheets.
    """
    z = np.asarray(pts, dtype=complex).reshape(-1)
    anc = np.asarray(anchor, dtype=complex)
    w = np.broadcast_to(np.asarray(anchor_w, dtype=complex), z.shape).copy()
    for t in np.linspace(0.0, 1.0, stages + 1)[1:]:
        zt = anc + t * (z - anc)
        # root relative to the anchor so the sheet cannot change along the segment
        w = np.asarray(inverse_branch(params, pole, zt, root_branch, R0=R, center=anc, seed=w,
                                      fallback=False)).reshape(-1)
    return w


def chain_diameter(params: FunctionParams, chain: CoverChain, samples: int = 256) -> tuple[float, float]:
    """``(measured, bound)`` for the pullback of the terminal outer disk through the chain.

    The branch at level ``k`` is fixed at the next pole ``a_{j_{k+1}}``, the
    center of the outer disk that holds the set being pulled back.
    """
    if not chain.admissible():
        raise DomainError("chain is not admissible for its radius schedule")
    M = params.M
    last = chain.levels[-1]
    R_last = chain.radii_schedule[chain.length - 1]
    rad = 2.0 * abs(last.residue) * R_last ** (-1.0 / M)
    theta = 2 * math.pi * np.arange(samples) / samples
    pts = last.location + rad * np.exp(1j * theta)
    for depth in range(chain.length - 2, -1, -1):
        pole, R = chain.levels[depth], chain.radii_schedule[depth]
        anchor = chain.levels[depth + 1].location
        anchor_w = anchor_preimages(params, pole, [anchor], R)[0]
        pts = pullback(params, pole, pts, anchor, anchor_w, R)
    return chordal_diameter(pts), chain_bound(chain, M)


def all_chain_diameters(
    params: FunctionParams,
    poles: Sequence[PoleDatum],
    R: float,
    max_length: int = 3,
    samples: Sequence[int] = (256, 256, 64),
    block: int = 4096,
) -> list[tuple[tuple, float, float]]:
    """``(chain, measured, bound)`` for every chain of length ``<= max_length`` over ``poles``.

    Agrees with :func:`chain_diameter` chain by chain.  The schedule is
    constant (``R`` at every level), so the pullback of a chain's tail is
    shared by every chain ending in it and is computed once.  ``samples[l-1]``
    boundary points are used at length ``l``; deeper levels take an evenly
    strided subset of the shorter level's points.
    """
    if max_length < 1 or len(samples) < max_length:
        raise DomainError("need one sample count per chain length")
    if any(abs(p.location) < R for p in poles):
        raise DomainError("every pole must clear the schedule radius R")
    M = params.M
    out = []
    locs = np.array([p.location for p in poles])
    anchor_w = [anchor_preimages(params, pole, locs, R) for pole in poles] if max_length > 1 else []
    sets: dict[tuple, np.ndarray] = {}
    theta = 2 * math.pi * np.arange(samples[0]) / samples[0]
    for i, pole in enumerate(poles):
        rad = 2.0 * abs(pole.residue) * R ** (-1.0 / M)
        sets[(i,)] = pole.location + rad * np.exp(1j * theta)
        out.append(((i,), chordal_diameter(sets[(i,)]), chain_bound(CoverChain((pole,), (R,)), M)))
    for length in range(2, max_length + 1):
        stride = max(1, samples[length - 2] // samples[length - 1])
        tails = [key for key in sets if len(key) == length - 1]
        fresh = {}
        for i, pole in enumerate(poles):
            # tails sharing a head share the anchor, so they go through Newton together
            for head in range(len(poles)):
                group = [t for t in tails if t[0] == head]
                for lo in range(0, len(group), max(1, block // max(1, sets[group[0]][::stride].size))):
                    part = group[lo:lo + max(1, block // max(1, sets[group[0]][::stride].size))]
                    zs = np.concatenate([sets[t][::stride] for t in part])
                    ws = pullback(params, pole, zs, locs[head], anchor_w[i][head], R)
                    pos = 0
                    for t in part:
                        n = sets[t][::stride].size
                        fresh[(i,) + t] = ws[pos:pos + n]
                        pos += n
        for key, pts in fresh.items():
            chain = CoverChain(tuple(poles[j] for j in key), (R,) * length)
            out.append((key, chordal_diameter(pts), chain_bound(chain, M)))
        sets.update(fresh)
    return out


# --- key series ---------------------------------------------------------------------

@dataclass(frozen=True)
class KeyBin:
    l: int
    card: int
    S_l: float
    jensen_bound: float
    cum_sum: float
    sum_c: float
    c_bound: float
    complete: bool
    skipped: int

    @property
    def jensen_holds(self) -> bool:
        return self.S_l <= self.jensen_bound * (1 + 1e-12)

    @property
    def c_holds(self) -> bool:
        return self.sum_c <= self.c_bound


@dataclass(frozen=True)
class KeyLedger:
    gamma: float
    M: int
    R: float
    bins: tuple
    decay_factor: float | None
    skipped_leading: int

    def to_rows(self) -> list[dict]:
        return [
            {"l": b.l, "S_l": b.S_l, "jensen_bound": b.jensen_bound, "cum_sum": b.cum_sum,
             "card": b.card, "sum_c": b.sum_c, "c_bound": b.c_bound, "complete": b.complete}
            for b in self.bins
        ]


def _ring_block(model: GrowthModel, k_lo: int, k_hi: int):
    ks = np.arange(k_lo, k_hi, dtype=np.int64)
    v = ks.astype(float)
    quotient = model.rho * v
    for _ in range(model.n):
        v = np.log(v)
        quotient = quotient * v
    ps = v ** (1.0 / model.rho)
    ns = np.floor(quotient)
    return ks, ps, ns


def _log_h_array(gauge: GaugeSpec, log_t: np.ndarray) -> np.ndarray:
    # log h(t) = 2 log t + gamma log(log^n(1/t)); caller guarantees t <= delta_n
    y = -log_t
    for _ in range(gauge.n - 1):
        y = np.log(y)
    return 2.0 * log_t + gauge.gamma * np.log(np.log(y))


def key_series(
    params: FunctionParams,
    gauge: GaugeSpec,
    l_max: int = 3,
    j_max: int | None = None,
    R: float = 1.0,
    max_rings: int = 20_000_000,
    block: int = 1_000_000,
) -> KeyLedger:
    """Per-bin sums ``S_l`` of ``h(|b_j|/|a_j|^{1+1/M})`` over ``P_l = {2^l < |a_j| <= 2^{l+1}}``.

    Every pole on a ring shares ``|a|`` and ``|b|``, so each ring enters with
    weight ``2 n_k``.  ``j_max`` truncates after that many poles and marks the
    affected bin incomplete.  Leading poles whose summand exceeds ``delta_n``
    are skipped and counted.
    """
    model = params.model
    if gauge.n != model.n:
        raise DomainError(f"gauge depth n={gauge.n} differs from growth depth n={model.n}")
    M = params.M
    L = 1.0 + 1.0 / M
    log_delta = -float(gauge.log_inv_delta.mantissa) if gauge.log_inv_delta.depth == 0 else -math.inf
    if log_delta == -math.inf:
        raise DomainError("delta_n underflows; the key series is out of reach")
    p_first = p_of(model, model.k0 + 1)
    l_min = max(0, math.floor(math.log2(p_first)))
    edges = [2.0 ** l for l in range(l_min, l_max + 2)]
    if model.rho * math.log(edges[-1]) > 700:
        raise DomainError(f"bin edge 2^{l_max + 1} needs more rings than fit in a double")
    try:
        k_end = math.floor(float(q_of(model, edges[-1])))
    except OverflowError:
        k_end = None
    if k_end is None or k_end - model.k0 > max_rings:
        raise DomainError(f"bins up to l={l_max} need more than {max_rings} rings")
    nb = len(edges) - 1
    S = np.zeros(nb)
    card = np.zeros(nb, dtype=np.int64)
    sum_c = np.zeros(nb)
    skipped = np.zeros(nb, dtype=np.int64)
    seen = 0
    stop_bin = nb
    edge_arr = np.array(edges)
    for lo in range(model.k0 + 1, k_end + 1, block):
        hi = min(k_end + 1, lo + block)
        ks, ps, ns = _ring_block(model, lo, hi)
        bin_idx = np.searchsorted(edge_arr, ps, side="left") - 1
        mult = 2 * ns
        if j_max is not None:
            before = seen + np.cumsum(mult) - mult
            mult = np.clip(j_max - before, 0, mult)
            short = np.nonzero(mult < 2 * ns)[0]
            if short.size:
                stop_bin = min(stop_bin, int(bin_idx[short[0]]))
        seen += int(mult.sum())
        inside = (bin_idx >= 0) & (bin_idx < nb) & (mult > 0)
        log_t = np.log(ps) * (-1.0 / M) - np.log(ns)  # log(|b|/|a|^L) = log(p^{-1/M}/n)
        ok = inside & (log_t <= log_delta)
        bad = inside & ~(log_t <= log_delta)
        np.add.at(skipped, bin_idx[bad], mult[bad].astype(np.int64))
        if ok.any():
            lh = _log_h_array(gauge, log_t[ok])
            np.add.at(S, bin_idx[ok], mult[ok] * np.exp(lh))
            np.add.at(card, bin_idx[ok], mult[ok].astype(np.int64))
            np.add.at(sum_c, bin_idx[ok], mult[ok] * np.exp(2.0 * log_t[ok]))
        if stop_bin < nb:
            break
    bins = []
    cum = 0.0
    for i in range(nb):
        l = l_min + i
        cum += S[i]
        if card[i] > 0:
            mean = sum_c[i] / card[i]
            # Jensen with the concave G(t) = h(sqrt t)
            jb = card[i] * float(math.exp(_log_h_array(gauge, np.array([0.5 * math.log(mean)]))[0]))
        else:
            jb = 0.0
        c_bound = 144.0 * R * R * 2.0 ** (-2.0 * l / M)
        bins.append(KeyBin(l, int(card[i]), float(S[i]), jb, cum, float(sum_c[i]), c_bound,
                           complete=i < stop_bin, skipped=int(skipped[i])))
    usable = [b.S_l for b in bins if b.complete and b.S_l > 0]
    factor = None
    if len(usable) >= 2:
        slope = np.polyfit(np.arange(len(usable)), np.log(usable), 1)[0]
        factor = float(math.exp(slope))
    return KeyLedger(gauge.gamma, M, R, tuple(bins), factor, int(skipped.sum()))


# --- mass sequence --------------------------------------------------------------------

@dataclass(frozen=True)
class MassLevel:
    l: int
    log_inv_d: LogDepthMagnitude
    log_delta: float
    log_product: float
    asymptotic_ratio_log: float


@dataclass(frozen=True)
class MassLedger:
    gamma: float
    rho: float
    M: int
    levels: tuple
    exponent: float  # rho*gamma - 8/M

    def increments(self) -> np.ndarray:
        v = np.array([lv.log_product for lv in self.levels])
        return np.diff(v)

    def strictly_increasing(self, l_lo: int, l_hi: int) -> bool:
        v = [lv.log_product for lv in self.levels if l_lo <= lv.l <= l_hi]
        return len(v) >= 2 and all(b > a for a, b in zip(v, v[1:]))

    def strictly_decreasing(self, l_lo: int, l_hi: int) -> bool:
        v = [lv.log_product for lv in self.levels if l_lo <= lv.l <= l_hi]
        return len(v) >= 2 and all(b < a for a, b in zip(v, v[1:]))

    def trend_onset(self) -> int | None:
        """First level from which every increment has the sign of ``rho*gamma - 8/M``."""
        s = np.sign(self.exponent)
        if s == 0:
            return None
        inc = self.increments()
        ls = [lv.l for lv in self.levels][1:]
        for i in range(len(inc)):
            if np.all(np.sign(inc[i:]) == s):
                return ls[i]
        return None

    def to_rows(self) -> list[dict]:
        return [
            {"l": lv.l, "log_inv_d_l": {"depth": lv.log_inv_d.depth, "mantissa": lv.log_inv_d.mantissa},
             "log_delta_l": lv.log_delta, "log_product": lv.log_product,
             "asymptotic_ratio_log": lv.asymptotic_ratio_log}
            for lv in self.levels
        ]


def _log_inv_d_increment(model: GrowthModel, mass: MassParams, k: int) -> LogDepthMagnitude:
    # log q'(R_{k-1}) + (1+1/M) log R_{k-1} - log A
    log_r = mass.log_R(k - 1)
    r = LogDepthMagnitude.from_log(log_r)
    return log_q_prime(model, r) + ((1.0 + 1.0 / mass.M) * log_r - math.log(mass.A))


def required_R0(model: GrowthModel, gauge: GaugeSpec, mass: MassParams) -> float:
    """Smallest ``R0`` (on a doubling grid then bisection) with ``d_1 <= delta_n``."""
    need = gauge.log_inv_delta

    def ok(r0):
        m = MassParams(r0, mass.lam, mass.delta, mass.M, mass.A)
        return not (_log_inv_d_increment(model, m, 1) < need)

    hi = max(mass.R0, 2.0)
    while not ok(hi):
        hi *= 2.0
    lo = 1.0 + 1e-9
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


def mass_sequence(model: GrowthModel, gauge: GaugeSpec, mass: MassParams, L: int = 12) -> MassLedger:
    """Levels ``1..L`` of ``log(1/d_l)``, ``log Delta_l`` and ``log(g(d_l) prod Delta_k)``.

    Everything stays in logarithms or tower form; ``q'(R_l)`` is never formed.
    """
    if gauge.n != model.n:
        raise DomainError(f"gauge depth n={gauge.n} differs from growth depth n={model.n}")
    if L < 1 or L > 40:
        raise DomainError("L must lie in [1, 40] so that 2^L stays exact in log space")
    log_inv_d = LogDepthMagnitude.of(0.0)
    sum_log_delta = 0.0
    levels = []
    for l in range(1, L + 1):
        log_inv_d = log_inv_d + _log_inv_d_increment(model, mass, l)
        if l == 1 and log_inv_d < gauge.log_inv_delta:
            raise DomainError(
                f"d_1 exceeds delta_n for R0={mass.R0}; need R0 >= {required_R0(model, gauge, mass):.6g}"
            )
        log_delta = math.log(mass.B) - (2.0 / mass.M) * mass.log_R(l)
        sum_log_delta += log_delta
        # log g(d_l) = gamma * log(log^n(1/d_l)) = gamma * log^{n+1}(1/d_l) read from log(1/d_l)
        w = log_inv_d
        for _ in range(model.n):
            w = w.log()
        lll = float(w)
        log_g = gauge.gamma * lll
        ratio_log = lll - model.rho * mass.log_R(l - 1)
        levels.append(MassLevel(l, log_inv_d, log_delta, log_g + sum_log_delta, ratio_log))
    return MassLedger(gauge.gamma, model.rho, mass.M, tuple(levels), model.rho * gauge.gamma - 8.0 / mass.M)


# --- annulus density ---------------------------------------------------------------------

def annulus_delta(eps: float) -> float:
    """``delta`` with ``1 + delta = area A(S) / area A_eps(S)``; independent of ``S``."""
    if not 0 < eps < 0.25:
        raise DomainError("eps must lie in (0, 1/4)")
    return 3.0 / (4.0 * (1.0 - eps) ** 2 - (1.0 + eps) ** 2) - 1.0


@dataclass(frozen=True)
class DensityReport:
    S: float
    eps: float
    delta: float
    R: float
    euclidean: float
    lower_bound: float
    rings: tuple
    sum_b2: float
    sum_b2_bound: float

    @property
    def holds(self) -> bool:
        return self.euclidean >= self.lower_bound

    @property
    def b2_holds(self) -> bool:
        return self.sum_b2 <= self.sum_b2_bound


def annulus_density(params: FunctionParams, S: float, eps: float, R: float, tau: float | None = None) -> DensityReport:
    """Density of the inner disks ``D(a_j, |b_j|/(4 R^{1/M}))`` with ``a_j`` in ``A_eps(S)`` inside ``A(S)``."""
    model = params.model
    M = params.M
    tau = 0.5 + math.pi / 2.0 if tau is None else tau
    delta = annulus_delta(eps)
    ks, ps, ns = params.rings
    if ps[-1] < 2 * S:
        raise DomainError("k_max too small to cover the annulus A(S)")
    inner = (ps > (1 + eps) * S) & (ps < (1 - eps) * 2 * S)
    if not inner.any():
        raise DomainError(f"no pole ring meets A_eps(S) for S={S}")
    b2 = (ps / ns) ** 2
    disk_area = math.pi * float(np.sum(2 * ns[inner] * b2[inner])) / (16.0 * R ** (2.0 / M))
    euclid = disk_area / (3.0 * math.pi * S * S)
    lower = 1.0 / (16.0 * (1.0 + delta) * tau ** 2 * R ** (2.0 / M))
    r = 2.0 * S
    upto = ps <= r
    sum_b2 = float(np.sum(2 * ns[upto] * b2[upto]))
    return DensityReport(S, eps, delta, R, euclid, lower, tuple(int(k) for k in ks[inner]),
                         sum_b2, 36.0 * R * R * r * r)


def ledgers_to_json(key: KeyLedger | None, mass: MassLedger | None) -> str:
    doc = {}
    if key is not None:
        doc["key_series"] = key.to_rows()
    if mass is not None:
        doc["mass_sequence"] = mass.to_rows()
    return json.dumps(doc, indent=2, sort_keys=True)
