"""Adaptive Simpson quadrature and log-space accumulation helpers."""

from __future__ import annotations

import math
from typing import Callable

from .errors import NoConvergence


def _simpson(fa, fm, fb, a, b):
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def adaptive_simpson(
    f: Callable[[float], float],
    a: float,
    b: float,
    rel_tol: float = 1e-6,
    max_depth: int = 48,
) -> float:
    """Integrate ``f`` over ``[a, b]`` by recursive Simpson bisection.

    The absolute tolerance is ``rel_tol`` times a coarse estimate of the
    whole integral, so the error control follows the running magnitude.
    """
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = _simpson(fa, fm, fb, a, b)
    # probe a few interior points so an unlucky symmetric start cannot fool the scale
    probe = max(abs(whole), abs(b - a) * max(abs(f(a + (b - a) * s)) for s in (0.1, 0.3, 0.7, 0.9)) * 1e-3)
    tol = rel_tol * probe if probe > 0 else rel_tol

    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    total = 0.0
    comp = 0.0
    while stack:
        lo, hi, flo, fmid, fhi, est, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = _simpson(flo, flm, fmid, lo, mid)
        right = _simpson(fmid, frm, fhi, mid, hi)
        delta = left + right - est
        if abs(delta) <= 15.0 * eps or depth >= max_depth:
            if depth >= max_depth and abs(delta) > 15.0 * eps:
                raise NoConvergence(f"adaptive Simpson hit depth {max_depth} on [{lo}, {hi}]")
            # Kahan-compensated accumulation of the Richardson-corrected panel
            y = left + right + delta / 15.0 - comp
            t = total + y
            comp = (t - total) - y
            total = t
        else:
            stack.append((mid, hi, fmid, frm, fhi, right, 0.5 * eps, depth + 1))
            stack.append((lo, mid, flo, flm, fmid, left, 0.5 * eps, depth + 1))
    return total


def logsumexp(values) -> float:
    """``log(sum(exp(v)))`` without overflow."""
    vals = [float(v) for v in values]
    if not vals:
        return -math.inf
    top = max(vals)
    if top == -math.inf:
        return top
    return top + math.log(math.fsum(math.exp(v - top) for v in vals))
