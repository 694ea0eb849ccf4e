"""Command-line front end: ``escape-gauge <command> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import counting, cover, growth, meromap, towerscale
from .errors import EscapeGaugeError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA = 1
EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2


@dataclass(frozen=True)
class Scenario:
    n: int = 1
    rho: float = 1.0
    M: int = 1
    gamma: float = 1.0
    k_max: int | None = None
    tail_policy: float = 1e-12
    R0: float = 50.0
    lam: float = 0.5
    delta: float = 0.1
    seed: int = 0

    @property
    def thresholds(self) -> dict:
        return {"zero_measure_below": 2.0 / (self.M * self.rho), "infinite_measure_above": 8.0 / (self.M * self.rho)}

    @property
    def gamma_position(self) -> str:
        t = self.thresholds
        if self.gamma < t["zero_measure_below"]:
            return "below 2/(M*rho)"
        if self.gamma > t["infinite_measure_above"]:
            return "above 8/(M*rho)"
        return "between thresholds"

    def model(self) -> growth.GrowthModel:
        return growth.GrowthModel(self.rho, self.n)

    def gauge(self, gamma: float | None = None) -> towerscale.GaugeSpec:
        return towerscale.GaugeSpec(self.n, self.gamma if gamma is None else gamma)

    def mass(self) -> cover.MassParams:
        return cover.MassParams(self.R0, self.lam, self.delta, self.M)

    def function(self, z_radius: float = 0.0) -> meromap.FunctionParams:
        model = self.model()
        k = self.k_max or meromap.choose_k_max(model, self.tail_policy, z_radius)
        return meromap.FunctionParams(model, self.M, k, self.tail_policy)


_FLAG_MAP = {"n": "n", "rho": "rho", "M": "M", "gamma": "gamma", "kmax": "k_max",
             "tail": "tail_policy", "R0": "R0", "lam": "lam", "delta": "delta", "seed": "seed"}


def load_config(path: str) -> dict:
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix.lower() == ".json":
        data = json.loads(raw)
    else:
        data = tomllib.loads(raw.decode())
    data = data.get("scenario", data)
    known = {f.name for f in fields(Scenario)}
    alias = {"kmax": "k_max", "tail": "tail_policy", "lambda": "lam"}
    out = {}
    for key, value in data.items():
        key = alias.get(key, key)
        if key not in known:
            raise ValueError(f"unknown scenario key {key!r} in {path}")
        out[key] = value
    return out


def scenario_from_args(args) -> Scenario:
    base = load_config(args.config) if args.config else {}
    sc = Scenario(**base)
    over = {}
    for flag, name in _FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is not None:
            over[name] = v
    return replace(sc, **over)


def content_hash(payload: dict) -> str:
    """Git blob hash of the canonical JSON encoding of the inputs."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, towerscale.LogDepthMagnitude):
        return {"depth": obj.depth, "mantissa": obj.mantissa}
    return obj


def header(command: str, sc: Scenario, extra: dict | None = None) -> dict:
    inputs = {"command": command, "scenario": asdict(sc), "options": extra or {}}
    return {
        "schema": SCHEMA,
        "command": command,
        "scenario": asdict(sc),
        "options": extra or {},
        "thresholds": sc.thresholds,
        "gamma_position": sc.gamma_position,
        "input_hash": content_hash(_clean(inputs)),
    }


def dump_json(doc: dict) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- commands ------------------------------------------------------------------

def cmd_verify_lemmas(sc: Scenario, args) -> tuple[dict, bool]:
    failures = []
    gauge_rows = []
    for n in sorted({1, 2, 3} | {sc.n}):
        for gamma in sorted({0.5, 1.0, 2.0} | {sc.gamma}):
            res = towerscale.random_lemma_suite(n, gamma, count=args.count, seed=sc.seed)
            row = {"n": n, "gamma": gamma, **res}
            gauge_rows.append(row)
            tol = -towerscale.ROUNDOFF_TOL
            for key in ("min_scaling_margin", "min_superadditivity_margin", "min_product_log_margin"):
                if res[key] < tol:
                    failures.append(f"{key} at n={n} gamma={gamma}: {res[key]!r}")
            if res["min_concavity_margin"] < 0:
                failures.append(f"concavity margin at n={n} gamma={gamma}: {res['min_concavity_margin']!r}")
    growth_rows = []
    for n in (1, 2):
        for rho in (0.5, 1.0, 2.0):
            model = growth.GrowthModel(rho, n)
            ks = np.arange(model.k0 + 1, model.k0 + 201)
            grid = growth.separation_grid(model, ks, ks)
            row = {"n": n, "rho": rho, "k0": model.k0, "min_separation_margin": float(np.nanmin(grid))}
            if n == 1:
                ts = list(np.geomspace(model.k0 + 1, 1e12, 60))
                row["pm_threshold"] = growth.pm_threshold(model, ts)
                row["p_prime_nonincreasing_from"] = growth.p_prime_monotone_threshold(model, ts)
                row["sum_nk_ratio_l500"] = growth.partial_sum_nk(model, 500)[2]
            growth_rows.append(row)
            if row["min_separation_margin"] < -towerscale.ROUNDOFF_TOL:
                failures.append(f"separation margin at n={n} rho={rho}")
    model = sc.model()
    report = {
        "gauge_lemmas": gauge_rows,
        "growth_lemmas": growth_rows,
        "scenario_model": {"k0": str(model.k0), "first_nk_at_least_k": growth.first_nk_at_least_k(model)
                           if model.n <= 2 else None},
        "failures": failures,
    }
    return report, not failures


def cmd_poles(sc: Scenario, args) -> str:
    model = sc.model()
    # the table lists rings up to --kmax; evaluation parameters keep their own truncation
    k_max = sc.k_max or model.k0 + 10
    fp = replace(sc, k_max=None).function()
    return meromap.poles_to_csv(meromap.poles_up_to(fp, k_max))


def cmd_web(sc: Scenario, args) -> tuple[dict, bool]:
    model = sc.model()
    lo = args.m_lo or model.k0 + 2
    hi = args.m_hi or model.k0 + 8
    fp = sc.function(growth.p_of(model, hi + 1.5))
    if fp.k_max < hi + 1:
        fp = replace(fp, k_max=hi + 1)
    rep = meromap.web_sup(fp, meromap.WebSpec((lo, hi), args.circle, args.segment))
    ok = rep.holds
    return {
        "sup_sampled": rep.sup_sampled,
        "bound_4C_plus_4": rep.theoretical_bound,
        "C": rep.C,
        "c": rep.c,
        "tail_allowance": rep.tail_allowance,
        "samples": rep.samples,
        "argmax": rep.argmax,
        "per_ring_sup": [{"m": m, "sup": s} for m, s in rep.per_ring_sup],
        "k_max": fp.k_max,
        "failures": [] if ok else ["sampled sup exceeds 4C+4"],
    }, ok


def _threads() -> int:
    raw = os.environ.get("ESCAPE_GAUGE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def escape_grid(fp: meromap.FunctionParams, re_min, re_max, im_min, im_max, px: int, radius: float, max_iter: int):
    """``(steps, kinds, xs, ys)``; rows run from ``im_max`` down to ``im_min``."""
    width = px
    height = max(1, int(round(px * (im_max - im_min) / (re_max - re_min))))
    xs = re_min + (np.arange(width) + 0.5) * (re_max - re_min) / width
    ys = im_max - (np.arange(height) + 0.5) * (im_max - im_min) / height

    def row_block(rows):
        zz = xs[None, :] + 1j * ys[rows][:, None]
        return meromap.orbit_many(fp, zz, radius, max_iter)

    blocks = np.array_split(np.arange(height), min(height, 4 * _threads()))
    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        parts = list(ex.map(row_block, blocks))
    kind = np.concatenate([k for k, _ in parts]).reshape(height, width)
    step = np.concatenate([s for _, s in parts]).reshape(height, width)
    return step, kind, xs, ys


def raster(step: np.ndarray, kind: np.ndarray) -> np.ndarray:
    """Escape step clipped to 255; poles escape one step later; non-escaping cells are 255."""
    val = np.full(step.shape, 255, dtype=np.int64)
    esc = kind == meromap.ESCAPED
    pole = kind == meromap.HIT_POLE
    val[esc] = np.minimum(step[esc], 255)
    val[pole] = np.minimum(step[pole] + 1, 255)
    return val


def to_pgm(img: np.ndarray, comment: str) -> str:
    h, w = img.shape
    lines = ["P2", f"# {comment}", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in img]
    return "\n".join(lines) + "\n"


def to_grid_csv(img, kind, xs, ys) -> str:
    names = {meromap.ESCAPED: "escaped", meromap.BOUNDED: "bounded_after",
             meromap.HIT_POLE: "hit_pole", meromap.UNSAFE: "truncation_unsafe"}
    rows = ["re,im,value,status"]
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            rows.append(f"{float(x)!r},{float(y)!r},{int(img[i, j])},{names[int(kind[i, j])]}")
    return "\n".join(rows) + "\n"


def cmd_grid(sc: Scenario, args) -> tuple[str, str, dict]:
    model = sc.model()
    corners = [complex(args.re_min, args.im_min), complex(args.re_max, args.im_max),
               complex(args.re_min, args.im_max), complex(args.re_max, args.im_min)]
    zr = max(abs(c) for c in corners)
    fp = sc.function(zr)
    radius = args.escape_radius or fp.safe_radius
    step, kind, xs, ys = escape_grid(fp, args.re_min, args.re_max, args.im_min, args.im_max,
                                     args.px, radius, args.max_iter)
    img = raster(step, kind)
    meta = {"k_max": fp.k_max, "escape_radius": radius, "width": len(xs), "height": len(ys)}
    comment = f"escape-gauge n={sc.n} rho={sc.rho} M={sc.M} k_max={fp.k_max} radius={float(radius)!r}"
    return to_pgm(img, comment), to_grid_csv(img, kind, xs, ys), meta


def _trend(ledger: cover.MassLedger) -> dict:
    inc = ledger.increments()
    return {
        "gamma": ledger.gamma,
        "exponent_rho_gamma_minus_8_over_M": ledger.exponent,
        "late_increment": float(inc[-1]),
        "eventually_increasing": bool(inc[-1] > 0),
        "trend_onset_level": ledger.trend_onset(),
    }


def cmd_sums(sc: Scenario, args) -> tuple[dict, bool]:
    model = sc.model()
    failures = []
    out = {}
    if model.n == 1 and sc.rho == 1.0 or args.key_bins:
        fp = sc.function(2.0)
        try:
            key = cover.key_series(fp, sc.gauge(), l_max=args.key_bins or 3, j_max=args.j_max, R=args.R)
            out["key_series"] = key.to_rows()
            out["key_decay_factor"] = key.decay_factor
            out["key_skipped_leading"] = key.skipped_leading
            for b in key.bins:
                if not b.jensen_holds:
                    failures.append(f"Jensen bound fails at bin {b.l}")
                if not b.c_holds:
                    failures.append(f"c_j bin bound fails at bin {b.l}")
        except EscapeGaugeError as exc:
            out["key_series_error"] = str(exc)
    mass = cover.mass_sequence(model, sc.gauge(), sc.mass(), L=args.levels)
    out["mass_sequence"] = mass.to_rows()
    out["mass_trend"] = _trend(mass)
    sweep = []
    for factor in args.sweep or ():
        gamma = factor / (sc.M * sc.rho)
        try:
            led = cover.mass_sequence(model, sc.gauge(gamma), sc.mass(), L=args.levels)
            sweep.append({"factor": factor, **_trend(led)})
        except EscapeGaugeError as exc:
            sweep.append({"factor": factor, "gamma": gamma, "error": str(exc)})
    if sweep:
        out["gamma_sweep"] = sweep
        flips = [s for s in sweep if "error" not in s]
        consistent = all(s["eventually_increasing"] == (s["exponent_rho_gamma_minus_8_over_M"] > 0) for s in flips)
        out["sweep_consistent_with_sign"] = consistent
        if not consistent:
            failures.append("late-level trend disagrees with the sign of rho*gamma - 8/M")
    out["failures"] = failures
    return out, not failures


def cmd_count(sc: Scenario, args) -> tuple[str, dict]:
    model = sc.model()
    radii = args.radii or counting.ring_midpoints(model, [3.0, 6.0, 8.0, 10.0, 12.0, 14.0])
    rows = counting.count_reports(model, radii)
    samples = counting.order_samples(model, args.k_lo, args.k_hi, args.samples)
    est = counting.order_estimate(model, samples)
    summary = {
        "order_estimate": est,
        "order_samples": samples,
        "rows": [asdict(r) for r in rows],
    }
    return counting.reports_to_csv(rows), summary


# --- argument parsing ------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML or JSON scenario file")
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--M", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--kmax", type=int)
    p.add_argument("--tail", type=float)
    p.add_argument("--R0", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=("json", "csv", "pgm"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escape-gauge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-lemmas", help="gauge and growth inequality suites (JSON)")
    _add_common(p)
    p.add_argument("--count", type=int, default=10_000)

    p = sub.add_parser("poles", help="pole/residue table (CSV)")
    _add_common(p)

    p = sub.add_parser("web", help="sampled sup of |g| on the spider's web (JSON)")
    _add_common(p)
    p.add_argument("--m-lo", type=int)
    p.add_argument("--m-hi", type=int)
    p.add_argument("--circle", type=int, default=1024)
    p.add_argument("--segment", type=int, default=32)

    p = sub.add_parser("grid", help="escape-step raster (PGM and CSV)")
    _add_common(p)
    p.add_argument("--re-min", type=float, required=True)
    p.add_argument("--re-max", type=float, required=True)
    p.add_argument("--im-min", type=float, required=True)
    p.add_argument("--im-max", type=float, required=True)
    p.add_argument("--px", type=int, default=200)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--escape-radius", type=float)
    p.add_argument("--csv", metavar="PATH", help="also write the per-cell CSV here")

    p = sub.add_parser("sums", help="key-series and mass-sequence ledgers (JSON)")
    _add_common(p)
    p.add_argument("--levels", type=int, default=12)
    p.add_argument("--key-bins", type=int)
    p.add_argument("--j-max", type=int)
    p.add_argument("--R", type=float, default=1.0, help="radius in the c_j bin bound 144 R^2 2^(-2l/M)")
    p.add_argument("--sweep", type=float, nargs="*", help="gamma values in units of 1/(M*rho)")

    p = sub.add_parser("count", help="pole counts and order estimate (CSV + JSON)")
    _add_common(p)
    p.add_argument("--radii", type=float, nargs="*")
    p.add_argument("--k-lo", type=float, default=1e4)
    p.add_argument("--k-hi", type=float, default=1e6)
    p.add_argument("--samples", type=int, default=8)
    return parser


def _options(args) -> dict:
    skip = set(_FLAG_MAP) | {"config", "out", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = scenario_from_args(args)
        head = header(args.command, sc, _options(args))
        if args.command == "verify-lemmas":
            body, ok = cmd_verify_lemmas(sc, args)
            _emit(dump_json({**head, **body}), args.out)
            return EXIT_OK if ok else EXIT_FAILED
        if args.command == "poles":
            _emit(cmd_poles(sc, args), args.out)
            return EXIT_OK
        if args.command == "web":
            body, ok = cmd_web(sc, args)
            _emit(dump_json({**head, **body}), args.out)
            return EXIT_OK if ok else EXIT_FAILED
        if args.command == "grid":
            pgm, grid_csv, meta = cmd_grid(sc, args)
            if args.format == "csv":
                _emit(grid_csv, args.out)
            else:
                _emit(pgm, args.out)
                if args.csv:
                    Path(args.csv).write_text(grid_csv)
            sys.stderr.write(dump_json({**head, **meta}))
            return EXIT_OK
        if args.command == "sums":
            body, ok = cmd_sums(sc, args)
            _emit(dump_json({**head, **body}), args.out)
            return EXIT_OK if ok else EXIT_FAILED
        if args.command == "count":
            text, summary = cmd_count(sc, args)
            if args.format == "json":
                _emit(dump_json({**head, **summary}), args.out)
            else:
                _emit(text, args.out)
                (sys.stdout if args.out else sys.stderr).write(dump_json({**head, **summary}))
            return EXIT_OK
    except (EscapeGaugeError, ValueError, OSError) as exc:
        sys.stderr.write(dump_json({"schema": SCHEMA, "command": args.command, "error": type(exc).__name__,
                                    "message": str(exc), "failures": [str(exc)]}))
        return EXIT_ERROR
    return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
