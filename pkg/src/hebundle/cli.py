"""Command-line orchestration: config-driven experiments with JSON
reports and CSV traces.

Subcommands cover kernel audits, energy evaluation, the exact sheaf
invariants, ray slope tests, the minimizer, the lower-bound audit, the
level-uniformity probe, and a convexity audit.  Reports are
deterministic for a fixed (config, seed): floats are printed with 17
significant digits and exact rationals as "p/q" strings; wall-clock
time lives in a sidecar meta file so the main report is byte-stable.
Exit codes: 0 on success, 2 on audit failure, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import BundleSpec, regularity, trivial_metric
from .geometry import build_quadrature, sphere_point
from .quot import WeightSpec, block_weightspec, report_to_json, _frac_str
from .sections import FSMetric, basis, bergman_kernel, l2_gram


class ConfigError(ValueError):
    pass


_COMMANDS = (
    "bergman",
    "mdon",
    "mna",
    "slope-test",
    "solve",
    "audit-deltabound",
    "probe-coercivity",
    "convexity-audit",
)

_TOP_KEYS = {
    "bundle",
    "k",
    "k_list",
    "quadrature",
    "seed",
    "output_dir",
    "zeta",
    "solve",
    "delta_audit",
    "probe",
    "slope",
    "convexity",
    "bergman",
}


def _expect(cond, msg):
    if not cond:
        raise ConfigError(msg)


def parse_config(path) -> dict:
    """Load and validate a config file; unknown keys are rejected."""
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    _expect(isinstance(cfg, dict), "config root must be an object")
    unknown = set(cfg) - _TOP_KEYS
    _expect(not unknown, f"unknown config keys: {sorted(unknown)}")
    _expect("bundle" in cfg, "missing required field: bundle")
    b = cfg["bundle"]
    _expect(
        isinstance(b, list) and b and all(isinstance(x, int) for x in b),
        "bundle must be a nonempty list of integers",
    )
    spec = BundleSpec(tuple(b))
    if "k" in cfg:
        _expect(isinstance(cfg["k"], int), "k must be an integer")
        _expect(
            cfg["k"] >= regularity(spec),
            f"k={cfg['k']} is below the minimum level {regularity(spec)} "
            f"for bundle {b}",
        )
    q = cfg.get("quadrature", {"n_colat": 32, "n_angle": 32})
    _expect(
        isinstance(q, dict) and set(q) <= {"n_colat", "n_angle"},
        "quadrature must be {n_colat, n_angle}",
    )
    cfg["quadrature"] = {
        "n_colat": int(q.get("n_colat", 32)),
        "n_angle": int(q.get("n_angle", 32)),
    }
    if "seed" in cfg:
        _expect(isinstance(cfg["seed"], int), "seed must be an integer")
    return cfg


def _zeta_from_config(cfg, sb) -> WeightSpec:
    z = cfg.get("zeta")
    _expect(z is not None, "this command needs a zeta block")
    if "blocks" in z:
        from .quot import weightspec_from_json

        return weightspec_from_json(z)
    _expect(
        set(z) <= {"weights", "dims"} and "weights" in z and "dims" in z,
        "zeta must be {weights, dims} or a full {k, blocks} object",
    )
    ws = [Fraction(w) for w in z["weights"]]
    dims = [int(d) for d in z["dims"]]
    _expect(len(ws) == len(dims), "zeta weights and dims must have equal length")
    return block_weightspec(sb, list(zip(ws, dims)))


def _fmt(x):
    """Deterministic JSON-friendly conversion."""
    if isinstance(x, dict):
        return {k: _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    if isinstance(x, Fraction):
        return _frac_str(x)
    if isinstance(x, (np.floating, float)):
        return float(f"{float(x):.17g}")
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_fmt(v) for v in x.tolist()]
    if isinstance(x, complex):
        return {"re": _fmt(x.real), "im": _fmt(x.imag)}
    return x


def _write_report(outdir: Path, command, cfg, results, t0, exit_code):
    outdir.mkdir(parents=True, exist_ok=True)
    report = {
        "command": command,
        "config": cfg,
        "results": _fmt(results),
        "versions": {"package": __version__},
        "exit_code": exit_code,
    }
    with open(outdir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(outdir / "meta.json", "w") as f:
        json.dump({"wall_time": time.time() - t0}, f)
        f.write("\n")
    return report


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


# -- command implementations -----------------------------------------------


def _cmd_bergman(cfg, rule, outdir):
    spec = BundleSpec(tuple(cfg["bundle"]))
    ks = cfg.get("k_list", [cfg["k"]] if "k" in cfg else None)
    _expect(ks, "bergman needs k or k_list")
    h = trivial_metric(spec)
    rows = []
    for k in ks:
        rep = bergman_kernel(h, int(k), rule)
        rows.append((int(k), float(rep["sup_dev"]), float(rep["raw_sup_dev"])))
    _write_csv(outdir / "bergman.csv", ("k", "sup_dev", "raw_sup_dev"), rows)
    return {"rows": [{"k": k, "sup_dev": s, "raw_sup_dev": r} for k, s, r in rows]}, 0


def _cmd_mdon(cfg, rule, outdir):
    from .donaldson import donaldson
    import scipy.linalg

    spec = BundleSpec(tuple(cfg["bundle"]))
    sb = basis(spec, cfg["k"])
    G0 = l2_gram(sb, trivial_metric(spec), rule).matrix
    zr = _zeta_from_config(cfg, sb)
    from .asymptotics import zeta_matrix

    E = scipy.linalg.expm(zeta_matrix(zr))
    val = donaldson(FSMetric(sb, G=E @ G0 @ E), FSMetric(sb, G=G0), rule=rule)
    return {"mdon": float(val)}, 0


def _cmd_mna(cfg, rule, outdir):
    from .quot import filtration

    spec = BundleSpec(tuple(cfg["bundle"]))
    sb = basis(spec, cfg["k"])
    zr = _zeta_from_config(cfg, sb)
    rep = filtration(spec, zr)
    return report_to_json(rep), 0


def _cmd_slope_test(cfg, rule, outdir):
    from .asymptotics import OnePSRay, slope_estimate, zeta_matrix

    spec = BundleSpec(tuple(cfg["bundle"]))
    sb = basis(spec, cfg["k"])
    zr = _zeta_from_config(cfg, sb)
    sl = cfg.get("slope", {})
    _expect(set(sl) <= {"t_max", "n_t"}, "slope block allows {t_max, n_t}")
    t_max = float(sl.get("t_max", 30.0))
    n_t = int(sl.get("n_t", 31))
    G0 = l2_gram(sb, trivial_metric(spec), rule).matrix
    ray = OnePSRay(sb, G0, zeta_matrix(zr))
    rep = slope_estimate(ray, zr, t_max, n_t, rule)
    mna_f = float(rep.mna_exact)
    _write_csv(
        outdir / "slope.csv",
        ("t", "mdon", "mna_times_t"),
        [(float(t), float(m), mna_f * float(t)) for t, m in zip(rep.t_grid, rep.mdon_values)],
    )
    ok = rep.relative_gap <= 0.1 and not any(rep.concentration_degrees)
    return {
        "fitted_slope": rep.fitted_slope,
        "mna_exact": rep.mna_exact,
        "relative_gap": rep.relative_gap,
        "c_offset": rep.c_offset,
        "concentration_degrees": list(rep.concentration_degrees),
        "passes": bool(ok),
    }, (0 if ok else 2)


def _cmd_solve(cfg, rule, outdir):
    from .solver import SolveOptions, destabilizer_extract, minimize

    spec = BundleSpec(tuple(cfg["bundle"]))
    so = cfg.get("solve", {})
    allowed = {
        "max_iter",
        "grad_tol",
        "he_tol",
        "divergence_op",
        "divergence_m",
    }
    _expect(set(so) <= allowed, f"solve block allows {sorted(allowed)}")
    opts = SolveOptions(k=cfg["k"], **so)
    res = minimize(spec, opts, rule)
    _write_csv(
        outdir / "solve_history.csv",
        ("iter", "mdon", "he_residual", "log_op_norm"),
        [(i, float(m), float(r), float(o)) for i, m, r, o in res.history],
    )
    out = {
        "status": res.status,
        "he_residual_sup": res.he_residual_sup,
        "mdon_final": float(res.mdon_history[-1]),
        "iterations": len(res.history),
    }
    if res.status == "diverging":
        rep = destabilizer_extract(res, spec, cfg["k"])
        out["destabilizer"] = report_to_json(rep)
    return out, 0


def _cmd_audit_deltabound(cfg, rule, outdir):
    import scipy.linalg

    from .donaldson import delta_lower_bound_audit, poincare_constant

    spec = BundleSpec(tuple(cfg["bundle"]))
    da = cfg.get("delta_audit", {})
    _expect(set(da) <= {"n_samples", "scale"}, "delta_audit allows {n_samples, scale}")
    n = int(da.get("n_samples", 10))
    scale = float(da.get("scale", 0.4))
    sb = basis(spec, cfg["k"])
    h0 = trivial_metric(spec)
    rng = np.random.default_rng(cfg.get("seed", 0))
    pc = poincare_constant(h0, rule)
    rows = []
    worst = None
    for i in range(n):
        X = rng.normal(size=(sb.N, sb.N)) + 1j * rng.normal(size=(sb.N, sb.N))
        G = scipy.linalg.expm(scale * 0.5 * (X + X.conj().T))
        h = FSMetric(sb, G=G)
        rep = delta_lower_bound_audit(
            h, h0, rule, allow_reducible=(spec.rank > 1), poincare=pc["constant"]
        )
        rows.append(
            (i, float(rep.delta), float(rep.mdon), float(rep.bound), rep.passes)
        )
        if worst is None or rep.mdon - rep.bound < worst:
            worst = rep.mdon - rep.bound
    _write_csv(
        outdir / "delta_audit.csv",
        ("sample", "delta", "mdon", "bound", "passes"),
        rows,
    )
    ok = all(r[-1] for r in rows)
    return {
        "samples": n,
        "poincare_constant": pc["constant"],
        "worst_margin": float(worst),
        "passes": bool(ok),
    }, (0 if ok else 2)


def _cmd_probe_coercivity(cfg, rule, outdir):
    from .asymptotics import coercivity_probe

    spec = BundleSpec(tuple(cfg["bundle"]))
    pr = cfg.get("probe", {})
    _expect(
        set(pr) <= {"samples_per_k", "t_max"},
        "probe block allows {samples_per_k, t_max}",
    )
    ks = cfg.get("k_list")
    _expect(ks, "probe-coercivity needs k_list")
    out = coercivity_probe(
        spec,
        [int(k) for k in ks],
        int(pr.get("samples_per_k", 10)),
        float(pr.get("t_max", 15.0)),
        rule,
        seed=cfg.get("seed", 0),
    )
    _write_csv(
        outdir / "coercivity.csv",
        ("k", "c_k"),
        [(r["k"], float(r["c_k"])) for r in out["table"]],
    )
    return {
        "table": [{"k": r["k"], "c_k": float(r["c_k"])} for r in out["table"]]
    }, 0


def _cmd_convexity_audit(cfg, rule, outdir):
    import scipy.linalg

    from .donaldson import second_derivative_geodesic

    spec = BundleSpec(tuple(cfg["bundle"]))
    cv = cfg.get("convexity", {})
    _expect(set(cv) <= {"n_paths", "s_values"}, "convexity allows {n_paths, s_values}")
    n = int(cv.get("n_paths", 3))
    s_values = [float(s) for s in cv.get("s_values", [0.0, 0.5, 1.0])]
    sb = basis(spec, cfg["k"])
    rng = np.random.default_rng(cfg.get("seed", 0))
    rows = []
    ok = True
    for i in range(n):
        def rand_pd():
            X = rng.normal(size=(sb.N, sb.N)) + 1j * rng.normal(size=(sb.N, sb.N))
            return scipy.linalg.expm(0.25 * (X + X.conj().T))

        h0, h1 = FSMetric(sb, G=rand_pd()), FSMetric(sb, G=rand_pd())
        for s in s_values:
            r = second_derivative_geodesic(h0, h1, s, rule)
            rel = abs(r["formula"] - r["fd"]) / max(1e-12, abs(r["formula"]))
            good = r["fd"] >= -1e-8 and rel < 1e-4
            ok = ok and good
            rows.append((i, s, float(r["formula"]), float(r["fd"]), good))
    _write_csv(
        outdir / "convexity.csv",
        ("path", "s", "second_deriv_formula", "second_deriv_fd", "passes"),
        rows,
    )
    return {"paths": n, "passes": bool(ok)}, (0 if ok else 2)


_IMPL = {
    "bergman": _cmd_bergman,
    "mdon": _cmd_mdon,
    "mna": _cmd_mna,
    "slope-test": _cmd_slope_test,
    "solve": _cmd_solve,
    "audit-deltabound": _cmd_audit_deltabound,
    "probe-coercivity": _cmd_probe_coercivity,
    "convexity-audit": _cmd_convexity_audit,
}


def run(command: str, cfg: dict, outdir: Path) -> int:
    t0 = time.time()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rule = build_quadrature(
        cfg["quadrature"]["n_colat"], cfg["quadrature"]["n_angle"]
    )
    results, code = _IMPL[command](cfg, rule, outdir)
    _write_report(outdir, command, cfg, results, t0, code)
    return code


def _self_test(outdir: Path) -> int:
    """Small end-to-end exercise of the easy example paths."""
    checks = []
    rule = build_quadrature(16, 16)
    rep = bergman_kernel(trivial_metric(BundleSpec((0,))), 5, rule)
    checks.append(("bergman O(0) k=5", rep["raw_sup_dev"] < 1e-8))
    from .quot import filtration

    spec = BundleSpec((1, -1))
    sb = basis(spec, 1)
    zr = block_weightspec(sb, [(Fraction(1), 3), (Fraction(-3), 1)])
    f = filtration(spec, zr)
    checks.append(("mna exact", f.mna == -8 and f.jna == 4))
    from .donaldson import c_delta
    import math

    checks.append(("c_delta", abs(c_delta(math.exp(-1)) - math.exp(-1)) < 1e-12))
    from .donaldson import donaldson
    from .bundle import ScaledMetric

    h = FSMetric(sb, G=np.eye(sb.N))
    m = donaldson(ScaledMetric(h, math.e), h, rule=rule)
    checks.append(("scale invariance", abs(m) < 1e-8))
    for name, ok in checks:
        print(f"{name}: {'ok' if ok else 'FAIL'}")
    return 0 if all(ok for _, ok in checks) else 2


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="hebundle",
        description="Audits and experiments for metrics on split bundles "
        "over the projective line.",
    )
    p.add_argument("command", nargs="?", choices=_COMMANDS)
    p.add_argument("--config", type=str, help="path to a JSON config")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    p.add_argument("--self-test", action="store_true")
    args = p.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    outdir = Path(
        args.out
        or os.environ.get("HEBUNDLE_OUT", "hebundle-out")
    )
    if args.self_test:
        return _self_test(outdir)
    if not args.command:
        p.error("a command or --self-test is required")
    if not args.config:
        p.error("--config is required")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if "output_dir" in cfg and args.out is None:
            outdir = Path(cfg["output_dir"])
        return run(args.command, cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
