"""Command-line entry point.

Every invocation writes its data files next to a JSON manifest carrying the
full configuration snapshot, master seed, per-replication derived seeds and
engine version, so any output can be replayed byte-for-byte (wall-clock
fields aside).  Subcommands: pack, measure, sweep, covariance, stabilize,
variability, replay.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import stats
from .engine import ENGINE_VERSION, pack_finite_input, pack_to_saturation
from .errors import ContractViolation, UnsupportedConfiguration, ValidationError
from .geometry import Box, parse_solid_spec
from .measures import BoxIndicator, integrate_point, integrate_volume, point_measure, volume_measure
from .parallel import derive_seed, parallel_map, resolve_threads
from .stabilization import fit_tail, sample_radii, tail_table
from .variability import run_variability_pipeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_KNOWN_KEYS = {
    "pack": {"dim", "solid", "lam", "mode", "tau", "eps", "seed", "reps", "out", "threads"},
    "measure": {"dim", "solid", "lam", "eps", "seed", "reps", "out", "threads", "boxes", "tol"},
    "sweep": {"dim", "solid", "grid", "eps", "seed", "reps", "out", "threads"},
    "covariance": {"dim", "solid", "lam", "eps", "seed", "reps", "out", "threads",
                   "boxes", "which", "tol"},
    "stabilize": {"dim", "solid", "lam", "center", "lgrid", "resamples", "horizon",
                  "eps", "seed", "reps", "out", "threads", "tstar"},
    "variability": {"solid", "delta", "Lmax", "reps", "designs", "seed", "out",
                    "threads", "eps", "resolution", "variance_L"},
}


def _load_config(args: argparse.Namespace, subcommand: str) -> dict:
    """Merge config file and flags (flags win); unknown keys are rejected."""
    cfg: dict = {}
    if getattr(args, "config", None):
        text = Path(args.config).read_text(encoding="utf-8")
        try:
            file_cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - _KNOWN_KEYS[subcommand]
        if unknown:
            allowed = ", ".join(sorted(_KNOWN_KEYS[subcommand]))
            raise ValidationError(
                f"unknown config keys {sorted(unknown)}; accepted keys: {allowed}")
        cfg.update(file_cfg)
    for key in _KNOWN_KEYS[subcommand]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg: dict, key: str, flag: str) -> None:
    if cfg.get(key) is None:
        raise ValidationError(f"missing required {flag} (flag or config key {key!r})")


def _validate_common(cfg: dict, need_lam: bool = True) -> None:
    solid = parse_solid_spec(cfg["solid"])
    if "dim" in cfg and cfg["dim"] is not None and int(cfg["dim"]) != solid.dim:
        raise ValidationError(f"--dim {cfg['dim']} does not match solid dimension {solid.dim}")
    eps = float(cfg.get("eps", 1e-6))
    if eps == 0 and solid.dim >= 2:
        raise ValidationError("eps=0 is only supported in dimension 1")
    if need_lam:
        _require(cfg, "lam", "--lambda")
    cfg["dim"] = solid.dim
    cfg["eps"] = eps


def _manifest(path: Path, cfg: dict, subcommand: str, seeds: list[int],
              status: str, wall_s: float | None) -> None:
    doc = {
        "subcommand": subcommand,
        "config": cfg,
        "master_seed": int(cfg["seed"]),
        "derived_seeds": seeds,
        "engine_version": ENGINE_VERSION,
        "status": status,
        "wall_s": wall_s,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_paths(cfg: dict, suffix: str) -> tuple[Path, Path]:
    out = Path(cfg.get("out") or f"jamlab_{suffix}")
    data = out.with_suffix(".jsonl") if suffix in ("pack",) else out.with_suffix(".csv")
    return data, out.with_suffix(".manifest.json")


# ---------------------------------------------------------------------------
# subcommand workers (module level: must be picklable)


def _pack_rep(lam, solid_spec, mode, tau, eps, seed):
    solid = parse_solid_spec(solid_spec)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    if mode == "finite":
        state = pack_finite_input(lam, tau, solid, rng)
        rec = {"N": state.n, "virtual_time": float(tau * lam),
               "vacancy_bound": None}
    else:
        res = pack_to_saturation(lam, solid, rng, eps)
        rec = {"N": res.n_accepted, "virtual_time": res.virtual_time,
               "vacancy_bound": res.vacancy_bound}
    rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
    return rec


def _measure_rep(lam, solid_spec, eps, seed, boxes, tol):
    solid = parse_solid_spec(solid_spec)
    rng = np.random.default_rng(seed)
    state = pack_to_saturation(lam, solid, rng, eps).state
    pm = point_measure(state, lam)
    vm = volume_measure(state, lam)
    rows = []
    for f_id, (lo, hi) in enumerate(boxes):
        f = BoxIndicator(Box(np.asarray(lo), np.asarray(hi)))
        rows.append((f_id, integrate_point(f, pm), integrate_volume(f, vm, tol)))
    return rows


def run_pack(cfg: dict) -> int:
    _validate_common(cfg)
    mode = cfg.get("mode", "saturate")
    if mode not in ("finite", "saturate"):
        raise ValidationError("mode must be 'finite' or 'saturate'")
    if mode == "finite" and cfg.get("tau") is None:
        raise ValidationError("finite mode requires --tau")
    reps = int(cfg.get("reps", 1))
    seeds = [derive_seed(int(cfg["seed"]), "pack", r) for r in range(reps)]
    data, man = _out_paths(cfg, "pack")
    t0 = time.perf_counter()
    _manifest(man, cfg, "pack", seeds, "incomplete", None)
    args = [(float(cfg["lam"]), cfg["solid"], mode, float(cfg.get("tau") or 1.0),
             cfg["eps"], s) for s in seeds]
    recs = parallel_map(_pack_rep, args, cfg.get("threads"))
    with data.open("w", encoding="utf-8") as fh:
        for r, (rec, seed) in enumerate(zip(recs, seeds)):
            rec = {"rep": r, "seed": seed, **rec}
            fh.write(json.dumps(rec) + "\n")
    _manifest(man, cfg, "pack", seeds, "complete", time.perf_counter() - t0)
    print(f"wrote {data} ({reps} replications) and {man}")
    return EXIT_OK


def _parse_boxes(spec: str, dim: int) -> list[tuple[list[float], list[float]]]:
    """Box list grammar: boxes split by ';', each 'lo1,hi1[,lo2,hi2,...]'."""
    out = []
    for token in spec.split(";"):
        vals = [float(v) for v in token.split(",")]
        if len(vals) != 2 * dim:
            raise ValidationError(
                f"box {token!r} needs {2 * dim} numbers (lo,hi per axis) for dimension {dim}")
        lo = vals[0::2]
        hi = vals[1::2]
        out.append((lo, hi))
    return out


def run_measure(cfg: dict) -> int:
    _validate_common(cfg)
    boxes = _parse_boxes(cfg.get("boxes", "0,0.5"), cfg["dim"])
    reps = int(cfg.get("reps", 1))
    seeds = [derive_seed(int(cfg["seed"]), "measure", r) for r in range(reps)]
    data, man = _out_paths(cfg, "measure")
    t0 = time.perf_counter()
    _manifest(man, cfg, "measure", seeds, "incomplete", None)
    args = [(float(cfg["lam"]), cfg["solid"], cfg["eps"], s, tuple(boxes),
             float(cfg.get("tol", 1e-6))) for s in seeds]
    all_rows = parallel_map(_measure_rep, args, cfg.get("threads"))
    with data.open("w", encoding="utf-8") as fh:
        fh.write("rep,f_id,point_integral,volume_integral\n")
        for r, rows in enumerate(all_rows):
            for f_id, pi, vi in rows:
                fh.write(f"{r},{f_id},{pi!r},{vi!r}\n")
    _manifest(man, cfg, "measure", seeds, "complete", time.perf_counter() - t0)
    print(f"wrote {data} and {man}")
    return EXIT_OK


def run_sweep(cfg: dict) -> int:
    _validate_common(cfg, need_lam=False)
    _require(cfg, "grid", "--grid")
    grid = [float(v) for v in str(cfg["grid"]).split(",")]
    reps = int(cfg.get("reps", 2))
    solid = parse_solid_spec(cfg["solid"])
    data, man = _out_paths(cfg, "sweep")
    t0 = time.perf_counter()
    _manifest(man, cfg, "sweep", [], "incomplete", None)
    sweep = stats.sweep_jamming(grid, reps, solid, cfg["eps"], int(cfg["seed"]),
                                cfg.get("threads"))
    detail = data.with_name(data.stem + "_detail.csv")
    with detail.open("w", encoding="utf-8") as fh:
        fh.write("lam,rep,N\n")
        for lam in grid:
            for r, n in enumerate(sweep.samples[lam]):
                fh.write(f"{lam!r},{r},{int(n)}\n")
    with data.open("w", encoding="utf-8") as fh:
        fh.write("lambda,reps,mean_ratio,var_ratio,se_mean,se_var,ks\n")
        for lam in grid:
            ks = stats.ks_normal(sweep.standardized(lam)) if reps >= 20 else float("nan")
            fh.write(f"{lam!r},{reps},{sweep.mean_ratio(lam)!r},{sweep.var_ratio(lam)!r},"
                     f"{sweep.se_mean_ratio(lam)!r},{sweep.se_var_ratio(lam)!r},{ks!r}\n")
    _manifest(man, cfg, "sweep", [], "complete", time.perf_counter() - t0)
    print(f"wrote {data}, {detail} and {man}")
    return EXIT_OK


def run_covariance(cfg: dict) -> int:
    _validate_common(cfg)
    solid = parse_solid_spec(cfg["solid"])
    boxes = _parse_boxes(cfg.get("boxes", "0,0.4;0.6,1"), cfg["dim"])
    fs = [BoxIndicator(Box(np.asarray(lo), np.asarray(hi))) for lo, hi in boxes]
    which = cfg.get("which", "point")
    reps = int(cfg.get("reps", 30))
    data, man = _out_paths(cfg, "covariance")
    t0 = time.perf_counter()
    _manifest(man, cfg, "covariance", [], "incomplete", None)
    result = stats.covariance_experiment(fs, float(cfg["lam"]), reps, int(cfg["seed"]),
                                         which, solid=solid, epsilon=cfg["eps"],
                                         tol=float(cfg.get("tol", 1e-6)),
                                         threads=cfg.get("threads"))
    with data.open("w", encoding="utf-8") as fh:
        fh.write("f_i,f_j,cov_over_lambda,se\n")
        for i in range(len(fs)):
            for j in range(len(fs)):
                fh.write(f"{i},{j},{result.matrix[i, j]!r},{result.se[i, j]!r}\n")
    _manifest(man, cfg, "covariance", [], "complete", time.perf_counter() - t0)
    print(f"wrote {data} and {man}")
    return EXIT_OK


def run_stabilize(cfg: dict) -> int:
    _validate_common(cfg)
    _require(cfg, "lgrid", "--lgrid")
    solid = parse_solid_spec(cfg["solid"])
    a, b, step = (float(v) for v in str(cfg["lgrid"]).split(":"))
    grid = list(np.arange(a, b + step / 2, step))
    reps = int(cfg.get("reps", 50))
    center = [float(v) for v in str(cfg.get("center", "0")).split(",")]
    data, man = _out_paths(cfg, "stabilize")
    t0 = time.perf_counter()
    _manifest(man, cfg, "stabilize", [], "incomplete", None)
    radii = sample_radii(float(cfg["lam"]), center, grid, int(cfg.get("resamples", 8)),
                         float(cfg.get("horizon", 50.0)), solid, reps,
                         int(cfg["seed"]), threads=cfg.get("threads"))
    table = tail_table(radii, grid)
    with data.open("w", encoding="utf-8") as fh:
        fh.write("L,tau_hat,n,method\n")
        for L, tau, n in table:
            fh.write(f"{L!r},{tau!r},{n},perturbation\n")
    summary = {"n_samples": reps, "all_finite": bool(np.all(np.isfinite(radii)))}
    try:
        fit = fit_tail(table)
        summary.update(slope=fit.slope, intercept=fit.intercept,
                       r_squared=fit.r_squared, super_exponential=fit.super_exponential)
    except Exception as exc:  # degenerate tails are reported, not fatal
        summary["fit_error"] = str(exc)
    fit_path = data.with_name(data.stem + "_fit.json")
    fit_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _manifest(man, cfg, "stabilize", [], "complete", time.perf_counter() - t0)
    print(f"wrote {data}, {fit_path} and {man}")
    return EXIT_OK


def run_variability(cfg: dict) -> int:
    solid = parse_solid_spec(cfg["solid"])
    cfg["dim"] = solid.dim
    designs = tuple(str(cfg.get("designs", "empty,lattice_ring,greedy_ring")).split(","))
    data, man = _out_paths(cfg, "variability")
    t0 = time.perf_counter()
    _manifest(man, cfg, "variability", [], "incomplete", None)
    report = run_variability_pipeline(
        solid, int(cfg["seed"]), reps=int(cfg.get("reps", 12)),
        L_max=float(cfg.get("Lmax", 400.0)), epsilon=float(cfg.get("eps", 1e-6)),
        resolution=float(cfg.get("resolution", 1.0 / 128.0)), designs=designs,
        threads=cfg.get("threads"),
        variance_L=(float(cfg["variance_L"]) if cfg.get("variance_L") else None))
    doc = {
        "beta_hat": report.beta_hat,
        "delta": report.delta,
        "L0": report.counts.L,
        "counts": {"n1": report.counts.n1, "n2": report.counts.n2,
                   "n3_bound": report.counts.n3_bound, "c1": report.counts.c1},
        "log_p1": report.events.log_p[0],
        "log_p2": report.events.log_p[1],
        "mc": {"p1": report.events.p_mc[0], "p2": report.events.p_mc[1],
               "reps": report.events.mc_reps, "conclusive": report.events.conclusive},
        "variance": [{"eta": r.eta_id, "n_boundary": r.n_boundary, "reps": r.reps,
                      "mean": r.mean, "var": r.var_hat,
                      "ci": [r.ci_low, r.ci_high]} for r in report.variance_rows],
    }
    data.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    _manifest(man, cfg, "variability", [], "complete", time.perf_counter() - t0)
    print(f"wrote {data} and {man}")
    return EXIT_OK


def run_replay(manifest_path: str) -> int:
    doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    sub = doc["subcommand"]
    cfg = doc["config"]
    if doc.get("engine_version") != ENGINE_VERSION:
        print(f"note: manifest engine version {doc.get('engine_version')} != {ENGINE_VERSION}",
              file=sys.stderr)
    runner = {"pack": run_pack, "measure": run_measure, "sweep": run_sweep,
              "covariance": run_covariance, "stabilize": run_stabilize,
              "variability": run_variability}[sub]
    return runner(dict(cfg))


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, lam: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override file keys")
    p.add_argument("--solid", help='solid spec, e.g. "ball d=2 r=0.05"')
    p.add_argument("--dim", type=int, help="dimension (validated against the solid)")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float, help="region volume")
    p.add_argument("--eps", type=float, help="relative vacancy tolerance (default 1e-6)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--out", help="output path stem")
    p.add_argument("--threads", type=int,
                   help="worker processes (default: JAMLAB_THREADS or machine parallelism)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="jamlab",
        description="Sequential hard-core packing to saturation, with limit-theory diagnostics.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pack", help="pack one region: finite input or to saturation")
    _add_common(p)
    p.add_argument("--mode", choices=["finite", "saturate"], default=None)
    p.add_argument("--tau", type=float, help="finite-input intensity multiplier")

    p = sub.add_parser("measure", help="test-function integrals of both packing measures")
    _add_common(p)
    p.add_argument("--boxes", help="semicolon-separated boxes 'lo,hi[,lo,hi...]'")
    p.add_argument("--tol", type=float, help="quadrature tolerance")

    p = sub.add_parser("sweep", help="jamming mean/variance ratios over a lambda grid")
    _add_common(p, lam=False)
    p.add_argument("--grid", help="comma-separated ascending lambda values", required=False)

    p = sub.add_parser("covariance", help="covariances of measure integrals")
    _add_common(p)
    p.add_argument("--boxes", help="semicolon-separated boxes")
    p.add_argument("--which", choices=["point", "volume"])
    p.add_argument("--tol", type=float)

    p = sub.add_parser("stabilize", help="perturbation radii and tail fit")
    _add_common(p)
    p.add_argument("--center", help="comma-separated cube index (default origin)")
    p.add_argument("--lgrid", help="radius grid a:b:step")
    p.add_argument("--resamples", type=int, help="resamples per radius")
    p.add_argument("--horizon", type=float, help="time horizon for the baseline")
    p.add_argument("--tstar", help="auto or a float (causal-relevance threshold)")

    p = sub.add_parser("variability", help="jamming-variability pipeline")
    p.add_argument("--config", help="JSON config file; flags override file keys")
    p.add_argument("--solid", help="solid spec")
    p.add_argument("--delta", help="auto or a float inflation margin")
    p.add_argument("--Lmax", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--designs", help="comma-separated boundary design names")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--resolution", type=float)
    p.add_argument("--variance_L", type=float,
                   help="box side for the variance experiment (default: the pipeline L0)")
    p.add_argument("--out", help="output path stem")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.cmd == "replay":
            return run_replay(args.manifest)
        cfg = _load_config(args, args.cmd)
        if cfg.get("solid") is None:
            raise ValidationError("--solid (or a config file with 'solid') is required")
        if cfg.get("seed") is None:
            raise ValidationError("--seed (or a config file with 'seed') is required")
        runner = {"pack": run_pack, "measure": run_measure, "sweep": run_sweep,
                  "covariance": run_covariance, "stabilize": run_stabilize,
                  "variability": run_variability}[args.cmd]
        return runner(cfg)
    except (ValidationError, ContractViolation, UnsupportedConfiguration) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failures carry a distinct exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
