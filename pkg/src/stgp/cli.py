"""Experiment driver: simulate -> estimate -> query -> benchmark.

All artifacts are schema-versioned ("stgp.<kind>/<major>.<minor>"); readers
reject unknown majors.  JSON files are written with sorted keys so identical
inputs produce bit-identical bytes.  CSV files carry a leading "# schema"
comment, a header row, and floats formatted with %.17g (exact round-trip).

posterior.bin is a NumPy .npz archive:
  schema            stgp.posterior tag
  s_knots, t_knots  grid knot vectors
  qs_psd, qt_psd, qst_psd, p0            prior parameters
  mean_R, mean_t, mean_strain, mean_velocity, mean_sv   prior mean state
  R (NK,3,3), t (NK,3), strain, velocity, sv (NK,6)     node estimates
  sig_diag (K,24N,24N), sig_off (K-1,24N,24N)  covariance superblocks of the
                     selected inverse (same-row and adjacent-row node blocks)
  report            report.json content as a JSON string

Exit codes: 0 ok, 2 invalid config or out-of-hull query, 3 I/O failure,
4 estimator did not converge (artifacts still written), 5 normal equations
not positive definite.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import statistics
import sys
import time
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .graph import Grid, build_grid, build_prior_factors
from .liegroup import Pose, quaternion_to_rotation, rotation_to_quaternion
from .prior import NodeState, PriorParams
from .query import OutOfHullError, query_state
from .sensors import Measurement, build_measurement_factors
from .sim import (GroundTruth, ScenarioConfig, SensorSpec,
                  generate_measurements)
from .solver import (ConvergenceReport, CornerCovariances,
                     NotPositiveDefiniteError, Posterior, SolverOptions,
                     corner_covariances, factorize, gauss_newton, linearize,
                     solve_factorized)

SCHEMA_MAJOR = 1
SCHEMA_MINOR = 0

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_NO_CONVERGENCE = 4
EXIT_NOT_PD = 5


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def schema_tag(kind: str) -> str:
    return f"stgp.{kind}/{SCHEMA_MAJOR}.{SCHEMA_MINOR}"


def check_schema(tag, kind: str) -> None:
    if not isinstance(tag, str) or "/" not in tag:
        raise SchemaError(f"missing schema tag, expected {schema_tag(kind)}")
    name, _, version = tag.partition("/")
    major = version.split(".", 1)[0]
    if name != f"stgp.{kind}" or not major.isdigit() \
            or int(major) != SCHEMA_MAJOR:
        raise SchemaError(f"cannot read {tag!r}, expected {schema_tag(kind)}")


# ---------------------------------------------------------------------------
# config files


def config_to_dict(cfg: ScenarioConfig) -> dict:
    sensors = []
    for sp in cfg.sensors:
        rec = {"kind": sp.kind, "std": sp.std}
        if sp.rate is not None:
            rec["rate"] = sp.rate
        if sp.locations is not None:
            rec["locations"] = sp.locations if isinstance(sp.locations, str) \
                else [float(v) for v in np.atleast_1d(sp.locations)]
        if sp.samples is not None:
            rec["samples"] = [[float(s), float(t)] for s, t in sp.samples]
        if sp.mask is not None:
            rec["mask"] = [bool(b) for b in sp.mask]
        sensors.append(rec)
    return {
        "schema": schema_tag("config"),
        "length": cfg.length, "n_space": cfg.n_space, "n_time": cfg.n_time,
        "duration": cfg.duration, "kappa0": cfg.kappa0,
        "kappa_a": cfg.kappa_a, "period": cfg.period,
        "qs_diag": list(cfg.qs_diag), "qt_diag": list(cfg.qt_diag),
        "qst_diag": list(cfg.qst_diag), "p0_diag": list(cfg.p0_diag),
        "sensors": sensors, "seed": cfg.seed, "refinement": cfg.refinement,
        "max_iters": cfg.max_iters, "tol": cfg.tol,
    }


def config_from_dict(d: dict) -> ScenarioConfig:
    check_schema(d.get("schema"), "config")
    try:
        sensors = [SensorSpec(kind=rec["kind"], std=rec["std"],
                              rate=rec.get("rate"),
                              locations=rec.get("locations"),
                              samples=[tuple(p) for p in rec["samples"]]
                              if rec.get("samples") is not None else None,
                              mask=rec.get("mask"))
                   for rec in d.get("sensors", [])]
        return ScenarioConfig(
            length=d["length"], n_space=d["n_space"], n_time=d["n_time"],
            duration=d["duration"], kappa0=d.get("kappa0", 1.0),
            kappa_a=d.get("kappa_a", 0.5), period=d.get("period", 2.0),
            qs_diag=d.get("qs_diag", np.ones(6)),
            qt_diag=d.get("qt_diag", np.ones(6)),
            qst_diag=d.get("qst_diag", np.ones(6)),
            p0_diag=d.get("p0_diag", np.ones(24)),
            sensors=sensors, seed=d.get("seed", 0),
            refinement=d.get("refinement", 8),
            max_iters=d.get("max_iters", 50), tol=d.get("tol", 1e-8))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return config_from_dict(raw)


def _dump_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# measurement files


def _canonical_quat(R: np.ndarray) -> np.ndarray:
    q = rotation_to_quaternion(R)
    for c in q:
        if c != 0.0:
            return -q if c < 0 else q
    return q


def measurement_to_dict(m: Measurement) -> dict:
    rec = {"kind": m.kind, "s": m.s, "t": m.t,
           "noise_cov": [list(row) for row in np.asarray(m.noise_cov)]}
    if m.kind == "pose6":
        rec["value"] = {"quat_wxyz": list(_canonical_quat(m.value.R)),
                        "translation": list(m.value.t)}
    else:
        rec["value"] = list(np.asarray(m.value, dtype=float))
    if m.kind == "strain6":
        rec["mask"] = [bool(b) for b in m.mask]
    return rec


def measurement_from_dict(rec: dict) -> Measurement:
    value = rec["value"]
    if rec["kind"] == "pose6":
        value = Pose(quaternion_to_rotation(np.asarray(value["quat_wxyz"])),
                     np.asarray(value["translation"], dtype=float))
    return Measurement(rec["kind"], rec["s"], rec["t"], value,
                       np.asarray(rec["noise_cov"], dtype=float),
                       mask=rec.get("mask"))


def save_measurements(path: str, measurements: Sequence[Measurement]) -> None:
    _dump_json({"schema": schema_tag("measurements"),
                "measurements": [measurement_to_dict(m) for m in measurements]},
               path)


def load_measurements(path: str) -> List[Measurement]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    check_schema(raw.get("schema"), "measurements")
    return [measurement_from_dict(rec) for rec in raw["measurements"]]


# ---------------------------------------------------------------------------
# CSV state tables


STATE_COLUMNS = (["s", "t", "x", "y", "z", "qw", "qx", "qy", "qz"]
                 + [f"eps{i}" for i in range(1, 7)]
                 + [f"pi{i}" for i in range(1, 7)]
                 + [f"psi{i}" for i in range(1, 7)])
STD_COLUMNS = [f"std{i}" for i in range(1, 25)]


def _fmt(x: float) -> str:
    return "%.17g" % x


def state_row(s: float, t: float, x: NodeState,
              stds: Optional[np.ndarray] = None) -> str:
    vals = [s, t, *x.pose.t, *_canonical_quat(x.pose.R), *x.strain,
            *x.velocity, *x.strain_velocity]
    if stds is not None:
        vals.extend(stds)
    return ",".join(_fmt(v) for v in vals)


def write_state_csv(path: str, kind: str, rows: Sequence[str],
                    with_stds: bool) -> None:
    header = ",".join(STATE_COLUMNS + (STD_COLUMNS if with_stds else []))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {schema_tag(kind)}\n{header}\n")
        for row in rows:
            fh.write(row + "\n")


def read_state_csv(path: str, kind: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    check_schema(first.lstrip("# "), kind)
    return np.genfromtxt(path, delimiter=",", comments="#", names=True)


# ---------------------------------------------------------------------------
# posterior archive


def save_posterior(path: str, post: Posterior, report_dict: dict) -> None:
    grid, params = post.grid, post.params
    mean = params.prior_mean
    sa = grid.state_arrays()
    payload = dict(
        schema=schema_tag("posterior"),
        s_knots=grid.s_knots, t_knots=grid.t_knots,
        qs_psd=params.qs_psd, qt_psd=params.qt_psd,
        qst_psd=params.qst_psd, p0=params.p0,
        mean_R=mean.pose.R, mean_t=mean.pose.t,
        mean_strain=mean.strain, mean_velocity=mean.velocity,
        mean_sv=mean.strain_velocity,
        R=sa.R, t=sa.t, strain=sa.eps, velocity=sa.vel, sv=sa.sv,
        sig_diag=post.cov.sig_diag, sig_off=post.cov.sig_off,
        report=json.dumps(report_dict, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_posterior(path: str) -> Posterior:
    with np.load(path, allow_pickle=False) as z:
        check_schema(str(z["schema"]), "posterior")
        s_knots, t_knots = z["s_knots"], z["t_knots"]
        N, K = len(s_knots), len(t_knots)
        states = [NodeState(Pose(z["R"][i], z["t"][i]), z["strain"][i],
                            z["velocity"][i], z["sv"][i])
                  for i in range(N * K)]
        mean = NodeState(Pose(z["mean_R"], z["mean_t"]), z["mean_strain"],
                         z["mean_velocity"], z["mean_sv"])
        params = PriorParams(qs_psd=z["qs_psd"], qt_psd=z["qt_psd"],
                             qst_psd=z["qst_psd"], p0=z["p0"],
                             prior_mean=mean)
        cov = CornerCovariances(N, K, z["sig_diag"], z["sig_off"])
        rep = json.loads(str(z["report"]))
    report = ConvergenceReport(
        converged=rep["converged"], iterations=rep["iterations"],
        initial_cost=rep["initial_cost"], final_cost=rep["final_cost"],
        cost_trace=rep["cost_trace"], update_norms=rep["update_norms"],
        halvings=rep["halvings"], message=rep["message"])
    return Posterior(Grid(s_knots, t_knots, states), params, cov, report)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ScenarioConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    truth = GroundTruth(cfg)
    measurements = generate_measurements(cfg, truth)
    save_measurements(os.path.join(out_dir, "measurements.json"), measurements)
    rows = [state_row(float(s), float(t), truth.state(float(s), float(t)))
            for t in cfg.t_knots for s in cfg.s_knots]
    write_state_csv(os.path.join(out_dir, "ground_truth.csv"),
                    "ground_truth", rows, with_stds=False)
    return EXIT_OK


def _report_dict(report: ConvergenceReport, factors) -> dict:
    return {
        "schema": schema_tag("report"),
        "converged": report.converged, "iterations": report.iterations,
        "initial_cost": report.initial_cost, "final_cost": report.final_cost,
        "cost_trace": report.cost_trace, "update_norms": report.update_norms,
        "halvings": report.halvings, "message": report.message,
        "time_linearize": report.time_linearize,
        "time_factorize": report.time_factorize,
        "time_solve": report.time_solve,
        "time_covariance": report.time_covariance,
        "time_total": report.time_total,
        "prior_factors": factors.prior_count(),
        "measurement_factors": len(factors.measurement),
    }


def _estimate(cfg: ScenarioConfig, measurements: Sequence[Measurement]):
    params = cfg.prior_params()
    grid = build_grid(cfg.s_knots, cfg.t_knots, params.prior_mean)
    factors = build_prior_factors(grid, params)
    factors.measurement = build_measurement_factors(measurements, grid, params)
    opts = SolverOptions(max_iters=cfg.max_iters, tol=cfg.tol)
    post = gauss_newton(grid, factors, params, opts)
    return post, factors


def cmd_estimate(cfg: ScenarioConfig, out_dir: str,
                 measurements_path: Optional[str] = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    path = measurements_path or os.path.join(out_dir, "measurements.json")
    measurements = load_measurements(path)
    post, factors = _estimate(cfg, measurements)
    report = _report_dict(post.report, factors)
    _dump_json(report, os.path.join(out_dir, "report.json"))
    marg = post.node_marginals
    stds = np.sqrt(np.maximum(np.einsum("...ii->...i", marg), 0.0))
    grid = post.grid
    rows = [state_row(float(grid.s_knots[n]), float(grid.t_knots[k]),
                      grid.states[grid.flat(n, k)], stds[grid.flat(n, k)])
            for k in range(grid.K) for n in range(grid.N)]
    write_state_csv(os.path.join(out_dir, "estimate.csv"), "estimate", rows,
                    with_stds=True)
    save_posterior(os.path.join(out_dir, "posterior.bin"), post, report)
    if not post.report.converged:
        print(f"estimate did not converge: {post.report.message}",
              file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _parse_grid_arg(text: str) -> Tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        ns, nt = int(a), int(b)
    except ValueError:
        raise ConfigError(f"--grid expects SxT, got {text!r}")
    if ns < 1 or nt < 1:
        raise ConfigError("--grid sizes must be >= 1")
    return ns, nt


def cmd_query(out_dir: str, s: Optional[float] = None,
              t: Optional[float] = None, grid_arg: Optional[str] = None,
              stream: Optional[TextIO] = None) -> int:
    stream = stream or sys.stdout
    post = load_posterior(os.path.join(out_dir, "posterior.bin"))
    if grid_arg is not None:
        ns, nt = _parse_grid_arg(grid_arg)
        s_vals = np.linspace(post.grid.s_knots[0], post.grid.s_knots[-1], ns)
        t_vals = np.linspace(post.grid.t_knots[0], post.grid.t_knots[-1], nt)
        points = [(float(sv), float(tv)) for tv in t_vals for sv in s_vals]
    else:
        if s is None or t is None:
            raise ConfigError("query needs --s and --t, or --grid SxT")
        points = [(float(s), float(t))]
    stream.write(",".join(STATE_COLUMNS + STD_COLUMNS) + "\n")
    for sv, tv in points:
        x, cov = query_state(post, sv, tv)
        stds = np.sqrt(np.maximum(np.diag(cov), 0.0))
        stream.write(state_row(sv, tv, x, stds) + "\n")
    return EXIT_OK


def _parse_sweep(text: str) -> Tuple[str, List[int]]:
    axis, _, values = text.partition("=")
    axis = axis.strip().upper()
    if axis not in ("K", "N", "NK") or not values:
        raise ConfigError(f"--sweep expects K=..|N=..|NK=.., got {text!r}")
    try:
        sizes = [int(v) for v in values.split(",")]
    except ValueError:
        raise ConfigError(f"sweep sizes must be integers, got {values!r}")
    if any(v < 1 for v in sizes):
        raise ConfigError("sweep sizes must be >= 1")
    return axis, sizes


def _solve_cycle(grid, factors):
    system = linearize(factors, grid)
    fact = factorize(system)
    solve_factorized(fact, system.rhs)
    corner_covariances(fact)


def benchmark_rows(cfg: ScenarioConfig, axis: str, sizes: Sequence[int],
                   solve_reps: int = 5, query_reps: int = 100) -> List[dict]:
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for size in sizes:
        kw = {}
        if axis in ("N", "NK"):
            kw["n_space"] = size
        if axis in ("K", "NK"):
            kw["n_time"] = size
        sub = ScenarioConfig(
            length=cfg.length, duration=cfg.duration, kappa0=cfg.kappa0,
            kappa_a=cfg.kappa_a, period=cfg.period, qs_diag=cfg.qs_diag,
            qt_diag=cfg.qt_diag, qst_diag=cfg.qst_diag, p0_diag=cfg.p0_diag,
            seed=cfg.seed, refinement=cfg.refinement,
            n_space=kw.get("n_space", cfg.n_space),
            n_time=kw.get("n_time", cfg.n_time))
        params = sub.prior_params()
        grid = build_grid(sub.s_knots, sub.t_knots, params.prior_mean)
        factors = build_prior_factors(grid, params)
        times = []
        for _ in range(solve_reps):
            t0 = time.perf_counter()
            _solve_cycle(grid, factors)
            times.append(time.perf_counter() - t0)
        system = linearize(factors, grid)
        post = Posterior(grid, params,
                         corner_covariances(factorize(system)),
                         ConvergenceReport(True, 0, 0.0, 0.0, [], [], [], ""))
        pts = np.column_stack([
            rng.uniform(grid.s_knots[0], grid.s_knots[-1], query_reps),
            rng.uniform(grid.t_knots[0], grid.t_knots[-1], query_reps)])
        qtimes = []
        for sv, tv in pts:
            t0 = time.perf_counter()
            query_state(post, float(sv), float(tv))
            qtimes.append(time.perf_counter() - t0)
        rows.append({"n_space": grid.N, "n_time": grid.K,
                     "solve_median_s": statistics.median(times),
                     "query_median_s": statistics.median(qtimes),
                     "solve_ratio": None})
    for prev, cur in zip(rows, rows[1:]):
        cur["solve_ratio"] = cur["solve_median_s"] / prev["solve_median_s"]
    return rows


def cmd_benchmark(cfg: ScenarioConfig, out_dir: str,
                  sweep: Optional[str]) -> int:
    os.makedirs(out_dir, exist_ok=True)
    if sweep is None:
        axis, sizes = "K", [cfg.n_time]
    else:
        axis, sizes = _parse_sweep(sweep)
    rows = benchmark_rows(cfg, axis, sizes)
    _dump_json({"schema": schema_tag("bench"), "axis": axis, "rows": rows},
               os.path.join(out_dir, "bench.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stgp",
        description="Space-time GP state estimation for continuum robots")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "estimate", "query", "benchmark"):
        sp = sub.add_parser(name)
        if name != "query":
            sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
        if name == "estimate":
            sp.add_argument("--measurements", default=None)
        if name == "query":
            sp.add_argument("--s", type=float, default=None)
            sp.add_argument("--t", type=float, default=None)
            sp.add_argument("--grid", default=None)
        if name == "benchmark":
            sp.add_argument("--sweep", default=None)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "query":
            return cmd_query(args.out, s=args.s, t=args.t,
                             grid_arg=args.grid)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.out,
                                measurements_path=args.measurements)
        return cmd_benchmark(cfg, args.out, args.sweep)
    except (ConfigError, SchemaError, OutOfHullError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NotPositiveDefiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_PD
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
