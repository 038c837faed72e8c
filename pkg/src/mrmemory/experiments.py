"""Configuration-driven experiments behind the CLI subcommands."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, envelope, io
from .config import ExperimentConfig
from .errors import BlowUpError, DomainError, StepFailure
from .flow import (BoundsGrid, DerivedFields, DoubleGyre, FieldBounds, FlowField, UniformFlow,
                   derived_fields, estimate_bounds)
from .params import ParticleParams
from .relaxation import RelaxationKernel
from .solver import (SolverConfig, TrajectoryRecord, restart_discard_history, restart_replay_history,
                     simulate, simulate_ensemble)

log = logging.getLogger(__name__)

THREADS_ENV = "MRMEMORY_THREADS"
# relative |w| spread below which an ensemble counts as position independent
SPREAD_THRESHOLD = 0.05


# -- builders ---------------------------------------------------------------------

def build_flow(cfg: ExperimentConfig) -> FlowField:
    f = cfg.flow
    if f.kind == "double_gyre":
        return DoubleGyre(A=f.A, omega=f.omega, alpha=f.alpha)
    if f.kind == "uniform":
        return UniformFlow(velocity=tuple(f.velocity))
    raise DomainError(f"unknown flow kind {f.kind!r}")


def build_params(cfg: ExperimentConfig, R: float) -> ParticleParams:
    p = cfg.particle
    St = p.St_over_R * R
    if p.kappa is not None:
        return ParticleParams.memoryless(R, St, p.Re, kappa=p.kappa, g_scaled=p.g)
    return ParticleParams.from_dimensionless(R, St, p.Re, g_scaled=p.g)


def build_fields(cfg: ExperimentConfig, R: float) -> DerivedFields:
    return derived_fields(build_flow(cfg), build_params(cfg, R), cfg.solver.faxen)


def solver_config(cfg: ExperimentConfig, **overrides) -> SolverConfig:
    s = cfg.solver
    base = SolverConfig(backend=s.backend, dt=s.dt, tau_end=s.tau_end, picard_tol=s.picard_tol,
                        picard_max_iters=s.picard_max_iters, faxen=s.faxen, t0=s.t0)
    return base.replace(**overrides) if overrides else base


def release_lattice(cfg: ExperimentConfig) -> np.ndarray:
    """Release points on an ``nx x ny`` lattice over the configured box (x fastest)."""
    e = cfg.ensemble
    x0, x1, y0, y1 = e.box
    xs = np.linspace(x0, x1, e.nx)
    ys = np.linspace(y0, y1, e.ny)
    return np.array([[x, y] for y in ys for x in xs])


_BOUNDS_CACHE: dict = {}


def bounds_for(cfg: ExperimentConfig, fields: DerivedFields) -> FieldBounds:
    """Bound constants from the config, estimating whatever is not given."""
    b = cfg.bounds
    given = {k: getattr(b, k) for k in ("L_A", "L_B", "L_M", "L_c")}
    if all(given[k] is not None for k in ("L_A", "L_B", "L_M")):
        return FieldBounds.from_constants(given["L_A"], given["L_B"], given["L_M"], given["L_c"],
                                          R=fields.params.R, faxen=fields.faxen_enabled)
    grid = BoundsGrid(b.nx, b.ny, b.nt)
    key = (repr(fields.flow), fields.params, fields.faxen_enabled, grid, b.matrix_norm, b.refine_tol)
    if key not in _BOUNDS_CACHE:
        _BOUNDS_CACHE[key] = estimate_bounds(fields, grid, b.refine_tol, b.matrix_norm)
    est = _BOUNDS_CACHE[key]
    if not any(v is not None for v in given.values()):
        return est
    vals = {k: (given[k] if given[k] is not None else getattr(est, k)) for k in given}
    return FieldBounds(vals["L_A"], vals["L_B"], vals["L_M"], vals["L_c"], grid=est.grid, faxen=est.faxen,
                       R=est.R, matrix_norm=est.matrix_norm, refinement_delta=est.refinement_delta,
                       warnings=est.warnings)


def thread_count(requested: int | None, cfg: ExperimentConfig) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, cfg.run.threads)


def _map(fn, jobs, threads):
    """Run ``fn`` over ``jobs``; results come back in job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def r_tag(R: float) -> str:
    return f"R{R:.6g}"


def fit_loglog_slope(tau, values, window) -> float:
    """Least-squares slope of ``log(values)`` against ``log(tau)`` inside ``window``."""
    tau = np.asarray(tau, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window
    sel = (tau >= lo) & (tau <= hi) & (values > 0.0)
    if np.count_nonzero(sel) < 2:
        return math.nan
    return float(np.polyfit(np.log(tau[sel]), np.log(values[sel]), 1)[0])


# -- ensembles -----------------------------------------------------------------------

@dataclass
class EnsembleResult:
    R: float
    params: ParticleParams
    bounds: FieldBounds
    records: list
    failures: list
    curve: envelope.EnvelopeCurve | None
    asymptotic: float | None
    seconds: float = 0.0
    summary: dict = field(default_factory=dict)


def run_ensemble(cfg: ExperimentConfig, R: float, y0s=None, tau_end=None) -> EnsembleResult:
    """Integrate the release lattice for one density ratio and attach its envelope."""
    start = time.perf_counter()
    fields = build_fields(cfg, R)
    params = fields.params
    bounds = bounds_for(cfg, fields)
    y0s = release_lattice(cfg) if y0s is None else np.asarray(y0s, dtype=float)
    w0 = np.asarray(cfg.ensemble.w0, dtype=float)
    scfg = solver_config(cfg) if tau_end is None else solver_config(cfg, tau_end=tau_end)
    failures = []
    try:
        records = simulate_ensemble(fields, y0s, w0, scfg, bounds)
    except (StepFailure, BlowUpError) as exc:
        log.warning("batched run for R=%g failed (%s); retrying particles one by one", R, exc)
        records = []
        for i, y0 in enumerate(y0s):
            try:
                records.append(simulate(fields, y0, w0, scfg))
            except (StepFailure, BlowUpError) as err:
                failures.append({"R": R, "particle": i, "error": str(err)})
                records.append(None)
    curve = asym = None
    if params.eps * bounds.L_M < 1.0:
        grid = np.arange(scfg.n_steps + 1) * scfg.dt
        curve = envelope.envelope_curve(params, bounds, float(np.linalg.norm(w0)), grid,
                                        cfg.envelope.tol, cfg.envelope.omit_eps2)
        asym = envelope.asymptotic_bound(params, bounds)
    result = EnsembleResult(R, params, bounds, records, failures, curve, asym)
    result.summary = summarize(cfg, result, y0s)
    result.seconds = time.perf_counter() - start
    return result


def summarize(cfg: ExperimentConfig, res: EnsembleResult, y0s) -> dict:
    rows = []
    finals = []
    curves = []
    total_violations = 0
    worst_ratio = 0.0
    for i, rec in enumerate(res.records):
        if rec is None:
            continue
        abs_w = rec.abs_w
        finals.append(abs_w[-1])
        curves.append(abs_w)
        violations = ratio = math.nan
        if res.curve is not None:
            bad = res.curve.violations(abs_w, cfg.envelope.violation_rtol)
            violations = int(bad.size)
            total_violations += violations
            allowed = res.curve.envelope * (1.0 + cfg.envelope.violation_rtol) + res.curve.slack
            ratio = float(np.max(abs_w / allowed))
            worst_ratio = max(worst_ratio, ratio)
        window = (min(100.0, rec.tau[-1] / 10.0), rec.tau[-1])
        rows.append({
            "particle": i, "y0_1": float(y0s[i][0]), "y0_2": float(y0s[i][1]),
            "final_abs_w": float(abs_w[-1]), "max_abs_w": float(abs_w.max()),
            "violations": violations, "max_envelope_ratio": ratio,
            "decay_slope": fit_loglog_slope(rec.tau, abs_w, window),
            "domain_exit": bool(rec.domain_exit_flag),
        })
    spread = math.nan
    if len(curves) > 1:
        stack = np.vstack(curves)
        late = rec.tau >= 1.0
        rel = (stack.max(axis=0) - stack.min(axis=0)) / stack.max(axis=0)
        spread = float(rel[late].max()) if np.any(late) else float(rel.max())
    return {
        "R": res.R, "eps": res.params.eps, "kappa": res.params.kappa,
        "n_trajectories": len(curves), "failures": len(res.failures),
        "envelope_violations": total_violations if res.curve is not None else None,
        "max_envelope_ratio": worst_ratio if res.curve is not None else None,
        "max_final_abs_w": float(max(finals)) if finals else math.nan,
        "asymptotic_bound": res.asymptotic,
        "relative_spread": spread,
        "position_independent": bool(spread < SPREAD_THRESHOLD) if spread == spread else None,
        "truncation_order": res.curve.J if res.curve is not None else None,
        "truncation_bound": res.curve.truncation_bound if res.curve is not None else None,
        "particles": rows,
    }


def write_trajectory(path, rec: TrajectoryRecord, curve, asym, stride) -> Path:
    sl = slice(None, None, max(1, stride))
    env = curve.envelope[sl] if curve is not None else np.full(rec.tau[sl].size, math.nan)
    return io.write_csv(path, io.TRAJECTORY_COLUMNS, {
        "tau": rec.tau[sl], "t_phys": rec.t_phys[sl],
        "y1": rec.y[sl, 0], "y2": rec.y[sl, 1], "w1": rec.w[sl, 0], "w2": rec.w[sl, 1],
        "abs_w": rec.abs_w[sl], "v1": rec.v[sl, 0], "v2": rec.v[sl, 1],
        "envelope": env, "asymptotic_bound": math.nan if asym is None else asym,
    })


def write_envelope(path, curve: envelope.EnvelopeCurve, stride=1) -> Path:
    sl = slice(None, None, max(1, stride))
    return io.write_csv(path, io.ENVELOPE_COLUMNS, {
        "tau": curve.tau[sl], "envelope": curve.envelope[sl], "series_part": curve.series_part[sl],
        "phi_part": curve.phi_part[sl], "const_part": curve.const_part,
        "truncation_bound": curve.truncation_bound,
    })


_SUMMARY_HEADER = ("R", "particle", "y0_1", "y0_2", "final_abs_w", "max_abs_w", "violations",
                   "max_envelope_ratio", "decay_slope", "domain_exit")


def run_simulations(cfg: ExperimentConfig, out_dir, threads=None, command="simulate"):
    """Run every configured density ratio and write trajectories, envelopes and a summary."""
    out = Path(out_dir)
    manifest = io.RunManifest(command, cfg.config_hash(), __version__)
    t_start = time.perf_counter()
    results = _map(lambda R: run_ensemble(cfg, R), list(cfg.particle.R), thread_count(threads, cfg))
    stride = cfg.output.output_every
    summary_rows = []
    for res in results:
        tag = r_tag(res.R)
        for i, rec in enumerate(res.records):
            if rec is not None:
                manifest.add_output(write_trajectory(out / tag / f"traj_{i:02d}.csv", rec, res.curve,
                                                     res.asymptotic, stride))
        if res.curve is not None:
            manifest.add_output(write_envelope(out / tag / "envelope.csv", res.curve, stride))
        manifest.bounds[tag] = res.bounds.as_dict()
        manifest.metrics[tag] = {k: v for k, v in res.summary.items() if k != "particles"}
        manifest.wall_clock[tag] = res.seconds
        manifest.failures.extend(res.failures)
        for row in res.summary["particles"]:
            summary_rows.append([res.R] + [row[k] for k in _SUMMARY_HEADER[1:]])
    manifest.add_output(io.write_rows(out / "summary.csv", _SUMMARY_HEADER, summary_rows))
    manifest.wall_clock["total"] = time.perf_counter() - t_start
    manifest.write(out / "manifest.json")
    return manifest, results


def run_fig3(cfg: ExperimentConfig, out_dir, threads=None):
    return run_simulations(cfg, out_dir, threads, command="fig3")


# -- envelope-only experiments ---------------------------------------------------------

def envelope_at_large_tau(params, bounds, w0_norm, tau, omit_eps2, tol=1e-6) -> float:
    """Envelope value far beyond the computed grid.

    Uses ``psi^{*j}(tau) ~ j psi(tau)``, the leading behaviour of convolution
    powers of an integrable kernel with unit mass and algebraic tail.
    """
    eps_lm = params.eps * bounds.L_M
    J = envelope.truncation_order(eps_lm, tol)
    kernel = RelaxationKernel(params.kappa)
    psi = float(kernel.psi(tau))
    series = sum(eps_lm ** (j - 1) * j * psi for j in range(1, J + 1))
    const = 0.0 if omit_eps2 else params.eps * eps_lm * bounds.L_B / (1.0 - eps_lm)
    return w0_norm * series + params.eps * bounds.L_B * (1.0 - float(kernel.phi(tau))) + const


def run_fig4(cfg: ExperimentConfig, out_dir, threads=None):
    out = Path(out_dir)
    f4 = cfg.fig4
    manifest = io.RunManifest("fig4", cfg.config_hash(), __version__)
    w0_norm = float(np.linalg.norm(cfg.ensemble.w0))
    grid = np.arange(int(round(f4.tau_end / f4.dt)) + 1) * f4.dt
    t_start = time.perf_counter()

    def job(R):
        fields = build_fields(cfg, R)
        bounds = bounds_for(cfg, fields)
        curve = envelope.envelope_curve(fields.params, bounds, w0_norm, grid, cfg.envelope.tol,
                                        omit_eps2=f4.omit_eps2)
        return fields.params, bounds, curve

    results = _map(job, list(f4.R), thread_count(threads, cfg))
    for R, (params, bounds, curve) in zip(f4.R, results):
        tag = r_tag(R)
        manifest.add_output(write_envelope(out / f"envelope_{tag}.csv", curve, cfg.output.output_every))
        asym = envelope.asymptotic_bound(params, bounds)
        plateau = envelope_at_large_tau(params, bounds, w0_norm, f4.plateau_tau, omit_eps2=False,
                                        tol=cfg.envelope.tol)
        manifest.bounds[tag] = bounds.as_dict()
        manifest.metrics[tag] = {
            "R": R, "kappa": params.kappa, "eps": params.eps,
            "slope": fit_loglog_slope(curve.tau, curve.envelope, f4.slope_window),
            "slope_window": list(f4.slope_window),
            "initial_value": float(curve.envelope[0]),
            "asymptotic_bound": asym,
            "plateau_tau": f4.plateau_tau,
            "plateau_value": plateau,
            "plateau_relative_gap": abs(plateau - asym) / asym if asym > 0 else abs(plateau),
            "limit_with_eps2": curve.eps * curve.L_B * (1.0 + curve.eps * curve.L_M / (1.0 - curve.eps * curve.L_M)),
            "J": curve.J,
        }
    manifest.wall_clock["total"] = time.perf_counter() - t_start
    manifest.write(out / "manifest.json")
    return manifest


def run_relaxation_table(cfg: ExperimentConfig, out_dir):
    out = Path(out_dir)
    t = cfg.table
    manifest = io.RunManifest("relaxation-table", cfg.config_hash(), __version__)
    tau = np.concatenate([[0.0], np.logspace(math.log10(t.tau_min), math.log10(t.tau_max), t.points)])
    kappas = t.kappa if t.kappa else tuple(build_params(cfg, R).kappa for R in cfg.particle.R)
    for kappa in kappas:
        kernel = RelaxationKernel(kappa)
        asym = np.full(tau.shape, math.nan)
        asym[1:] = kernel.psi_asymptotic(tau[1:])
        path = io.write_csv(out / f"relaxation_kappa{kappa:.6g}.csv", io.RELAXATION_COLUMNS,
                            {"tau": tau, "psi": kernel.psi(tau), "phi": kernel.phi(tau), "psi_asymptotic": asym})
        manifest.add_output(path)
    manifest.write(out / "manifest.json")
    return manifest


def run_envelope(cfg: ExperimentConfig, out_dir, threads=None):
    out = Path(out_dir)
    manifest = io.RunManifest("envelope", cfg.config_hash(), __version__)
    scfg = solver_config(cfg)
    grid = np.arange(scfg.n_steps + 1) * scfg.dt
    w0_norm = float(np.linalg.norm(cfg.ensemble.w0))
    for R in cfg.particle.R:
        fields = build_fields(cfg, R)
        bounds = bounds_for(cfg, fields)
        curve = envelope.envelope_curve(fields.params, bounds, w0_norm, grid, cfg.envelope.tol,
                                        cfg.envelope.omit_eps2)
        tag = r_tag(R)
        manifest.add_output(write_envelope(out / f"envelope_{tag}.csv", curve, cfg.output.output_every))
        manifest.bounds[tag] = bounds.as_dict()
        cert = None
        if bounds.L_c is not None:
            cert = envelope.continuation_window(fields.params, bounds, w0_norm).as_dict()
        manifest.metrics[tag] = {
            "J": curve.J, "truncation_bound": curve.truncation_bound,
            "asymptotic_bound": envelope.asymptotic_bound(fields.params, bounds),
            "sup_bound": envelope.sup_bound(fields.params, bounds, w0_norm),
            "continuation": cert,
        }
    manifest.write(out / "manifest.json")
    return manifest


def run_bounds(cfg: ExperimentConfig, out_dir, threads=None):
    out = Path(out_dir)
    manifest = io.RunManifest("bounds", cfg.config_hash(), __version__)
    for R in cfg.particle.R:
        fields = build_fields(cfg, R)
        bounds = bounds_for(cfg, fields)
        manifest.bounds[r_tag(R)] = bounds.as_dict()
    manifest.add_output(io.write_json(out / "bounds.json", manifest.bounds))
    manifest.write(out / "manifest.json")
    return manifest


# -- restarts ---------------------------------------------------------------------------

def sup_gap(a: TrajectoryRecord, b: TrajectoryRecord, tau_from: float, tau_to: float) -> float:
    """Sup norm of ``w_a - w_b`` over the shared nodes in ``[tau_from, tau_to]``."""
    dt = a.dt
    ia = np.rint((b.tau - a.tau[0]) / dt).astype(int)
    ok = (ia >= 0) & (ia < a.tau.size) & (b.tau >= tau_from - 1e-9 * dt) & (b.tau <= tau_to + 1e-9 * dt)
    if not np.any(ok):
        raise DomainError("records share no nodes in the requested window")
    return float(np.max(np.abs(a.w[ia[ok]] - b.w[ok])))


def restart_gaps(fields, y0, w0, scfg: SolverConfig, tau1: float, window: float) -> dict:
    original = simulate(fields, y0, w0, scfg.replace(tau_end=tau1 + window))
    discard = restart_discard_history(original, tau1)
    replay = restart_replay_history(original, tau1)
    return {
        "discard_gap": sup_gap(original, discard, tau1, tau1 + window),
        "replay_gap": sup_gap(original, replay, tau1, tau1 + window),
        "records": (original, discard, replay),
    }


def run_restart_demo(cfg: ExperimentConfig, out_dir, threads=None):
    out = Path(out_dir)
    r = cfg.restart
    manifest = io.RunManifest("restart-demo", cfg.config_hash(), __version__)
    w0 = np.asarray(cfg.ensemble.w0, dtype=float)
    scfg = solver_config(cfg, dt=r.dt)
    fields = build_fields(cfg, r.R)
    main = restart_gaps(fields, r.y0, w0, scfg, r.tau1, r.window)
    names = ("original", "discard_history", "replay_history")
    for name, rec in zip(names, main["records"]):
        manifest.add_output(write_trajectory(out / f"{name}.csv", rec, None, None, 1))
    control_params = ParticleParams.memoryless(r.R, cfg.particle.St_over_R * r.R, cfg.particle.Re,
                                               kappa=0.0, g_scaled=cfg.particle.g)
    control = restart_gaps(derived_fields(fields.flow, control_params, cfg.solver.faxen), r.y0, w0, scfg,
                           r.tau1, r.window)
    original = main["records"][0]
    zero_replay = restart_replay_history(original, 0.0)
    manifest.metrics = {
        "tau1": r.tau1, "window": r.window, "tolerance": r.tolerance,
        "discard_gap": main["discard_gap"], "replay_gap": main["replay_gap"],
        "memoryless_discard_gap": control["discard_gap"],
        "zero_replay_gap": float(np.max(np.abs(zero_replay.w - original.w))),
    }
    manifest.write(out / "manifest.json")
    return manifest


def chain_windows(fields, y0, w0, scfg: SolverConfig, window: float) -> dict:
    """Continue a run in windows of length ``window`` by history replay.

    Each window is compared with the uninterrupted run on the same grid.
    """
    steps = max(1, int(math.floor(window / scfg.dt + 1e-9)))
    reference = simulate(fields, y0, w0, scfg)
    first_end = min(steps, scfg.n_steps) * scfg.dt
    rec = simulate(fields, y0, w0, scfg.replace(tau_end=first_end))
    gaps = [float(np.max(np.abs(rec.w - reference.w[: rec.tau.size])))]
    n = rec.tau.size - 1
    while n < scfg.n_steps:
        n_next = min(n + steps, scfg.n_steps)
        rec = restart_replay_history(rec, rec.tau[n], scfg.replace(tau_end=n_next * scfg.dt))
        gaps.append(float(np.max(np.abs(rec.w[n:] - reference.w[n: n_next + 1]))))
        n = n_next
    return {"windows": len(gaps), "steps_per_window": steps, "max_gap": max(gaps), "gaps": gaps}
