"""Time stepping for the rescaled particle system.

In scaled time ``tau`` (physical time ``t = t0 + eps tau``)::

    dy/dtau = eps (w + A(y, t))
    w' + kappa d^{1/2} w + w = eps (-M(y, t) w + B(y, t))

Two backends integrate the relative velocity ``w`` on a uniform grid:

``fractional_direct``
    The equation integrated once from 0.  The half-derivative becomes the
    Abel integral ``int_0^tau w(s)/sqrt(tau - s) ds / sqrt(pi)``, discretized
    with weights exact for piecewise-linear ``w``; the local terms use the
    trapezoidal rule.
``mild_volterra``
    The variation-of-constants form ``w = psi w0 + eps int psi(tau - s) F(s) ds``
    with ``F = -M w + B`` and product weights of ``psi`` against
    piecewise-linear ``F``, corrected on the first nodes for the square-root
    behaviour of ``F`` near 0.

Both treat the new node implicitly in ``w`` (a 2x2 solve) and close the
position update, a trapezoidal step, by fixed-point iteration.

Every quantity the history terms depend on is stored per node, so a run can
be resumed from any node and reproduce the uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, quadrature
from .errors import BlowUpError, DomainError, StepFailure
from .flow import DerivedFields, FieldBounds
from .params import ParticleParams
from .relaxation import RelaxationKernel

log = logging.getLogger(__name__)

BACKENDS = ("fractional_direct", "mild_volterra")
SQRT_PI = math.sqrt(math.pi)
# a node is "on the grid" if tau / dt is this close to an integer
_NODE_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "mild_volterra"
    dt: float = 5e-3
    tau_end: float = 1000.0
    picard_tol: float = 1e-12
    picard_max_iters: int = 50
    faxen: bool = False
    t0: float = 0.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise DomainError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise DomainError(f"dt must be positive, got {self.dt!r}")
        if not (self.tau_end >= self.dt and math.isfinite(self.tau_end)):
            raise DomainError("tau_end must be finite and >= dt")
        if not self.picard_tol > 0.0:
            raise DomainError("picard_tol must be positive")
        if self.picard_max_iters < 1:
            raise DomainError("picard_max_iters must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.tau_end / self.dt))

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class HistoryBuffer:
    """Samples on the uniform grid plus the lag-indexed weights that act on them.

    ``samples`` has one row per node; column blocks of two belong to one
    particle.  ``filled`` is the number of valid rows.
    """

    weights: quadrature.HatWeights
    samples: np.ndarray
    filled: int = 0

    @property
    def capacity(self) -> int:
        return self.samples.shape[0]

    def push(self, row):
        self.samples[self.filled] = row
        self.filled += 1

    def weighted_sum(self, n, out):
        """History part of the product rule for right endpoint ``n`` (rows ``0..n-1``)."""
        return _kernels.history_sum(self.weights.k_int, self.weights.k_end, self.samples, n, out)


@dataclass
class TrajectoryRecord:
    """One particle path with everything needed to continue it exactly.

    ``tau`` is absolute scaled time; ``t_phys = t0 + eps * tau``.  ``history``
    holds the per-node samples the memory term acts on: ``w`` for
    ``fractional_direct`` and ``F = -M w + B`` for ``mild_volterra``.  The
    entire buffer is required for exact continuation.
    """

    tau: np.ndarray
    y: np.ndarray
    w: np.ndarray
    v: np.ndarray
    domain_exit_flag: bool
    params: ParticleParams
    config: SolverConfig
    fields: DerivedFields | None = field(repr=False, default=None)
    history: np.ndarray | None = field(repr=False, default=None)
    A: np.ndarray | None = field(repr=False, default=None)
    G: np.ndarray | None = field(repr=False, default=None)
    cum_w: np.ndarray | None = field(repr=False, default=None)
    cum_g: np.ndarray | None = field(repr=False, default=None)
    w_origin: np.ndarray | None = field(repr=False, default=None)
    tau_origin: float = 0.0

    @property
    def t_phys(self) -> np.ndarray:
        return self.config.t0 + self.params.eps * self.tau

    @property
    def abs_w(self) -> np.ndarray:
        return np.linalg.norm(self.w, axis=-1)

    @property
    def dt(self) -> float:
        return self.config.dt

    def node_of(self, tau1: float) -> int:
        """Index of grid node ``tau1``; raises if it is not on this record's grid."""
        rel = (tau1 - self.tau[0]) / self.dt
        n = int(round(rel))
        if abs(rel - n) > _NODE_TOL * max(1.0, abs(rel)) or not (0 <= n < self.tau.size):
            raise DomainError(f"tau1={tau1!r} is not a node of [{self.tau[0]}, {self.tau[-1]}]")
        return n


# -- linear algebra helpers -------------------------------------------------------

def _solve_2x2(diag, coupling, rhs):
    """Solve ``(diag I + coupling) x = rhs`` for stacks of 2x2 systems."""
    a = diag + coupling[:, 0, 0]
    b = coupling[:, 0, 1]
    c = coupling[:, 1, 0]
    d = diag + coupling[:, 1, 1]
    det = a * d - b * c
    x0 = (d * rhs[:, 0] - b * rhs[:, 1]) / det
    x1 = (a * rhs[:, 1] - c * rhs[:, 0]) / det
    return np.stack([x0, x1], axis=-1)


def _matvec(m, x):
    return np.einsum("pij,pj->pi", m, x)


# -- the integrator ----------------------------------------------------------------

class _Integrator:
    """Batched stepping of ``P`` particles sharing a grid and parameters."""

    def __init__(self, fields: DerivedFields, config: SolverConfig, n_particles: int, n_steps: int):
        self.fields = fields
        self.params = fields.params
        self.config = config
        self.P = n_particles
        self.N = n_steps
        self.dt = config.dt
        eps = self.params.eps
        kappa = self.params.kappa
        shape = (n_steps + 1, n_particles, 2)
        self.y = np.empty(shape)
        self.w = np.empty(shape)
        self.A = np.empty(shape)
        self.G = np.empty(shape)
        self.cum_w = np.zeros(shape)
        self.cum_g = np.zeros(shape)
        if config.backend == "fractional_direct":
            weights = quadrature.abel_weights(max(n_steps, 1), self.dt)
            self.memory = kappa / SQRT_PI
            self.diag = 1.0 + self.memory * weights.k_diag + 0.5 * self.dt
            # without memory the solution is smooth and needs no starting weights
            self.start_abel = self.start_trap = None
            if kappa > 0.0:
                abel = quadrature.abel_starting_weights(max(n_steps, 1), self.dt)
                self.start_abel = abel.weights
                self.start_trap = quadrature.trapezoid_starting_weights(max(n_steps, 1), self.dt).weights
                self.start_nodes = abel.nodes
                self.block_end = 3 if abel.block else 0
            else:
                self.block_end = 0
        else:
            self.block_end = 0
            self.kernel = RelaxationKernel(kappa)
            weights = self.kernel.hat_weights(max(n_steps, 1), self.dt)
            self.psi = np.atleast_1d(self.kernel.psi(np.arange(n_steps + 1) * self.dt))
            self.r0 = weights.k_diag
            self.start_psi = None
            if kappa > 0.0:
                start = self.kernel.starting_weights(weights)
                self.start_psi = start.weights
                self.start_nodes = start.nodes
                self.block_end = 3 if start.block else 0
        # position increments pick up the same s^{1/2}, s^{3/2} terms through w and A(y)
        self.start_position = None
        if kappa > 0.0:
            trap = quadrature.trapezoid_starting_weights(max(n_steps, 1), self.dt).weights
            self.start_position = np.diff(trap, axis=0, prepend=0.0)
        self.history = HistoryBuffer(weights, np.empty((n_steps + 1, 2 * n_particles)))
        self._hsum = np.empty(2 * n_particles)
        self.eps = eps

    def time(self, n):
        return self.config.t0 + self.eps * (self.tau_origin + n * self.dt)

    def start(self, y0, w0, tau_origin=0.0):
        self.tau_origin = tau_origin
        self.w0 = w0.copy()
        A, B, M = self.fields.evaluate(y0, self.time(0))
        self.y[0], self.w[0], self.A[0] = y0, w0, A
        self.G[0] = _matvec(M, w0) - B
        hist_row = w0 if self.config.backend == "fractional_direct" else -self.G[0]
        self.history.push(hist_row.ravel())
        self.n = 0

    def resume(self, rec_arrays, n1, w_origin, tau_origin):
        """Load nodes ``0..n1`` of a previous run (arrays stacked over particles)."""
        self.tau_origin = tau_origin
        self.w0 = w_origin.copy()
        for name in ("y", "w", "A", "G", "cum_w", "cum_g"):
            getattr(self, name)[: n1 + 1] = rec_arrays[name][: n1 + 1]
        self.history.samples[: n1 + 1] = rec_arrays["history"][: n1 + 1]
        self.history.filled = n1 + 1
        # inside the starting block the uninterrupted run solved nodes 1..3 jointly; redo it
        self.n = n1 if n1 >= self.block_end else 0

    def run(self):
        if self.n < self.block_end <= self.N:
            self._solve_start_block()
        for n in range(self.n + 1, self.N + 1):
            self.step(n)
        self.n = self.N

    def _solve_start_block(self):
        """Nodes 1..3 by Gauss-Seidel sweeps; their starting corrections couple them."""
        cfg = self.config
        last = self.block_end
        for j in range(1, last + 1):
            self.y[j], self.w[j], self.A[j], self.G[j] = self.y[0], self.w[0], self.A[0], self.G[0]
        for _ in range(cfg.picard_max_iters):
            before = np.concatenate([self.w[1: last + 1], self.y[1: last + 1]])
            for n in range(1, last + 1):
                self.step(n)
            after = np.concatenate([self.w[1: last + 1], self.y[1: last + 1]])
            change = float(np.max(np.abs(after - before) / (1.0 + np.abs(before))))
            if change <= cfg.picard_tol:
                break
        else:
            raise StepFailure(last, change)
        self.n = last

    def step(self, n):
        cfg = self.config
        dt, eps = self.dt, self.eps
        h = self.history.weighted_sum(n, self._hsum).reshape(self.P, 2)
        w_prev, A_prev, G_prev = self.w[n - 1], self.A[n - 1], self.G[n - 1]
        if cfg.backend == "fractional_direct":
            base = (self.w0 - self.memory * h - self.cum_w[n - 1] - 0.5 * dt * w_prev
                    - eps * self.cum_g[n - 1] - eps * 0.5 * dt * G_prev)
            diag, beta = self.diag, eps * 0.5 * dt
            if self.start_abel is not None:
                ca, ct = self.start_abel[n], self.start_trap[n]
                for j in range(self.start_nodes(n)):
                    if j == n:
                        diag = diag + self.memory * ca[n] + ct[n]
                        beta = beta + eps * ct[n]
                    else:
                        # j > n only inside the starting block: the latest sweep's value
                        base = base - (self.memory * ca[j] + ct[j]) * self.w[j] - eps * ct[j] * self.G[j]
        else:
            base = self.psi[n] * self.w0 + eps * h
            diag, beta = 1.0, eps * self.r0
            if self.start_psi is not None:
                cp = self.start_psi[n]
                for j in range(self.start_nodes(n)):
                    if j == n:
                        beta = beta + eps * cp[n]
                    else:
                        base = base - eps * cp[j] * self.G[j]

        y_old = self.y[n - 1]
        drift_old = w_prev + A_prev
        y_base = y_old + 0.5 * eps * dt * drift_old
        y_self = 0.5 * eps * dt
        if self.start_position is not None:
            cy = self.start_position[n]
            for j in range(self.start_nodes(n)):
                if j == n:
                    y_self = y_self + eps * cy[n]
                else:
                    y_base = y_base + eps * cy[j] * (self.w[j] + self.A[j])
        y_k = y_old + eps * dt * drift_old
        t_n = self.time(n)
        scale = 1.0 + np.abs(y_old)
        for _ in range(cfg.picard_max_iters):
            A, B, M = self.fields.evaluate(y_k, t_n)
            w_k = _solve_2x2(diag, beta * M, base + beta * B)
            y_next = y_base + y_self * (w_k + A)
            resid = float(np.max(np.abs(y_next - y_k) / scale))
            if not math.isfinite(resid):
                raise BlowUpError(n)
            if resid <= cfg.picard_tol:
                break
            y_k = y_next
        else:
            raise StepFailure(n, resid)
        if not (np.all(np.isfinite(w_k)) and np.all(np.isfinite(y_k))):
            raise BlowUpError(n)

        G = _matvec(M, w_k) - B
        self.y[n], self.w[n], self.A[n], self.G[n] = y_k, w_k, A, G
        self.cum_w[n] = self.cum_w[n - 1] + 0.5 * dt * (w_prev + w_k)
        self.cum_g[n] = self.cum_g[n - 1] + 0.5 * dt * (G_prev + G)
        self.history.samples[n] = (w_k if cfg.backend == "fractional_direct" else -G).ravel()
        self.history.filled = n + 1

    def records(self, tau_offset=0.0):
        tau = tau_offset + np.arange(self.N + 1) * self.dt
        t_phys = self.config.t0 + self.eps * tau
        out = []
        flow = self.fields.flow
        hist = self.history.samples.reshape(self.N + 1, self.P, 2)
        for p in range(self.P):
            y = self.y[:, p].copy()
            w = self.w[:, p].copy()
            v = self.fields.particle_velocity(y, t_phys, w)
            out.append(TrajectoryRecord(
                tau=tau, y=y, w=w, v=v,
                domain_exit_flag=bool(not np.all(flow.in_domain(y))),
                params=self.params, config=self.config, fields=self.fields,
                history=hist[:, p].copy(), A=self.A[:, p].copy(), G=self.G[:, p].copy(),
                cum_w=self.cum_w[:, p].copy(), cum_g=self.cum_g[:, p].copy(),
                w_origin=self.w0[p].copy(), tau_origin=self.tau_origin,
            ))
        return out


def _check_inputs(fields, config, bounds):
    if fields.faxen_enabled != config.faxen:
        raise DomainError("config.faxen must match the derived fields")
    if bounds is not None and fields.params.eps * bounds.L_M >= 1.0:
        warnings.warn(
            f"eps*L_M = {fields.params.eps * bounds.L_M:.3g} >= 1: the decay bounds do not apply",
            stacklevel=3,
        )


def _as_batch(values, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError(f"{name} must have shape (2,) or (P, 2)")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def simulate_ensemble(fields: DerivedFields, y0, w0, config: SolverConfig,
                      bounds: FieldBounds | None = None) -> list[TrajectoryRecord]:
    """Integrate several particles at once (vectorized field evaluation).

    ``y0`` has shape ``(P, 2)``; ``w0`` is ``(2,)`` (shared) or ``(P, 2)``.
    Particles do not interact, so each record equals a single-particle run
    up to floating-point rounding in the batched field evaluation.
    """
    _check_inputs(fields, config, bounds)
    y0 = _as_batch(y0, "y0")
    w0 = np.broadcast_to(_as_batch(w0, "w0"), y0.shape).copy()
    integ = _Integrator(fields, config, y0.shape[0], config.n_steps)
    integ.start(y0, w0)
    integ.run()
    return integ.records()


def simulate(fields: DerivedFields, y0, w0, config: SolverConfig,
             bounds: FieldBounds | None = None) -> TrajectoryRecord:
    """Integrate one particle from ``(y0, w0)`` at ``tau = 0`` to ``config.tau_end``.

    Raises
    ------
    StepFailure
        The position closure did not converge within ``picard_max_iters``.
    BlowUpError
        The state became non-finite.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (2,):
        raise DomainError("y0 must have shape (2,)")
    return simulate_ensemble(fields, y0, w0, config, bounds)[0]


def _stack(record, names):
    return {name: getattr(record, name)[:, None, :] for name in names}


def restart_discard_history(record: TrajectoryRecord, tau1: float,
                            config: SolverConfig | None = None) -> TrajectoryRecord:
    """Start afresh from ``(y(tau1), w(tau1))`` with an empty history.

    The new run covers ``[tau1, config.tau_end]`` in absolute scaled time,
    so its physical clock continues from ``t0 + eps tau1``.
    """
    config = config or record.config
    n1 = record.node_of(tau1)
    tau1 = float(record.tau[n1])
    remaining = int(round(config.tau_end / config.dt)) - int(round(tau1 / config.dt))
    if remaining < 1:
        raise DomainError("tau1 must lie before config.tau_end")
    integ = _Integrator(record.fields, config, 1, remaining)
    integ.start(record.y[n1][None, :], record.w[n1][None, :], tau_origin=tau1)
    integ.run()
    return integ.records(tau_offset=tau1)[0]


def restart_replay_history(record: TrajectoryRecord, tau1: float,
                           config: SolverConfig | None = None) -> TrajectoryRecord:
    """Continue ``record`` from node ``tau1`` keeping its full history.

    The result covers the record's own origin up to ``config.tau_end`` and
    coincides with an uninterrupted run on the same grid.
    """
    config = config or record.config
    if not math.isclose(config.dt, record.dt, rel_tol=0.0, abs_tol=0.0):
        raise DomainError("replay requires the record's step size")
    if config.backend != record.config.backend:
        raise DomainError("replay requires the record's backend")
    n1 = record.node_of(tau1)
    total = int(round((config.tau_end - record.tau_origin) / config.dt))
    if total < n1:
        raise DomainError("config.tau_end lies before tau1")
    integ = _Integrator(record.fields, config, 1, total)
    arrays = _stack(record, ("y", "w", "A", "G", "cum_w", "cum_g"))
    arrays["history"] = record.history
    integ.resume(arrays, n1, record.w_origin[None, :], record.tau_origin)
    integ.run()
    return integ.records(tau_offset=record.tau_origin)[0]


def recover_particle_velocity(record: TrajectoryRecord) -> np.ndarray:
    """``v = w + u`` along the path, plus the Laplacian term when Faxen is on."""
    return record.fields.particle_velocity(record.y, record.t_phys, record.w)


# -- convergence --------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceResult:
    backend: str
    dts: tuple
    errors: tuple
    orders: tuple
    conclusive: bool

    @property
    def order(self) -> float:
        """Order observed between the two finest steps."""
        return self.orders[-1] if self.orders else math.nan


def convergence_study(fields: DerivedFields, y0, w0, dt_list, config: SolverConfig,
                      reference=None, backends=BACKENDS) -> dict:
    """Observed convergence orders of each backend under step refinement.

    ``reference`` maps an array of ``tau`` values to exact ``w`` (shape
    ``(n, 2)``); without it the finest run of each backend is the reference
    and the finest step is excluded from the error table.  Errors are sup
    norms over the nodes of the coarsest grid.  A non-monotone error sequence
    marks the result inconclusive.
    """
    dts = sorted((float(d) for d in dt_list), reverse=True)
    if len(dts) < 3:
        raise DomainError("convergence study needs at least three step sizes")
    coarse = dts[0]
    results = {}
    for backend in backends:
        runs = []
        for dt in dts:
            rec = simulate(fields, y0, w0, config.replace(backend=backend, dt=dt))
            stride = int(round(coarse / dt))
            runs.append((rec.tau[::stride], rec.w[::stride]))
        if reference is None:
            ref_w = runs[-1][1]
            runs, used = runs[:-1], dts[:-1]
        else:
            used = dts
            ref_w = None
        errors = []
        for tau, w in runs:
            exact = ref_w if ref_w is not None else np.asarray(reference(tau))
            errors.append(float(np.max(np.abs(w - exact))))
        orders = tuple(
            math.log(errors[i] / errors[i + 1]) / math.log(used[i] / used[i + 1])
            if errors[i + 1] > 0.0 and errors[i] > 0.0 else math.inf
            for i in range(len(errors) - 1)
        )
        monotone = all(errors[i + 1] < errors[i] for i in range(len(errors) - 1))
        results[backend] = ConvergenceResult(backend, tuple(used), tuple(errors), orders, monotone)
    return results


# -- checkpoints ------------------------------------------------------------------

_CHECKPOINT_ARRAYS = ("tau", "y", "w", "v", "history", "A", "G", "cum_w", "cum_g", "w_origin")


def save_checkpoint(record: TrajectoryRecord, path) -> None:
    """Write a self-describing ``.npz`` with the full history buffer.

    The flow itself is not serialized; pass the same derived fields to
    :func:`load_checkpoint`.
    """
    meta = {
        "params": record.params.as_dict(),
        "config": record.config.as_dict(),
        "tau_origin": record.tau_origin,
        "domain_exit_flag": record.domain_exit_flag,
        "flow": repr(record.fields.flow) if record.fields is not None else None,
        "kernel_impl": _kernels.implementation(),
    }
    arrays = {name: getattr(record, name) for name in _CHECKPOINT_ARRAYS}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, fields: DerivedFields) -> TrajectoryRecord:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {name: data[name].copy() for name in _CHECKPOINT_ARRAYS}
    params = ParticleParams.from_dict(meta["params"])
    if params != fields.params:
        raise DomainError("checkpoint parameters differ from the supplied fields")
    return TrajectoryRecord(
        params=params, config=SolverConfig(**meta["config"]), fields=fields,
        domain_exit_flag=meta["domain_exit_flag"], tau_origin=meta["tau_origin"], **arrays,
    )
