"""Velocity fields, the forcing terms of the relative-velocity equation and their bounds.

A :class:`FlowField` returns a :class:`FlowSample` with the velocity and the
derivative blocks the particle equation needs.  All evaluations are
vectorized: positions have shape ``(..., 2)`` and times broadcast against
the leading axes.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DomainError, OutOfDomainError
from .params import ParticleParams

log = logging.getLogger(__name__)

FIRST_ORDER = 1
# grad of the Laplacian needs third derivatives of u
THIRD_ORDER = 3


@dataclass(frozen=True)
class FlowSample:
    """Velocity and derivative blocks at a batch of points.

    ``grad_u[..., i, j] = d u_i / d x_j``.  The Laplacian blocks are ``None``
    for fields that only provide first-order information.
    """

    u: np.ndarray
    grad_u: np.ndarray
    DuDt: np.ndarray
    lap_u: np.ndarray | None = None
    grad_lap_u: np.ndarray | None = None
    DlapuDt: np.ndarray | None = None


class FlowField:
    """Base class for evaluatable velocity fields.

    Subclasses implement :meth:`_evaluate` and set ``derivative_order``,
    ``domain`` (tuple of ``(lo, hi)`` per axis) and ``period`` (``None`` when
    aperiodic).
    """

    derivative_order: int = FIRST_ORDER
    domain: tuple = ((-math.inf, math.inf), (-math.inf, math.inf))
    period: float | None = None

    def evaluate(self, x, t, strict: bool = False, order: int = THIRD_ORDER) -> FlowSample:
        """Evaluate at positions ``x`` and times ``t``.

        With ``strict=True`` positions outside :attr:`domain` (boundary
        inclusive) raise :class:`OutOfDomainError`; otherwise the analytic
        expressions are used as they stand.  ``order=FIRST_ORDER`` skips the
        Laplacian blocks.
        """
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if strict:
            self.check_domain(x)
        return self._evaluate(x, t, min(order, self.derivative_order))

    def in_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.ones(x.shape[:-1], dtype=bool)
        for axis, (lo, hi) in enumerate(self.domain):
            inside &= (x[..., axis] >= lo) & (x[..., axis] <= hi)
        return inside

    def check_domain(self, x):
        inside = self.in_domain(x)
        if not np.all(inside):
            bad = np.asarray(x)[~inside][0]
            raise OutOfDomainError(tuple(float(c) for c in bad), self.domain)

    def _evaluate(self, x, t, order) -> FlowSample:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class UniformFlow(FlowField):
    """Spatially and temporally constant velocity; ``velocity=(0, 0)`` is the frozen fluid."""

    velocity: tuple = (0.0, 0.0)
    derivative_order: int = field(default=THIRD_ORDER, init=False)

    def _evaluate(self, x, t, order):
        shape = np.broadcast_shapes(x.shape[:-1], t.shape)
        u = np.broadcast_to(np.asarray(self.velocity, dtype=float), shape + (2,)).copy()
        zero_vec = np.zeros(shape + (2,))
        zero_mat = np.zeros(shape + (2, 2))
        return FlowSample(u, zero_mat, zero_vec, zero_vec.copy(), zero_mat.copy(), zero_vec.copy())


@dataclass(frozen=True)
class DoubleGyre(FlowField):
    """Periodically forced double gyre on ``[0, 2] x [0, 1]``.

    Stream function ``H = A sin(pi f(x, t)) sin(pi y)`` with
    ``f = a(t) x^2 + b(t) x``, ``a = alpha sin(omega t)``, ``b = 1 - 2 a``, and
    ``u = (-dH/dy, dH/dx)``.
    """

    A: float = 0.1
    omega: float = math.pi
    alpha: float = 0.01
    derivative_order: int = field(default=THIRD_ORDER, init=False)
    domain: tuple = field(default=((0.0, 2.0), (0.0, 1.0)), init=False)

    def __post_init__(self):
        for name in ("A", "omega", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if self.omega <= 0.0:
            raise DomainError("omega must be positive")

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega

    def _x_factor(self, xs, t, order=THIRD_ORDER):
        """``S = sin(pi f)``, its x-derivatives up to 4 and mixed t-derivatives up to 3.

        With ``order=FIRST_ORDER`` only ``S, S_x, S_xx, S_t, S_xt`` are computed.
        """
        pi = math.pi
        s_wt = np.sin(self.omega * t)
        a = self.alpha * s_wt
        b = 1.0 - 2.0 * a
        a_t = self.alpha * self.omega * np.cos(self.omega * t)
        b_t = -2.0 * a_t

        p = pi * (a * xs * xs + b * xs)
        px = pi * (2.0 * a * xs + b)
        pxx = 2.0 * pi * a
        pt = pi * (a_t * xs * xs + b_t * xs)
        pxt = pi * (2.0 * a_t * xs + b_t)
        pxxt = 2.0 * pi * a_t
        sn, cs = np.sin(p), np.cos(p)

        s0 = sn
        s1 = cs * px
        s2 = -sn * px**2 + cs * pxx
        s0t = cs * pt
        s1t = -sn * pt * px + cs * pxt
        if order < THIRD_ORDER:
            return (s0, s1, s2, None, None), (s0t, s1t, None, None)
        s3 = -cs * px**3 - 3.0 * sn * px * pxx
        s4 = sn * px**4 - 6.0 * cs * px**2 * pxx - 3.0 * sn * pxx**2
        s2t = -cs * pt * px**2 - 2.0 * sn * px * pxt - sn * pt * pxx + cs * pxxt
        s3t = (sn * pt * px**3 - 3.0 * cs * px**2 * pxt - 3.0 * cs * pt * px * pxx
               - 3.0 * sn * (pxt * pxx + px * pxxt))
        return (s0, s1, s2, s3, s4), (s0t, s1t, s2t, s3t)

    def _evaluate(self, x, t, order):
        pi = math.pi
        amp = self.A
        xs, ys = x[..., 0], x[..., 1]
        (s0, s1, s2, s3, s4), (s0t, s1t, s2t, s3t) = self._x_factor(xs, t, order)
        sy, cy = np.sin(pi * ys), np.cos(pi * ys)
        y0, y1, y2, y3, y4 = sy, pi * cy, -pi**2 * sy, -pi**3 * cy, pi**4 * sy

        u = np.stack([-amp * s0 * y1, amp * s1 * y0], axis=-1)
        grad = _mat(-amp * s1 * y1, -amp * s0 * y2, amp * s2 * y0, amp * s1 * y1)
        u_t = np.stack([-amp * s0t * y1, amp * s1t * y0], axis=-1)
        DuDt = u_t + np.einsum("...ij,...j->...i", grad, u)
        if order < THIRD_ORDER:
            return FlowSample(u, grad, DuDt)
        lap = np.stack([-amp * (s2 * y1 + s0 * y3), amp * (s3 * y0 + s1 * y2)], axis=-1)
        grad_lap = _mat(-amp * (s3 * y1 + s1 * y3), -amp * (s2 * y2 + s0 * y4),
                        amp * (s4 * y0 + s2 * y2), amp * (s3 * y1 + s1 * y3))
        lap_t = np.stack([-amp * (s2t * y1 + s0t * y3), amp * (s3t * y0 + s1t * y2)], axis=-1)
        DlapDt = lap_t + np.einsum("...ij,...j->...i", grad_lap, u)
        return FlowSample(u, grad, DuDt, lap, grad_lap, DlapDt)


def _mat(a11, a12, a21, a22):
    a11, a12, a21, a22 = np.broadcast_arrays(a11, a12, a21, a22)
    return np.stack([np.stack([a11, a12], axis=-1), np.stack([a21, a22], axis=-1)], axis=-2)


def eval_double_gyre(gyre: DoubleGyre, x, t) -> FlowSample:
    """Evaluate the double gyre, rejecting positions outside its domain."""
    return gyre.evaluate(x, t, strict=True)


# -- forcing terms -------------------------------------------------------------

@dataclass(frozen=True)
class DerivedFields:
    """Forcing terms of the relative-velocity equation.

    ``A`` advects the particle (``dy/dt = w + A``), ``B`` forces the relative
    velocity and ``M`` couples it linearly (``... = -M w + B``).  Without the
    Faxen corrections ``A = u``, ``B = (3R/2 - 1)(Du/Dt - g)`` and ``M = grad u``.
    """

    flow: FlowField
    params: ParticleParams
    faxen_enabled: bool = False

    def __post_init__(self):
        if self.faxen_enabled and self.flow.derivative_order < THIRD_ORDER:
            raise CapabilityError(
                f"Faxen corrections need third derivatives; {type(self.flow).__name__} "
                f"provides order {self.flow.derivative_order}"
            )

    def evaluate(self, x, t):
        """Return ``(A, B, M)`` at positions ``x`` and physical times ``t``."""
        order = THIRD_ORDER if self.faxen_enabled else FIRST_ORDER
        return self._combine(self.flow.evaluate(x, t, order=order))

    def _combine(self, s: FlowSample):
        p = self.params
        g = np.asarray(p.g_scaled, dtype=float)
        coef = p.buoyancy_coefficient
        if not self.faxen_enabled:
            return s.u, coef * (s.DuDt - g), s.grad_u
        c = p.faxen_coefficient
        A = s.u + c * s.lap_u
        M = s.grad_u + c * s.grad_lap_u
        B = (coef * (s.DuDt - g)
             + (p.R / 20.0 - 1.0 / 6.0) * (p.gamma / p.mu) * s.DlapuDt
             - c * np.einsum("...ij,...j->...i", M, s.lap_u))
        return A, B, M

    def faxen_shift(self, x, t):
        """``v - w - u``: the Laplacian term in the relative velocity (zero without Faxen)."""
        s = self.flow.evaluate(x, t)
        if not self.faxen_enabled:
            return np.zeros_like(s.u)
        return self.params.faxen_coefficient * s.lap_u

    def particle_velocity(self, x, t, w):
        """``v = w + u + (gamma/(6 mu)) lap u`` (Laplacian term only with Faxen)."""
        s = self.flow.evaluate(x, t)
        v = np.asarray(w, dtype=float) + s.u
        if self.faxen_enabled:
            v = v + self.params.faxen_coefficient * s.lap_u
        return v


def derived_fields(flow: FlowField, params: ParticleParams, faxen: bool = False) -> DerivedFields:
    return DerivedFields(flow, params, faxen)


# -- bound constants -------------------------------------------------------------

MATRIX_NORMS = ("frobenius", "spectral")


def spectral_norm_2x2(m):
    """Largest singular value of 2x2 matrices, closed form."""
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    fro2 = a * a + b * b + c * c + d * d
    det = a * d - b * c
    return np.sqrt(0.5 * (fro2 + np.sqrt(np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0))))


def _matrix_norm(m, kind):
    if kind == "spectral":
        return spectral_norm_2x2(m)
    return np.sqrt(np.sum(m * m, axis=(-2, -1)))


@dataclass(frozen=True)
class BoundsGrid:
    """Sampling resolution for :func:`estimate_bounds`."""

    nx: int = 801
    ny: int = 401
    nt: int = 128
    t_span: float | None = None

    def __post_init__(self):
        if min(self.nx, self.ny) < 3 or self.nt < 1:
            raise DomainError("bounds grid needs nx, ny >= 3 and nt >= 1")

    def coarser(self) -> "BoundsGrid":
        return BoundsGrid(max(3, (self.nx + 1) // 2), max(3, (self.ny + 1) // 2), max(1, self.nt // 2), self.t_span)


@dataclass(frozen=True)
class FieldBounds:
    """Sampled suprema of the forcing terms.

    ``L_A = max |A|``, ``L_B = max |B|``, ``L_M = max ||M||`` and ``L_c`` the
    largest norm of the spatial gradients of ``A``, ``B`` and ``M``.
    ``refinement_delta`` holds the change of each constant between the
    coarser grid and ``grid``.
    """

    L_A: float
    L_B: float
    L_M: float
    L_c: float | None
    grid: BoundsGrid
    faxen: bool
    R: float
    matrix_norm: str = "frobenius"
    refinement_delta: dict = field(default_factory=dict)
    warnings: tuple = ()

    def as_dict(self) -> dict:
        return {
            "L_A": self.L_A, "L_B": self.L_B, "L_M": self.L_M, "L_c": self.L_c,
            "grid": {"nx": self.grid.nx, "ny": self.grid.ny, "nt": self.grid.nt, "t_span": self.grid.t_span},
            "faxen": self.faxen, "R": self.R, "matrix_norm": self.matrix_norm,
            "refinement_delta": dict(self.refinement_delta), "warnings": list(self.warnings),
        }

    @classmethod
    def from_constants(cls, L_A, L_B, L_M, L_c=None, R=math.nan, faxen=False):
        """Bounds supplied by hand rather than sampled."""
        return cls(float(L_A), float(L_B), float(L_M), None if L_c is None else float(L_c),
                   BoundsGrid(3, 3, 1), faxen, R, "given")


def _sample_maxima(fields: DerivedFields, grid: BoundsGrid, matrix_norm: str):
    (x0, x1), (y0, y1) = fields.flow.domain
    if not all(math.isfinite(v) for v in (x0, x1, y0, y1)):
        raise DomainError("bounds need a finite spatial domain")
    span = grid.t_span if grid.t_span is not None else fields.flow.period
    if span is None:
        raise DomainError("aperiodic field: supply a finite time span")
    xs = np.linspace(x0, x1, grid.nx)
    ys = np.linspace(y0, y1, grid.ny)
    dx, dy = xs[1] - xs[0], ys[1] - ys[0]
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    best = np.zeros(4)
    for t in np.arange(grid.nt) * (span / grid.nt):
        A, B, M = fields.evaluate(pts, t)
        best[0] = max(best[0], float(np.max(np.linalg.norm(A, axis=-1))))
        best[1] = max(best[1], float(np.max(np.linalg.norm(B, axis=-1))))
        best[2] = max(best[2], float(np.max(_matrix_norm(M, matrix_norm))))
        lip = 0.0
        for comp in (A, B, M.reshape(M.shape[:2] + (4,))):
            gx, gy = np.gradient(comp, dx, dy, axis=(0, 1), edge_order=2)
            lip = max(lip, float(np.max(np.sqrt(np.sum(gx * gx + gy * gy, axis=-1)))))
        best[3] = max(best[3], lip)
    return best


def estimate_bounds(fields: DerivedFields, grid: BoundsGrid | None = None, refine_tol: float = 1e-2,
                    matrix_norm: str = "frobenius") -> FieldBounds:
    """Sample the forcing terms on a space-time grid and return their maxima.

    The grid is also sampled at half resolution; relative changes above
    ``refine_tol`` are reported as warnings on the result.
    """
    grid = grid or BoundsGrid()
    if matrix_norm not in MATRIX_NORMS:
        raise DomainError(f"matrix_norm must be one of {MATRIX_NORMS}")
    fine = _sample_maxima(fields, grid, matrix_norm)
    coarse = _sample_maxima(fields, grid.coarser(), matrix_norm)
    names = ("L_A", "L_B", "L_M", "L_c")
    delta = {n: float(f - c) for n, f, c in zip(names, fine, coarse)}
    notes = []
    for n, f in zip(names, fine):
        if abs(delta[n]) > refine_tol * max(abs(f), 1e-300) and abs(delta[n]) > 1e-14:
            msg = f"{n} changed by {delta[n]:.3e} under refinement (tolerance {refine_tol:g} relative)"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
    log.info("bounds L_A=%.6g L_B=%.6g L_M=%.6g L_c=%.6g", *fine)
    return FieldBounds(*(float(v) for v in fine), grid=grid, faxen=fields.faxen_enabled,
                       R=fields.params.R, matrix_norm=matrix_norm, refinement_delta=delta,
                       warnings=tuple(notes))
