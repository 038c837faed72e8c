"""Analytic bounds on the relative velocity.

For ``eps L_M < 1`` the relative velocity obeys the pointwise envelope::

    |w(tau)| <= |w0| sum_{j>=1} (eps L_M)^{j-1} psi^{*j}(tau)
                + eps L_B (1 - phi(tau)) + eps^2 L_M L_B / (1 - eps L_M)

where ``psi^{*j}`` is the j-fold convolution power of the relaxation kernel.
The series is truncated at the first ``J`` whose geometric tail
``(eps L_M)^J / (1 - eps L_M)`` drops below a tolerance; since
``0 <= psi^{*j} <= 1`` the discarded part is at most ``|w0|`` times that tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import CapabilityError, DomainError
from .flow import FieldBounds
from .params import ParticleParams
from .relaxation import RelaxationKernel

MAX_TERMS = 64


def _check_contraction(eps_lm):
    if not (0.0 <= eps_lm < 1.0):
        raise DomainError(f"eps*L_M must lie in [0, 1), got {eps_lm!r}")


def truncation_order(eps_lm: float, tol: float) -> int:
    """Smallest ``J >= 1`` with ``(eps L_M)^J / (1 - eps L_M) < tol``."""
    _check_contraction(eps_lm)
    if tol <= 0.0:
        raise DomainError("tolerance must be positive")
    for j in range(1, MAX_TERMS + 1):
        if eps_lm**j / (1.0 - eps_lm) < tol:
            return j
    raise DomainError(f"series needs more than {MAX_TERMS} terms for eps*L_M={eps_lm!r}, tol={tol!r}")


def _grid_step(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0:
        raise DomainError("grid must be 1-D, start at 0 and have at least two nodes")
    dt = float(grid[1] - grid[0])
    if not np.allclose(np.diff(grid), dt, rtol=1e-9, atol=0.0):
        raise DomainError("grid must be uniform")
    return grid, dt


@dataclass(frozen=True)
class ConvolutionSeries:
    """Convolution powers of ``psi`` on a uniform grid.

    ``powers[j-1]`` samples ``psi^{*j}``.  ``h`` is ``sum_j (eps L_M)^j psi^{*j}``
    and ``series`` is ``sum_j (eps L_M)^{j-1} psi^{*j}``, both truncated at ``J``.
    """

    tau: np.ndarray
    powers: tuple
    eps_lm: float
    J: int
    truncation_bound: float

    @property
    def h(self) -> np.ndarray:
        return sum(self.eps_lm**j * p for j, p in enumerate(self.powers, start=1))

    @property
    def series(self) -> np.ndarray:
        return sum(self.eps_lm ** (j - 1) * p for j, p in enumerate(self.powers, start=1))

    def integral_of_h(self) -> float:
        """Trapezoidal integral of ``h`` over the grid."""
        return float(np.trapezoid(self.h, self.tau))


def convolution_series(kernel: RelaxationKernel, eps_lm: float, grid, tol: float = 1e-6,
                       terms: int | None = None) -> ConvolutionSeries:
    """Iterated discrete convolutions ``psi^{*(j+1)} = psi * psi^{*j}``.

    Each level applies product-integration weights of ``psi`` to the previous
    level.  The weights are exact for piecewise-linear data, and starting
    corrections on the first four nodes absorb the ``s^{1/2}`` and ``s^{3/2}``
    terms that every power carries near the origin.  ``terms`` overrides the
    tolerance-based truncation order.
    """
    _check_contraction(eps_lm)
    grid, dt = _grid_step(grid)
    J = truncation_order(eps_lm, tol) if terms is None else int(terms)
    if J < 1:
        raise DomainError("at least one series term is required")
    n = grid.size - 1
    w = kernel.hat_weights(n, dt)
    # psi is smooth when kappa = 0; short grids have too few nodes to correct
    start = kernel.starting_weights(w).weights if kernel.kappa > 0.0 and n > 3 else None
    level = np.atleast_1d(kernel.psi(grid)).astype(float)
    powers = [level]
    for _ in range(J - 1):
        nxt = _kernels.product_convolve(w.k_int, w.k_end, w.k_diag, level)
        if start is not None:
            nxt = nxt + start @ level[:4]
        level = nxt
        powers.append(level)
    return ConvolutionSeries(grid, tuple(powers), float(eps_lm), J, eps_lm**J / (1.0 - eps_lm))


@dataclass(frozen=True)
class EnvelopeCurve:
    """Pointwise upper bound on ``|w|`` and its parts.

    ``envelope = series_part + phi_part + const_part``; the exact (infinite)
    envelope exceeds it by at most ``w0_norm * truncation_bound``.
    """

    tau: np.ndarray
    envelope: np.ndarray
    series_part: np.ndarray
    phi_part: np.ndarray
    const_part: float
    J: int
    truncation_bound: float
    w0_norm: float
    eps: float
    L_B: float
    L_M: float
    kappa: float
    omit_eps2: bool

    @property
    def slack(self) -> float:
        """Largest amount by which the untruncated envelope can exceed :attr:`envelope`."""
        return self.w0_norm * self.truncation_bound

    @property
    def limit(self) -> float:
        """Value approached as ``tau -> infinity``."""
        return self.eps * self.L_B + self.const_part

    def violations(self, abs_w, rtol: float = 1e-9) -> np.ndarray:
        """Indices where ``abs_w`` exceeds the envelope beyond tolerance and certificate."""
        abs_w = np.asarray(abs_w, dtype=float)
        allowed = self.envelope * (1.0 + rtol) + self.slack
        return np.flatnonzero(abs_w > allowed)


def envelope_curve(params: ParticleParams, bounds: FieldBounds, w0_norm: float, grid,
                   tol: float = 1e-6, omit_eps2: bool = False, terms: int | None = None) -> EnvelopeCurve:
    eps = params.eps
    eps_lm = eps * bounds.L_M
    _check_contraction(eps_lm)
    if w0_norm < 0.0:
        raise DomainError("w0_norm must be nonnegative")
    kernel = RelaxationKernel(params.kappa)
    conv = convolution_series(kernel, eps_lm, grid, tol, terms)
    series_part = w0_norm * conv.series
    phi_part = eps * bounds.L_B * (1.0 - np.atleast_1d(kernel.phi(conv.tau)))
    const_part = 0.0 if omit_eps2 else eps * eps_lm * bounds.L_B / (1.0 - eps_lm)
    return EnvelopeCurve(
        tau=conv.tau, envelope=series_part + phi_part + const_part, series_part=series_part,
        phi_part=phi_part, const_part=const_part, J=conv.J, truncation_bound=conv.truncation_bound,
        w0_norm=float(w0_norm), eps=eps, L_B=bounds.L_B, L_M=bounds.L_M, kappa=params.kappa,
        omit_eps2=omit_eps2,
    )


def asymptotic_bound(params: ParticleParams, bounds: FieldBounds) -> float:
    """``eps L_B / (1 - eps L_M)``: the bound on ``|w|`` for large ``tau``."""
    eps_lm = params.eps * bounds.L_M
    _check_contraction(eps_lm)
    return params.eps * bounds.L_B / (1.0 - eps_lm)


def sup_bound(params: ParticleParams, bounds: FieldBounds, w0_norm: float) -> float:
    """``(|w0| + eps L_B) / (1 - eps L_M)``: the bound on ``|w|`` for all ``tau``."""
    eps_lm = params.eps * bounds.L_M
    _check_contraction(eps_lm)
    return (w0_norm + params.eps * bounds.L_B) / (1.0 - eps_lm)


@dataclass(frozen=True)
class ContinuationCertificate:
    """Window length ``h`` (scaled time) and ball radius ``K`` for unique continuation.

    ``K_prime`` stands in for the supremum of the frozen part of the solution;
    ``provenance`` says how it was obtained.
    """

    h: float
    K: float
    K_prime: float
    eps: float
    L_A: float
    L_B: float
    L_M: float
    L_c: float
    w0_norm: float
    provenance: str = field(default="")

    @property
    def h_physical(self) -> float:
        return self.eps * self.h

    @property
    def h_limit(self) -> float:
        """Upper limit ``1 / (eps (L_M + 1))`` that any admissible window respects."""
        return 1.0 / (self.eps * (self.L_M + 1.0))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "h", "K", "K_prime", "eps", "L_A", "L_B", "L_M", "L_c", "w0_norm", "provenance")} | {
            "h_physical": self.h_physical, "h_limit": self.h_limit}


def continuation_window(params: ParticleParams, bounds: FieldBounds, w0_norm: float,
                        position_bound: float | None = None) -> ContinuationCertificate:
    """Window over which a mild solution extends uniquely.

    ``h = min(1/(eps (L_M + 1)), 1/(2 eps [3 L_c + L_M + L_c S])) / 2`` with
    ``S`` the sup bound on ``|w|``.  ``K = K' + (L_B + L_A)/(2 (L_M + 1))``
    where ``K'`` is ``S``, or ``sqrt(S^2 + position_bound^2)`` when a bound on
    the positions is supplied.
    """
    if bounds.L_c is None:
        raise CapabilityError("the continuation window needs the Lipschitz constant L_c")
    eps = params.eps
    s = sup_bound(params, bounds, w0_norm)
    L_M, L_c = bounds.L_M, bounds.L_c
    h = 0.5 * min(1.0 / (eps * (L_M + 1.0)), 1.0 / (2.0 * eps * (3.0 * L_c + L_M + L_c * s)))
    if position_bound is None:
        k_prime, note = s, "K' = sup bound on |w| (velocity block only)"
    else:
        k_prime, note = math.hypot(s, position_bound), "K' = hypot(sup bound on |w|, position bound)"
    K = k_prime + (bounds.L_B + bounds.L_A) / (2.0 * (L_M + 1.0))
    return ContinuationCertificate(h=h, K=K, K_prime=k_prime, eps=eps, L_A=bounds.L_A, L_B=bounds.L_B,
                                   L_M=L_M, L_c=L_c, w0_norm=float(w0_norm), provenance=note)
