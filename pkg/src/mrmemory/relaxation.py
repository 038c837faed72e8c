"""Fractional relaxation kernels of ``w' + kappa d^{1/2} w + w = 0``.

The fundamental solution is ``w(tau) = psi(tau) w0`` with Laplace transform
``1 / ((sqrt(s) + l+)(sqrt(s) + l-))``, ``l+- = (kappa +- sqrt(kappa^2 - 4))/2``.
``phi = 1 - int_0^tau psi`` is the companion kernel (``psi = -phi'``).

Both are written through ``E(z) = E_{1/2}(-z) = exp(z^2) erfc(z)``::

    psi = [l+ E(l+ sqrt(tau)) - l- E(l- sqrt(tau))] / (l+ - l-)
    phi = [l+ E(l- sqrt(tau)) - l- E(l+ sqrt(tau))] / (l+ - l-)

with the repeated-root limit at ``kappa = 2`` and the conjugate-pair form for
``kappa < 2``.  Two independent oracles evaluate ``psi`` without these
formulas: fixed-Talbot inversion of the transform and the Voigt-function
integrals.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import integrate, special

from . import _kernels, quadrature
from .errors import DomainError, OracleFailure

SQRT_PI = math.sqrt(math.pi)
BACKENDS = ("closed_form", "laplace_oracle", "voigt_oracle")
# |kappa - 2| below this uses the repeated-root formulas
CRITICAL_BAND = 1e-10
_ASYMPTOTIC_TERMS = 12


def mittag_leffler_half(z):
    """``E_{1/2}(-z) = exp(z^2) erfc(z)`` without overflow.

    Evaluated as the scaled complementary error function: ``erfcx`` for real
    input and the Faddeeva function ``w(i z)`` for complex input.
    """
    arr = np.asarray(z)
    if not np.all(np.isfinite(arr)):
        raise DomainError("E_1/2 requires finite arguments")
    if np.iscomplexobj(arr):
        out = special.wofz(1j * arr)
    else:
        out = special.erfcx(arr.astype(float))
    return out if out.ndim else out[()]


def mittag_leffler_half_asymptotic(z, terms=3):
    """Leading terms of ``E_{1/2}(-z) ~ (1/(z sqrt(pi))) (1 - 1/(2z^2) + 3/(4z^4) - ...)``."""
    z = np.asarray(z)
    acc = np.zeros_like(z, dtype=np.result_type(z, float))
    coef = 1.0
    for m in range(terms):
        acc = acc + coef / (2.0 * z * z) ** m
        coef *= -(2 * m + 1)
    return acc / (z * SQRT_PI)


def _double_factorials(count):
    """``(2m-1)!!`` for ``m = 0..count-1``."""
    out = np.ones(count)
    for m in range(1, count):
        out[m] = out[m - 1] * (2 * m - 1)
    return out


def _chebyshev_d(kappa, count):
    """``D_k = (l+^k - l-^k)/(l+ - l-)`` for ``k = 0..count-1`` (well defined at kappa = 2)."""
    d = np.zeros(count)
    if count > 1:
        d[1] = 1.0
    for k in range(1, count - 1):
        d[k + 1] = kappa * d[k] - d[k - 1]
    return d


@dataclass(frozen=True)
class RelaxationKernel:
    """Evaluator for ``psi_kappa`` and ``phi_kappa``.

    ``backend`` selects how :meth:`psi` is computed; ``phi`` always uses the
    closed form.  ``kappa = 0`` is the memoryless limit ``psi = phi = exp(-tau)``.
    """

    kappa: float
    backend: str = "closed_form"
    lambda_plus: complex = field(init=False)
    lambda_minus: complex = field(init=False)

    def __post_init__(self):
        if not (math.isfinite(self.kappa) and self.kappa >= 0.0):
            raise DomainError(f"kappa must be finite and >= 0, got {self.kappa!r}")
        if self.backend not in BACKENDS:
            raise DomainError(f"unknown backend {self.backend!r}")
        disc = np.sqrt(complex(self.kappa**2 - 4.0))
        object.__setattr__(self, "lambda_plus", complex((self.kappa + disc) / 2.0))
        object.__setattr__(self, "lambda_minus", complex((self.kappa - disc) / 2.0))

    @classmethod
    def from_params(cls, params, backend="closed_form"):
        return cls(params.kappa, backend)

    @property
    def regime(self) -> str:
        if self.kappa == 0.0:
            return "memoryless"
        if abs(self.kappa - 2.0) <= CRITICAL_BAND:
            return "critical"
        return "overdamped" if self.kappa > 2.0 else "oscillatory"

    @property
    def asymptotic_threshold(self) -> float:
        """Beyond this ``tau`` the closed forms are replaced by their asymptotic series."""
        return 500.0 * max(1.0, self.lambda_plus.real ** 2)

    # -- public evaluators -------------------------------------------------

    def psi(self, tau):
        tau = _check_tau(tau)
        if self.backend == "laplace_oracle":
            return _vectorize_oracle(tau, lambda t: inverse_laplace_oracle(relaxation_transform(self.kappa), t), 1.0)
        if self.backend == "voigt_oracle":
            return _vectorize_oracle(tau, lambda t: voigt_oracle(self.kappa, t), 1.0)
        return self._closed(tau, "psi")

    def phi(self, tau):
        return self._closed(_check_tau(tau), "phi")

    def psi_asymptotic(self, tau):
        """Leading-order tail ``kappa/(2 sqrt(pi)) tau^{-3/2}``."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0.0):
            raise DomainError("psi_asymptotic requires tau > 0")
        out = self.kappa / (2.0 * SQRT_PI) * tau**-1.5
        return out if out.ndim else out[()]

    def hat_weights(self, n: int, dt: float) -> quadrature.HatWeights:
        """Product-integration weights of ``psi`` against piecewise-linear data."""
        if n < 1:
            raise DomainError("hat weights need at least one cell")
        return quadrature.kernel_weights(lambda x: self._closed(x, "psi"), n, dt)

    def starting_weights(self, weights: quadrature.HatWeights) -> quadrature.StartingWeights:
        """Corrections to ``weights`` that make the rule exact for ``s^{1/2}`` and ``s^{3/2}``.

        The returned weights act on data values (no extra scaling).
        """
        n, dt = weights.size - 1, weights.dt
        grid = np.arange(n + 1) * dt
        j = np.arange(n + 1, dtype=float)
        deltas = {}
        for b in (0.5, 1.5):
            scale = dt**b
            plain = _kernels.product_convolve(weights.k_int, weights.k_end, weights.k_diag, scale * j**b)
            deltas[b] = (self.power_moment(b, grid) - plain) / scale
        return quadrature.starting_weights(deltas)

    def power_moment(self, beta, tau):
        """``int_0^tau psi(tau - s) s^beta ds`` for ``beta`` a nonnegative half-integer.

        The transform ``Gamma(beta+1) / (s^{beta+1} (sqrt(s)+l+)(sqrt(s)+l-))``
        is split into terms ``1/(p^m (p + l))`` in ``p = sqrt(s)``, each inverted
        by a downward recursion from ``E(l sqrt(tau))``.  Small ``tau`` uses the
        power series in ``sqrt(tau)``, where the recursion would cancel.
        """
        m = 2.0 * beta + 2.0
        if beta < 0.0 or m != int(m):
            raise DomainError(f"power moments need a nonnegative half-integer beta, got {beta!r}")
        m = int(m)
        tau = _check_tau(tau)
        scalar = tau.ndim == 0
        tau = np.atleast_1d(tau)
        out = np.zeros_like(tau)
        scale = max(abs(self.lambda_plus), abs(self.lambda_minus)) ** 2
        small = tau * scale <= 4.0
        if np.any(small):
            out[small] = _moment_series(self.kappa, m, tau[small])
        big = ~small
        if np.any(big):
            t = tau[big]
            if self.kappa == 0.0 or self.regime != "critical":
                lp, lm = self.lambda_plus, self.lambda_minus
                if self.kappa > 2.0:
                    lp, lm = lp.real, lm.real
                fp = _inverse_pole_power(lp, m, t)[0]
                fm = _inverse_pole_power(lm, m, t)[0]
                vals = np.real((fm - fp) / (lp - lm))
            else:
                vals = _inverse_pole_power(1.0, m, t)[1]
            out[big] = math.gamma(beta + 1.0) * vals
        return out[0] if scalar else out

    # -- closed forms ------------------------------------------------------

    def _closed(self, tau, which):
        scalar = tau.ndim == 0
        tau = np.atleast_1d(tau)
        if self.kappa == 0.0:
            out = np.exp(-tau)
        else:
            out = np.empty_like(tau)
            far = tau >= self.asymptotic_threshold
            near = ~far
            if np.any(near):
                out[near] = self._direct(tau[near], which)
            if np.any(far):
                out[far] = self._series(tau[far], which)
            # both kernels lie in [0, 1]; the closed forms can overshoot by an ulp near 0
            np.clip(out, 0.0, 1.0, out=out)
        return out[0] if scalar else out

    def _direct(self, tau, which):
        root = np.sqrt(tau)
        lp, lm = self.lambda_plus, self.lambda_minus
        regime = self.regime
        if regime == "critical":
            e = special.erfcx(root)
            if which == "psi":
                return e * (1.0 + 2.0 * tau) - 2.0 * root / SQRT_PI
            return e * (1.0 - 2.0 * tau) + 2.0 * root / SQRT_PI
        if regime == "overdamped":
            lp, lm = lp.real, lm.real
            ep = special.erfcx(lp * root)
            em = special.erfcx(lm * root)
            if which == "psi":
                return (lp * ep - lm * em) / (lp - lm)
            return (lp * em - lm * ep) / (lp - lm)
        # oscillatory: l- = conj(l+), both terms are a conjugate pair
        coef = lp / (lp - lm)
        if which == "psi":
            return 2.0 * np.real(coef * special.wofz(1j * lp * root))
        return 2.0 * np.real(coef * special.wofz(1j * lm * root))

    def _series(self, tau, which):
        m = _ASYMPTOTIC_TERMS
        c = _double_factorials(m + 1)
        d = _chebyshev_d(self.kappa, 2 * m + 4)
        x = 1.0 / (2.0 * tau)
        acc = np.zeros_like(tau)
        if which == "psi":
            for k in range(m, 0, -1):
                acc = acc * x + (-1) ** (k + 1) * c[k] * d[2 * k]
            acc = acc * x
        else:
            for k in range(m, -1, -1):
                acc = acc * x + (-1) ** k * c[k] * d[2 * k + 2]
        return acc / (SQRT_PI * np.sqrt(tau))


def _check_tau(tau):
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)) or np.any(tau < 0.0):
        raise DomainError("kernel arguments must be finite and nonnegative")
    return tau


def _moment_series(kappa, m, tau, terms=90):
    """``Gamma(m/2) sum_n d_n tau^{(n+m)/2} / Gamma((n+m)/2 + 1)``.

    ``d_n`` are the coefficients of ``1/(1 + kappa x + x^2)``.
    """
    acc = np.zeros_like(tau)
    log_tau = np.log(np.where(tau > 0.0, tau, 1.0))
    d_prev, d = 0.0, 1.0
    for n in range(terms):
        k = 0.5 * (n + m)
        acc += d * np.exp(k * log_tau - math.lgamma(k + 1.0)) * (tau > 0.0)
        d_prev, d = d, -kappa * d - d_prev
    return math.gamma(0.5 * m) * acc


def _inverse_pole_power(pole, m, tau):
    """Inverse transforms of ``1/(p^m (p + pole))`` and of ``1/(p^m (p + pole)^2)``.

    ``F_1 = E(pole sqrt(tau))`` and ``F_k = (tau^{k/2-1}/Gamma(k/2) - F_{k-1}) / pole``;
    the squared-pole family ``G_k = -dF_k/dpole`` obeys ``G_k = (F_k - G_{k-1}) / pole``.
    """
    root = np.sqrt(tau)
    x = pole * root
    f = mittag_leffler_half(x)
    g = 2.0 * root / SQRT_PI - 2.0 * pole * tau * f
    for k in range(2, m + 1):
        f = (tau ** (0.5 * k - 1.0) / math.gamma(0.5 * k) - f) / pole
        g = (f - g) / pole
    return f, g


def _vectorize_oracle(tau, fn, at_zero):
    flat = np.array([at_zero if t == 0.0 else fn(float(t)) for t in np.ravel(tau)])
    return flat.reshape(np.shape(tau)) if np.ndim(tau) else flat[0]


def psi(kappa, tau):
    return RelaxationKernel(kappa).psi(tau)


def phi(kappa, tau):
    return RelaxationKernel(kappa).phi(tau)


def psi_asymptotic(kappa, tau):
    return RelaxationKernel(kappa).psi_asymptotic(tau)


# -- oracles ----------------------------------------------------------------

def relaxation_transform(kappa):
    """Laplace transform ``1/(s + kappa sqrt(s) + 1)`` of ``psi`` (mpmath-compatible)."""
    k = mpmath.mpf(kappa)
    return lambda s: 1 / (s + k * mpmath.sqrt(s) + 1)


def _talbot(transform, tau, nodes):
    tau = mpmath.mpf(tau)
    r = mpmath.mpf(2 * nodes) / (5 * tau)
    acc = transform(r) * mpmath.exp(r * tau) / 2
    for k in range(1, nodes):
        theta = k * mpmath.pi / nodes
        cot = mpmath.cot(theta)
        s = r * theta * (cot + 1j)
        sigma = theta + (theta * cot - 1) * cot
        acc += mpmath.re(mpmath.exp(tau * s) * transform(s) * (1 + 1j * sigma))
    return r / nodes * acc


def inverse_laplace_oracle(transform, tau, nodes=32, rtol=1e-8, atol=1e-300):
    """Fixed-Talbot inversion of ``transform`` at time ``tau > 0``.

    ``transform`` receives an ``mpmath.mpc``.  The contour sum is taken with
    ``nodes``, ``2 nodes`` and ``4 nodes`` points at a working precision that
    covers the exponential growth along the contour; the first pair of
    consecutive estimates agreeing to ``rtol`` is accepted.

    Raises
    ------
    OracleFailure
        If no two consecutive node counts agree.
    """
    if not (tau > 0.0 and math.isfinite(tau)):
        raise DomainError("inverse Laplace oracle requires tau > 0")
    previous = None
    for m in (nodes, 2 * nodes, 4 * nodes):
        with mpmath.workdps(20 + m // 2):
            value = float(_talbot(transform, tau, m))
        if previous is not None and abs(value - previous) <= max(rtol * abs(value), atol):
            return value
        previous = value
    raise OracleFailure(f"Talbot inversion did not converge at tau={tau!r}")


def _quad(func, lo, hi):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, err = integrate.quad(func, lo, hi, epsabs=1e-15, epsrel=1e-12, limit=500)
    if not math.isfinite(value) or err > 1e-9 * max(1.0, abs(value)):
        raise OracleFailure(f"Voigt quadrature error estimate {err:.2e} too large")
    return value


def voigt_functions(x, t):
    """Voigt functions ``U(x, t)`` and ``V(x, t)`` by adaptive quadrature."""
    if t <= 1.0:
        # centre the Gaussian: s = -x + 2 sqrt(t) u
        st = 2.0 * math.sqrt(t)

        def lorentz(u):
            s = -x + st * u
            return math.exp(-u * u) / (1.0 + s * s)

        u_val = _quad(lorentz, -np.inf, np.inf) / SQRT_PI
        v_val = _quad(lambda u: (-x + st * u) * lorentz(u), -np.inf, np.inf) / SQRT_PI
    else:
        # s = tan(theta) absorbs the Lorentzian
        norm = 1.0 / math.sqrt(4.0 * math.pi * t)

        def gauss(th):
            return math.exp(-(x + math.tan(th)) ** 2 / (4.0 * t))

        lim = math.pi / 2.0
        u_val = norm * _quad(gauss, -lim, lim)
        v_val = norm * _quad(lambda th: math.tan(th) * gauss(th), -lim, lim)
    return u_val, v_val


def voigt_oracle(kappa, tau):
    """``psi_kappa(tau)`` for ``0 < kappa < 2`` from the Voigt functions.

    ``psi = 2/(kappa sqrt(pi tau)) [U(x, t) - kappa/sqrt(4 - kappa^2) V(x, t)]``
    with ``x = -sqrt(4 - kappa^2)/kappa`` and ``t = 1/(kappa^2 tau)``.
    """
    if not (0.0 < kappa < 2.0):
        raise DomainError(f"Voigt oracle needs 0 < kappa < 2, got {kappa!r}")
    if not (tau > 0.0 and math.isfinite(tau)):
        raise DomainError("Voigt oracle requires tau > 0")
    root = math.sqrt(4.0 - kappa * kappa)
    x = -root / kappa
    t = 1.0 / (kappa * kappa * tau)
    u_val, v_val = voigt_functions(x, t)
    return 2.0 / (kappa * math.sqrt(math.pi * tau)) * (u_val - kappa / root * v_val)


# -- tabulation ---------------------------------------------------------------

@dataclass(frozen=True)
class KernelTable:
    """``psi`` sampled on a uniform grid starting at zero."""

    tau: np.ndarray
    values: np.ndarray
    dt: float
    kappa: float


def uniform_grid(dt, tau_end):
    """Nodes ``0, dt, ..., N dt`` with ``N = round(tau_end / dt)``."""
    if not (dt > 0.0) or tau_end < 0.0:
        raise DomainError("grid needs dt > 0 and tau_end >= 0")
    n = int(round(tau_end / dt))
    return np.arange(n + 1) * dt


def psi_grid(kernel: RelaxationKernel, grid) -> KernelTable:
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DomainError("empty grid")
    if grid[0] != 0.0:
        raise DomainError("grid must start at 0")
    dt = float(grid[1] - grid[0]) if grid.size > 1 else 0.0
    if grid.size > 2 and not np.allclose(np.diff(grid), dt, rtol=1e-9, atol=0.0):
        raise DomainError("grid must be uniform")
    return KernelTable(tau=grid, values=np.atleast_1d(kernel.psi(grid)), dt=dt, kappa=kernel.kappa)
