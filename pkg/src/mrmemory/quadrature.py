"""Product-integration weights on a uniform grid.

For a kernel ``k`` and a piecewise-linear interpolant of ``x`` on nodes
``0, h, 2h, ...``::

    int_0^{n h} k(n h - s) x(s) ds = k_diag x_n + sum_{j=1}^{n-1} k_int[n-j] x_j + k_end[n] x_0

The weights depend only on ``h`` and the lag, so one table serves every node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _kernels

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
# map to [0, 1]
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class HatWeights:
    """Lag-indexed product-integration weights (arrays of length ``n + 1``)."""

    k_int: np.ndarray
    k_end: np.ndarray
    k_diag: float
    dt: float

    @property
    def size(self) -> int:
        return self.k_int.size

    def total(self, n: int) -> float:
        """Sum of all weights for right endpoint ``n`` (the kernel integral over ``[0, n h]``)."""
        if n == 0:
            return 0.0
        return float(self.k_diag + self.k_int[1:n].sum() + self.k_end[n])

    def apply(self, x, n):
        """Reference evaluation of the weighted sum for right endpoint ``n``."""
        x = np.asarray(x, dtype=float)
        if n == 0:
            return np.zeros_like(x[0])
        acc = self.k_diag * x[n] + self.k_end[n] * x[0]
        for j in range(1, n):
            acc = acc + self.k_int[n - j] * x[j]
        return acc


def from_cells(falling, rising, dt) -> HatWeights:
    """Assemble hat weights from per-cell moments.

    ``falling[k]`` and ``rising[k]`` are the kernel integrals over cell
    ``[k h, (k+1) h]`` against the falling hat ``(k+1) - x/h`` and the rising
    hat ``x/h - k``.
    """
    falling = np.asarray(falling, dtype=float)
    rising = np.asarray(rising, dtype=float)
    n = falling.size
    k_int = np.zeros(n + 1)
    k_int[1:n] = rising[: n - 1] + falling[1:n]
    k_end = np.zeros(n + 1)
    k_end[1:] = rising
    return HatWeights(k_int=k_int, k_end=k_end, k_diag=float(falling[0]), dt=float(dt))


def abel_weights(n: int, dt: float) -> HatWeights:
    """Exact weights for the kernel ``1/sqrt(s)`` against piecewise-linear data.

    Written through ``d = sqrt(k+1) - sqrt(k) = 1/(sqrt(k+1) + sqrt(k))`` so that
    no cancellation occurs for large ``k``.
    """
    k = np.arange(n, dtype=float)
    a = np.sqrt(k)
    b = np.sqrt(k + 1.0)
    d = 1.0 / (a + b)
    scale = np.sqrt(dt) * (2.0 / 3.0) * d * d
    falling = scale * (2.0 * b + a)
    rising = scale * (b + 2.0 * a)
    return from_cells(falling, rising, dt)


def kernel_cells(func, n: int, dt: float, chunk: int = 65536):
    """Per-cell hat moments of a kernel by 16-point Gauss-Legendre quadrature.

    ``func`` must accept an array of nonnegative arguments.  The first cell is
    integrated in the variable ``v = sqrt(x / h)``, which removes the
    square-root behaviour of the relaxation kernels at the origin.
    """
    falling = np.empty(n)
    rising = np.empty(n)
    v = _GL_NODES
    x0 = dt * v * v
    vals = func(x0) * 2.0 * v
    falling[0] = dt * np.dot(_GL_WEIGHTS, vals * (1.0 - v * v))
    rising[0] = dt * np.dot(_GL_WEIGHTS, vals * v * v)
    for start in range(1, n, chunk):
        stop = min(n, start + chunk)
        k = np.arange(start, stop, dtype=float)[:, None]
        vals = func(((k + v) * dt).ravel()).reshape(k.shape[0], v.size)
        # row-wise sums (not BLAS) keep each cell independent of the chunking
        falling[start:stop] = dt * np.sum(vals * ((1.0 - v) * _GL_WEIGHTS), axis=1)
        rising[start:stop] = dt * np.sum(vals * (v * _GL_WEIGHTS), axis=1)
    return falling, rising


def kernel_weights(func, n: int, dt: float) -> HatWeights:
    return from_cells(*kernel_cells(func, n, dt), dt)


# exponents of the solution expansion near 0: 1, s^{1/2}, s, s^{3/2}
START_POWERS = (0.0, 0.5, 1.0, 1.5)


@dataclass(frozen=True)
class StartingWeights:
    """Corrections making a product rule exact for ``s^{1/2}`` and ``s^{3/2}``.

    Half-order equations have solutions ``c0 + c1 s^{1/2} + c2 s + c3 s^{3/2} + ...``
    near ``s = 0``; a rule exact only for linear data loses accuracy on the
    fractional powers.  For right endpoint ``n`` the corrected rule is::

        plain(n) + sum_{j < nodes} weights[n, j] x_j

    and is exact for every power in :data:`START_POWERS`.  ``weights`` has
    shape ``(N + 1, 4)`` with row 0 zero.  When ``N >= 3`` all rows use nodes
    ``0..3``, so endpoints 1 and 2 depend on later nodes and a solver must
    find nodes 1..3 together (see :attr:`block`).  Shorter grids fall back to
    nodes ``0..n``, exact for the first ``n + 1`` powers only.
    """

    weights: np.ndarray

    @property
    def block(self) -> bool:
        """True if endpoints 1..3 share the nodes 0..3."""
        return self.weights.shape[0] > 3

    def nodes(self, n) -> int:
        return 4 if self.block else min(n, 3) + 1

    def correction(self, n, x):
        m = self.nodes(n)
        return self.weights[n, :m] @ x[:m]


def starting_weights(deltas: dict) -> StartingWeights:
    """Solve the small moment systems given the plain rule's defects.

    ``deltas[beta][n]`` is ``exact - plain`` for data ``j^beta`` (unit step)
    with ``beta`` in ``(0.5, 1.5)``; integer powers have no defect.
    """
    size = deltas[0.5].size
    out = np.zeros((size, 4))
    if size > 3:
        rhs = np.zeros((4, size - 1))
        rhs[1] = deltas[0.5][1:]
        rhs[3] = deltas[1.5][1:]
        out[1:] = np.linalg.solve(_vandermonde(START_POWERS, 4), rhs).T
        return StartingWeights(out)
    for n in range(1, size):
        m = n + 1
        powers = START_POWERS[:m]
        rhs = np.array([deltas[b][n] if b in (0.5, 1.5) else 0.0 for b in powers])
        out[n, :m] = np.linalg.solve(_vandermonde(powers, m), rhs)
    return StartingWeights(out)


def _vandermonde(powers, m):
    j = np.arange(m, dtype=float)
    return np.array([[1.0 if (b == 0.0) else jj**b for jj in j] for b in powers])


def abel_starting_weights(n: int, dt: float) -> StartingWeights:
    """Starting weights for :func:`abel_weights` (scaled by ``sqrt(dt)``)."""
    unit = abel_weights(n, 1.0)
    j = np.arange(n + 1, dtype=float)
    deltas = {}
    for b in (0.5, 1.5):
        plain = _kernels.product_convolve(unit.k_int, unit.k_end, unit.k_diag, j**b)
        deltas[b] = special.beta(b + 1.0, 0.5) * j ** (b + 0.5) - plain
    sw = starting_weights(deltas)
    return StartingWeights(np.sqrt(dt) * sw.weights)


def trapezoid_starting_weights(n: int, dt: float) -> StartingWeights:
    """Starting weights for the composite trapezoidal rule (scaled by ``dt``)."""
    k = np.arange(n, dtype=float)
    deltas = {}
    for b in (0.5, 1.5):
        # per-cell defects summed, rather than differencing two large totals
        cell = ((k + 1.0) ** (b + 1.0) - k ** (b + 1.0)) / (b + 1.0) - 0.5 * (k**b + (k + 1.0) ** b)
        deltas[b] = np.concatenate([[0.0], np.cumsum(cell)])
    sw = starting_weights(deltas)
    return StartingWeights(dt * sw.weights)
