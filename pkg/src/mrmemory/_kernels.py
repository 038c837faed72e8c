"""O(N^2) inner loops: history sums and discrete product convolutions.

Each kernel exists twice, as a numba ``@njit`` function and as a pure-numpy
function with the same signature.  The numba versions are used when numba
imports and the environment variable ``MRMEMORY_NUMBA`` is not set to a false
value (``0``, ``false``, ``no``, ``off``).

Weight layout shared by all kernels (uniform step, lag ``m = n - j``)::

    out[n] = k_end[n] * x[0] + sum_{j=1}^{n-1} k_int[n - j] * x[j]

``k_int[m]`` is the weight of an interior node at lag ``m`` and ``k_end[n]``
the weight of the left endpoint when the right endpoint is node ``n``.
"""

from __future__ import annotations

import os

import numpy as np

_FALSE = {"0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USING_NUMBA = NUMBA_AVAILABLE and os.environ.get("MRMEMORY_NUMBA", "1").strip().lower() not in _FALSE


def history_sum_numpy(k_int, k_end, hist, n, out):
    """Weighted sum of rows ``0..n-1`` of ``hist`` (shape ``(N+1, K)``) into ``out``."""
    if n == 0:
        out[:] = 0.0
        return out
    out[:] = k_end[n] * hist[0]
    if n > 1:
        out += k_int[n - 1:0:-1] @ hist[1:n]
    return out


def product_convolve_numpy(k_int, k_end, k_diag, g):
    """Discrete convolution ``out[n] = k_diag g[n] + sum_{m=1}^{n-1} k_int[m] g[n-m] + k_end[n] g[0]``.

    ``out[0]`` is zero (empty integration interval).
    """
    g = np.asarray(g, dtype=float)
    c = np.array(k_int, dtype=float)
    c[0] = k_diag
    full = np.convolve(g, c)[: g.size]
    # swap the lag-n interior weight on g[0] for the end weight
    out = full - c[: g.size] * g[0] + k_end[: g.size] * g[0]
    out[0] = 0.0
    return out


if NUMBA_AVAILABLE:
    # reassociating the sums lets LLVM vectorize them; results stay deterministic run to run
    _FAST = {"reassoc", "contract"}

    @numba.njit(cache=True, nogil=True, fastmath=_FAST)
    def history_sum_numba(k_int, k_end, hist, n, out):
        ncomp = hist.shape[1]
        if n == 0:
            for c in range(ncomp):
                out[c] = 0.0
            return out
        e = k_end[n]
        for c in range(ncomp):
            out[c] = e * hist[0, c]
        for j in range(1, n):
            k = k_int[n - j]
            for c in range(ncomp):
                out[c] += k * hist[j, c]
        return out

    @numba.njit(cache=True, nogil=True, fastmath=_FAST)
    def product_convolve_numba(k_int, k_end, k_diag, g):
        size = g.shape[0]
        out = np.zeros(size)
        for n in range(1, size):
            acc = 0.0
            for m in range(1, n):
                acc += k_int[m] * g[n - m]
            out[n] = acc + k_diag * g[n] + k_end[n] * g[0]
        return out

else:  # pragma: no cover
    history_sum_numba = None
    product_convolve_numba = None


if USING_NUMBA:
    history_sum = history_sum_numba
    product_convolve = product_convolve_numba
else:
    history_sum = history_sum_numpy
    product_convolve = product_convolve_numpy


def implementation() -> str:
    """Name of the active kernel implementation."""
    return "numba" if USING_NUMBA else "numpy"
