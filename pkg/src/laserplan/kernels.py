"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The planner evaluates thousands of candidate craters per tree, so the
per-cell crater profile, the asymmetric cost accumulation and the residual
volume sum dominate runtime. Each kernel exists twice: a numba ``@njit``
version and a vectorized numpy fallback. Set ``LASERPLAN_NO_NUMBA=1`` to
force the numpy path (the fallback is also selected automatically when
numba is not importable). ``benchmarks/bench_kernels.py`` compares both.

All kernels treat arrays as (nx, ny) grids where row i sits at
``x = x_start + i * dx`` and column j at ``y = y_start + j * dy``.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("LASERPLAN_NO_NUMBA", "").strip() not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled via LASERPLAN_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

USING_NUMBA = HAS_NUMBA


# --- pure numpy implementations -------------------------------------------


def _crater_patch_numpy(zp, validp, x_start, y_start, dx, dy, mux, muy,
                        bhx, bhy, e_scaled, amplitude, inv2s2, sharpness, threshold):
    m, n = zp.shape
    vx = (x_start + dx * np.arange(m) - mux)[:, None]
    vy = (y_start + dy * np.arange(n) - muy)[None, :]
    t = vx * bhx + vy * bhy
    r2 = np.maximum(vx * vx + vy * vy - t * t, 0.0)
    depth = amplitude * np.maximum(0.0, e_scaled * np.exp(-((r2 * inv2s2) ** sharpness)) - threshold)
    zp -= np.where(validp, depth, 0.0)


def _asym_ssq_numpy(z, f, valid, w_under, w_over):
    e = np.where(valid, z - f, 0.0)
    term = np.where(e > 0.0, w_under * e, w_over * e)
    return float(np.sum(term * term))


def _pos_residual_sum_numpy(z, f, valid):
    e = np.where(valid, z - f, 0.0)
    return float(np.sum(np.maximum(e, 0.0)))


def _violates_numpy(z, ceiling, active):
    return bool(np.any(active & (z < ceiling)))


# --- numba implementations --------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _crater_patch_numba(zp, validp, x_start, y_start, dx, dy, mux, muy,
                            bhx, bhy, e_scaled, amplitude, inv2s2, sharpness, threshold):
        m, n = zp.shape
        for i in range(m):
            vx = x_start + i * dx - mux
            for j in range(n):
                if not validp[i, j]:
                    continue
                vy = y_start + j * dy - muy
                t = vx * bhx + vy * bhy
                r2 = vx * vx + vy * vy - t * t
                if r2 < 0.0:
                    r2 = 0.0
                g = e_scaled * np.exp(-((r2 * inv2s2) ** sharpness))
                d = g - threshold
                if d > 0.0:
                    zp[i, j] -= amplitude * d

    @njit(cache=True)
    def _asym_ssq_numba(z, f, valid, w_under, w_over):
        m, n = z.shape
        s = 0.0
        for i in range(m):
            for j in range(n):
                if not valid[i, j]:
                    continue
                e = z[i, j] - f[i, j]
                t = w_under * e if e > 0.0 else w_over * e
                s += t * t
        return s

    @njit(cache=True)
    def _pos_residual_sum_numba(z, f, valid):
        m, n = z.shape
        s = 0.0
        for i in range(m):
            for j in range(n):
                if valid[i, j]:
                    e = z[i, j] - f[i, j]
                    if e > 0.0:
                        s += e
        return s

    @njit(cache=True)
    def _violates_numba(z, ceiling, active):
        m, n = z.shape
        for i in range(m):
            for j in range(n):
                if active[i, j] and z[i, j] < ceiling[i, j]:
                    return True
        return False

    crater_patch = _crater_patch_numba
    asym_ssq = _asym_ssq_numba
    pos_residual_sum = _pos_residual_sum_numba
    violates = _violates_numba
else:
    crater_patch = _crater_patch_numpy
    asym_ssq = _asym_ssq_numpy
    pos_residual_sum = _pos_residual_sum_numpy
    violates = _violates_numpy


def warmup() -> None:
    """Trigger JIT compilation so timings exclude compile overhead."""
    z = np.zeros((4, 4))
    f = np.zeros((4, 4))
    v = np.ones((4, 4), dtype=bool)
    crater_patch(z, v, 0.0, 0.0, 0.1, 0.1, 0.2, 0.2, 0.0, 0.0, 6.75, 0.334, 2.0, 12.73, 1.939)
    asym_ssq(z, f, v, 1.0, 2.0)
    pos_residual_sum(z, f, v)
    violates(z, f - 1.0, v)
