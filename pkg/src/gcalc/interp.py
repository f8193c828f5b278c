"""Four-point cubic interpolation kernels for stored value slabs.

Values between grid points come from the cubic through the four nearest
points; first and second derivatives are the derivatives of that same cubic,
so the interpolant's local Taylor expansion matches the values it returns.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def cubic_weights(t):
    """Lagrange weights for nodes -1, 0, 1, 2 at offset ``t``; shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    return np.stack(
        [
            -t * (t - 1) * (t - 2) / 6,
            (t + 1) * (t - 1) * (t - 2) / 2,
            -(t + 1) * t * (t - 2) / 2,
            (t + 1) * t * (t - 1) / 6,
        ],
        axis=-1,
    )


def stencil(f, points: int):
    """Base index and weights of the 4-point stencil at fractional index ``f``.

    Returns (base (...,), weights (..., 4), inside mask) with stencil indices
    base-1 .. base+2 kept within [0, points-1].
    """
    f = np.asarray(f, dtype=float)
    inside = (f >= -1e-9) & (f <= points - 1 + 1e-9)
    base = np.clip(np.floor(f).astype(np.int64), 1, points - 3)
    return base, cubic_weights(f - base), inside


@njit(cache=True, nogil=True)
def _weights(t, out):
    out[0] = -t * (t - 1.0) * (t - 2.0) / 6.0
    out[1] = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    out[2] = -(t + 1.0) * t * (t - 2.0) / 2.0
    out[3] = (t + 1.0) * t * (t - 1.0) / 6.0


@njit(cache=True, nogil=True)
def _dweights(t, out):
    out[0] = -(3.0 * t * t - 6.0 * t + 2.0) / 6.0
    out[1] = (3.0 * t * t - 4.0 * t - 1.0) / 2.0
    out[2] = -(3.0 * t * t - 2.0 * t - 2.0) / 2.0
    out[3] = (3.0 * t * t - 1.0) / 6.0


@njit(cache=True, nogil=True)
def _ddweights(t, out):
    out[0] = 1.0 - t
    out[1] = 3.0 * t - 2.0
    out[2] = 1.0 - 3.0 * t
    out[3] = t


@njit(cache=True, nogil=True)
def slab_query(u, taus, y0, dy, cidx, cw, tau_q, y, derivs, out_u, out_ux, out_uxx, valid):
    """Interpolate slab ``u`` (nodes, S, W) along paths.

    cidx/cw (P, C) give node corners per path; tau_q (Kc,) the stage time of
    each column; y (P, Kc) the displacement. Linear in tau, cubic in y.
    ``valid[p]`` is cleared when a stencil would leave the window.
    """
    S = u.shape[1]
    W = u.shape[2]
    P, C = cidx.shape
    Kc = tau_q.shape[0]
    w = np.empty(4)
    dw = np.empty(4)
    ddw = np.empty(4)
    inv = 1.0 / dy
    inv2 = inv * inv
    for k in range(Kc):
        tq = tau_q[k]
        s = np.searchsorted(taus, tq, side="right") - 1
        if s < 0:
            s = 0
        if s > S - 2:
            s = S - 2
        wt = (tq - taus[s]) / (taus[s + 1] - taus[s])
        for p in range(P):
            f = (y[p, k] - y0) * inv
            j = int(np.floor(f))
            if j < 1 or j > W - 3:
                valid[p] = False
                j = min(max(j, 1), W - 3)
            t = f - j
            _weights(t, w)
            if derivs:
                _dweights(t, dw)
                _ddweights(t, ddw)
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for c in range(C):
                wc = cw[p, c]
                if wc == 0.0:
                    continue
                node = cidx[p, c]
                for ss in range(2):
                    ws = wc * (wt if ss == 1 else 1.0 - wt)
                    if ws == 0.0:
                        continue
                    for q in range(4):
                        v = u[node, s + ss, j - 1 + q]
                        a0 += ws * w[q] * v
                        if derivs:
                            a1 += ws * dw[q] * v
                            a2 += ws * ddw[q] * v
            out_u[p, k] = a0
            if derivs:
                out_ux[p, k] = a1 * inv
                out_uxx[p, k] = a2 * inv2
