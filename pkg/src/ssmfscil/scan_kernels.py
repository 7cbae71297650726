"""JIT-compiled scan kernels.

The recurrence is the hot loop of every training step.  These kernels fuse
the discretization into the state update, and the forward pass stores the
per-element decay and input factors (abar, phi1) so the backward pass never
reevaluates exp.  Both kernels are single-threaded on purpose: runtime
budgets in the verification suite are quoted per core.

Math (per batch row, channel d, state s):

    za   = dt[t,d] * a[d,s]
    abar = exp(za)
    phi1 = (abar - 1) / za        (== 1 when |za| < 1e-8)
    h    = abar * h + phi1 * dt[t,d] * b[t,s] * x[t,d]
    y[t,d] = sum_s c[t,s] * h[d,s]

numba is optional: callers check HAVE_NUMBA and fall back to the numpy path.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

ZOH_EPS = 1e-8


@njit(cache=True)
def scan_forward(x, b, c, dt, a, y, h_hist, abar_hist, phi1_hist):
    """x, dt: [B, L, D]; b, c: [B, L, S]; a: [B, D, S].

    Fills y: [B, L, D], h_hist: [B, L+1, D, S] (h_hist[:, 0] stays 0) and
    the factor caches abar_hist / phi1_hist: [B, L, D, S].
    """
    B, L, D = x.shape
    S = b.shape[2]
    for r in range(B):
        for t in range(L):
            for d in range(D):
                step = dt[r, t, d]
                xv = x[r, t, d]
                acc = 0.0
                for s in range(S):
                    za = step * a[r, d, s]
                    abar = np.exp(za)
                    if abs(za) < ZOH_EPS:
                        phi1 = 1.0
                    else:
                        phi1 = (abar - 1.0) / za
                    abar_hist[r, t, d, s] = abar
                    phi1_hist[r, t, d, s] = phi1
                    h = abar * h_hist[r, t, d, s] + phi1 * step * b[r, t, s] * xv
                    h_hist[r, t + 1, d, s] = h
                    acc += c[r, t, s] * h
                y[r, t, d] = acc


@njit(cache=True)
def scan_backward(g, x, b, c, dt, a, h_hist, abar_hist, phi1_hist,
                  dx, db, dc, ddt, da):
    """Reverse-mode pass; writes into the preallocated gradient arrays."""
    B, L, D = x.shape
    S = b.shape[2]
    dh = np.zeros((D, S), dtype=g.dtype)
    for r in range(B):
        dh[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                g_td = g[r, t, d]
                step = dt[r, t, d]
                xv = x[r, t, d]
                dx_acc = 0.0
                ddt_acc = 0.0
                for s in range(S):
                    av = a[r, d, s]
                    za = step * av
                    abar = abar_hist[r, t, d, s]
                    phi1 = phi1_hist[r, t, d, s]
                    if abs(za) < ZOH_EPS:
                        phi1p = 0.0
                    else:
                        phi1p = (abar * (za - 1.0) + 1.0) / (za * za)
                    bv = b[r, t, s]
                    bbar = phi1 * step * bv
                    dc[r, t, s] += g_td * h_hist[r, t + 1, d, s]
                    dhv = dh[d, s] + g_td * c[r, t, s]
                    dx_acc += dhv * bbar
                    dbbar = dhv * xv
                    db[r, t, s] += dbbar * phi1 * step
                    dza = dhv * h_hist[r, t, d, s] * abar + dbbar * phi1p * step * bv
                    ddt_acc += dza * av + dbbar * phi1 * bv
                    da[r, d, s] += dza * step
                    dh[d, s] = dhv * abar
                dx[r, t, d] = dx_acc
                ddt[r, t, d] = ddt_acc
