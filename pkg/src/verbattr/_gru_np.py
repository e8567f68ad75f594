"""Pure numpy GRU recurrence; the fallback when the compiled kernel is absent.

Layout shared with ``_gru_cy``:

* ``gx``: ``(B, T, 3H)`` input projections ``W x_t + b`` with gate blocks
  ordered reset, update, candidate.
* ``u``: ``(3H, H)`` recurrent weights in the same block order.
* ``lengths``: ``(B,)`` valid steps per row; padded steps carry ``h`` through.

Gates: ``r = s(gx_r + U_r h)``, ``z = s(gx_z + U_z h)``,
``c = tanh(gx_c + U_c (r * h))``, ``h' = (1 - z) h + z c``.
"""

from __future__ import annotations

import numpy as np


def _sig(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_forward(gx, lengths, u):
    """Run the recurrence from ``h_0 = 0``.

    Returns ``(hs, r, z, c)`` where ``hs`` is ``(B, T+1, H)`` with ``hs[:, 0]``
    the zero initial state, and ``r``, ``z``, ``c`` are ``(B, T, H)`` gate caches.
    """
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T, H3 = gx.shape
    H = H3 // 3
    hs = np.zeros((B, T + 1, H))
    r = np.zeros((B, T, H))
    z = np.zeros((B, T, H))
    c = np.zeros((B, T, H))
    u_rz = u[: 2 * H]
    u_c = u[2 * H :]
    for t in range(T):
        h = hs[:, t]
        a_rz = gx[:, t, : 2 * H] + h @ u_rz.T
        rt = _sig(a_rz[:, :H])
        zt = _sig(a_rz[:, H:])
        ct = np.tanh(gx[:, t, 2 * H :] + (rt * h) @ u_c.T)
        h_new = (1.0 - zt) * h + zt * ct
        live = (t < lengths)[:, None]
        hs[:, t + 1] = np.where(live, h_new, h)
        r[:, t] = rt
        z[:, t] = zt
        c[:, t] = ct
    return hs, r, z, c


def gru_backward(dh_last, lengths, u, hs, r, z, c):
    """Backpropagate a gradient on the final state ``hs[:, T]``.

    Returns ``(dgx, du)`` with the shapes of ``gx`` and ``u``.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T, H = r.shape
    u_rz = u[: 2 * H]
    u_c = u[2 * H :]
    dgx = np.zeros((B, T, 3 * H))
    du = np.zeros_like(u)
    dh = np.array(dh_last, dtype=np.float64, copy=True)
    for t in range(T - 1, -1, -1):
        live = (t < lengths)[:, None]
        dh_live = np.where(live, dh, 0.0)
        h = hs[:, t]
        rt, zt, ct = r[:, t], z[:, t], c[:, t]
        dz = dh_live * (ct - h)
        da_c = dh_live * zt * (1.0 - ct * ct)
        rh = rt * h
        du[2 * H :] += da_c.T @ rh
        drh = da_c @ u_c
        da_r = drh * h * rt * (1.0 - rt)
        da_z = dz * zt * (1.0 - zt)
        da_rz = np.concatenate([da_r, da_z], axis=1)
        du[: 2 * H] += da_rz.T @ h
        dh_prev = dh_live * (1.0 - zt) + drh * rt + da_rz @ u_rz
        dh = np.where(live, dh_prev, dh)
        dgx[:, t, : 2 * H] = da_rz
        dgx[:, t, 2 * H :] = da_c
    return dgx, du
