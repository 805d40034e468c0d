"""LSTM sequence kernels (forward recurrence and BPTT).

Arrays are time-major: inputs ``x`` are ``[T, B, C]``, states ``[T, B, H]``.
Gate order along the ``4H`` axis is ``i, f, g, o``. The recurrent term uses
``h_prev * mask`` where ``mask`` is a per-sequence ``[B, H]`` dropout mask
(all ones at inference).

Only the two recurrences are sequential; everything that can be batched
over time (input projection, weight gradients) is done with single matmuls
in the shared wrappers below. Each recurrence has a numba kernel and a
numpy kernel; :data:`biofuse._accel.USE_NUMBA` picks one.
"""

import numpy as np

from . import _accel
from ._accel import njit


def sigmoid(a):
    # tanh form: no overflow for large |a|
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# --------------------------------------------------------------------------
# numpy kernels
# --------------------------------------------------------------------------

def _forward_recurrence_np(xw, UT, mask, h, c, gates, tanh_c):
    T, B, H4 = xw.shape
    H = H4 // 4
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        a = xw[t] + (h_prev * mask) @ UT
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        c_prev = f * c_prev + i * g
        tc = np.tanh(c_prev)
        h_prev = o * tc
        gates[t, :, :H] = i
        gates[t, :, H:2 * H] = f
        gates[t, :, 2 * H:3 * H] = g
        gates[t, :, 3 * H:] = o
        c[t] = c_prev
        tanh_c[t] = tc
        h[t] = h_prev


def _backward_recurrence_np(U, mask, c, gates, tanh_c, dh_seq, da):
    T, B, H = dh_seq.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = tanh_c[t]
        dh = dh_seq[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        c_prev = c[t - 1] if t > 0 else np.zeros((B, H))
        da[t, :, :H] = dc * g * i * (1.0 - i)
        da[t, :, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[t, :, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        da[t, :, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = (da[t] @ U) * mask


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

# libm tanh is several times slower than exp inside numba loops; the
# exp forms agree with np.tanh to ~1e-16 and saturate cleanly at +-inf.
@njit
def _forward_recurrence_nb(xw, UT, mask, h, c, gates, tanh_c):
    T, B, H4 = xw.shape
    H = H4 // 4
    hm = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        rec = np.dot(hm, UT)
        for b in range(B):
            for j in range(H):
                ai = xw[t, b, j] + rec[b, j]
                af = xw[t, b, H + j] + rec[b, H + j]
                ag = xw[t, b, 2 * H + j] + rec[b, 2 * H + j]
                ao = xw[t, b, 3 * H + j] + rec[b, 3 * H + j]
                ig = 1.0 / (1.0 + np.exp(-ai))
                fg = 1.0 / (1.0 + np.exp(-af))
                gg = 2.0 / (1.0 + np.exp(-2.0 * ag)) - 1.0
                og = 1.0 / (1.0 + np.exp(-ao))
                cn = fg * c_prev[b, j] + ig * gg
                tc = 2.0 / (1.0 + np.exp(-2.0 * cn)) - 1.0
                hn = og * tc
                gates[t, b, j] = ig
                gates[t, b, H + j] = fg
                gates[t, b, 2 * H + j] = gg
                gates[t, b, 3 * H + j] = og
                c[t, b, j] = cn
                tanh_c[t, b, j] = tc
                h[t, b, j] = hn
                c_prev[b, j] = cn
                hm[b, j] = hn * mask[b, j]


@njit
def _backward_recurrence_nb(U, mask, c, gates, tanh_c, dh_seq, da):
    T, B, H = dh_seq.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                ig = gates[t, b, j]
                fg = gates[t, b, H + j]
                gg = gates[t, b, 2 * H + j]
                og = gates[t, b, 3 * H + j]
                tc = tanh_c[t, b, j]
                dh = dh_seq[t, b, j] + dh_next[b, j]
                dc = dh * og * (1.0 - tc * tc) + dc_next[b, j]
                cp = c[t - 1, b, j] if t > 0 else 0.0
                da[t, b, j] = dc * gg * ig * (1.0 - ig)
                da[t, b, H + j] = dc * cp * fg * (1.0 - fg)
                da[t, b, 2 * H + j] = dc * ig * (1.0 - gg * gg)
                da[t, b, 3 * H + j] = dh * tc * og * (1.0 - og)
                dc_next[b, j] = dc * fg
        dhn = np.dot(np.ascontiguousarray(da[t]), U)
        for b in range(B):
            for j in range(H):
                dh_next[b, j] = dhn[b, j] * mask[b, j]


# --------------------------------------------------------------------------
# public wrappers
# --------------------------------------------------------------------------

def _pick(use_numba):
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    if use_numba:
        return _forward_recurrence_nb, _backward_recurrence_nb
    return _forward_recurrence_np, _backward_recurrence_np


def lstm_forward(x, W, U, b, mask=None, use_numba=None):
    """Run one LSTM layer over a time-major batch.

    Returns ``(h, c, gates, tanh_c)``; ``gates`` holds post-activation values.
    """
    T, B, C = x.shape
    H = U.shape[1]
    if W.shape != (4 * H, C) or U.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ValueError(
            f"LSTM shape mismatch: x {x.shape}, W {W.shape}, U {U.shape}, b {b.shape}"
        )
    if mask is None:
        mask = np.ones((B, H))
    fwd, _ = _pick(use_numba)
    xw = (x.reshape(T * B, C) @ W.T + b).reshape(T, B, 4 * H)
    h = np.empty((T, B, H))
    c = np.empty((T, B, H))
    gates = np.empty((T, B, 4 * H))
    tanh_c = np.empty((T, B, H))
    fwd(np.ascontiguousarray(xw), np.ascontiguousarray(U.T), np.ascontiguousarray(mask),
        h, c, gates, tanh_c)
    return h, c, gates, tanh_c


def lstm_backward(x, W, U, mask, h, c, gates, tanh_c, dh, use_numba=None):
    """BPTT for one layer given upstream gradients ``dh`` on every output step.

    Returns ``(dW, dU, db, dx)``.
    """
    T, B, C = x.shape
    H = U.shape[1]
    if mask is None:
        mask = np.ones((B, H))
    _, bwd = _pick(use_numba)
    da = np.empty((T, B, 4 * H))
    bwd(np.ascontiguousarray(U), np.ascontiguousarray(mask), c, gates, tanh_c,
        np.ascontiguousarray(dh), da)
    hm_prev = np.zeros((T, B, H))
    hm_prev[1:] = h[:-1] * mask
    da2 = da.reshape(T * B, 4 * H)
    dW = da2.T @ x.reshape(T * B, C)
    dU = da2.T @ hm_prev.reshape(T * B, H)
    db = da2.sum(axis=0)
    dx = (da2 @ W).reshape(T, B, C)
    return dW, dU, db, dx
