"""Fused per-timestep gate arithmetic for the LSTM and GRU layers.

The matrix products stay BLAS calls on fixed (B, .) shapes. Vectorized
numpy tanh is several times faster than scalar tanh here, so the forward
LSTM squashes in numpy and only fuses the cheap arithmetic. Layouts are
time-major: (T, B, .).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sig(v):
    return 0.5 * (1.0 + math.tanh(0.5 * v))


@njit(cache=True)
def lstm_gates(act, c):
    """``act`` holds tanh(a/2) for i, f, o and tanh(a) for g. Turns the
    sigmoid slots into gate values and updates ``c`` in place."""
    B, H4 = act.shape
    H = H4 // 4
    for r in range(B):
        for j in range(H):
            i = 0.5 + 0.5 * act[r, j]
            f = 0.5 + 0.5 * act[r, H + j]
            o = 0.5 + 0.5 * act[r, 3 * H + j]
            act[r, j] = i
            act[r, H + j] = f
            act[r, 3 * H + j] = o
            c[r, j] = f * c[r, j] + i * act[r, 2 * H + j]


@njit(cache=True)
def lstm_backward(dht, cs, acts, tcs, W_hh, dA):
    """Fill dA (T, B, 4H) with gate pre-activation gradients; returns (dh0, dc0)."""
    T, B, H = tcs.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for r in range(B):
            for j in range(H):
                i = acts[t, r, j]
                f = acts[t, r, H + j]
                g = acts[t, r, 2 * H + j]
                o = acts[t, r, 3 * H + j]
                tc = tcs[t, r, j]
                dh = dht[t, r, j] + dh_next[r, j]
                dc = dh * o * (1.0 - tc * tc) + dc_next[r, j]
                dA[t, r, j] = dc * g * i * (1.0 - i)
                dA[t, r, H + j] = dc * cs[t, r, j] * f * (1.0 - f)
                dA[t, r, 2 * H + j] = dc * i * (1.0 - g * g)
                dA[t, r, 3 * H + j] = dh * tc * o * (1.0 - o)
                dc_next[r, j] = dc * f
        np.dot(dA[t], W_hh, dh_next)
    return dh_next, dc_next


@njit(cache=True)
def gru_forward(xt, h0, W_ihT, W_hhT, b_ih, b_hh, hs, gates, hpn, keep):
    T, B, D = xt.shape
    H = h0.shape[1]
    xp = np.empty((B, 3 * H))
    hp = np.empty((B, 3 * H))
    hs[0] = h0
    for t in range(T):
        np.dot(xt[t], W_ihT, xp)
        np.dot(hs[t], W_hhT, hp)
        for r in range(B):
            for j in range(H):
                rg = _sig(xp[r, j] + b_ih[j] + hp[r, j] + b_hh[j])
                u = _sig(xp[r, H + j] + b_ih[H + j] + hp[r, H + j] + b_hh[H + j])
                hn = hp[r, 2 * H + j] + b_hh[2 * H + j]
                n = math.tanh(xp[r, 2 * H + j] + b_ih[2 * H + j] + rg * hn)
                hs[t + 1, r, j] = n + u * (hs[t, r, j] - n)
                if keep:
                    gates[t, r, j] = rg
                    gates[t, r, H + j] = u
                    gates[t, r, 2 * H + j] = n
                    hpn[t, r, j] = hn


@njit(cache=True)
def gru_backward(dht, hs, gates, hpn, W_hh, dX, dHp):
    T, B, H = hpn.shape
    dh_next = np.zeros((B, H))
    carry = np.empty((B, H))
    for t in range(T - 1, -1, -1):
        for r in range(B):
            for j in range(H):
                rg = gates[t, r, j]
                u = gates[t, r, H + j]
                n = gates[t, r, 2 * H + j]
                dh = dht[t, r, j] + dh_next[r, j]
                dan = dh * (1.0 - u) * (1.0 - n * n)
                dar = dan * hpn[t, r, j] * rg * (1.0 - rg)
                dau = dh * (hs[t, r, j] - n) * u * (1.0 - u)
                dX[t, r, j] = dar
                dX[t, r, H + j] = dau
                dX[t, r, 2 * H + j] = dan
                dHp[t, r, j] = dar
                dHp[t, r, H + j] = dau
                dHp[t, r, 2 * H + j] = dan * rg
                carry[r, j] = dh * u
        np.dot(dHp[t], W_hh, dh_next)
        dh_next += carry
    return dh_next
