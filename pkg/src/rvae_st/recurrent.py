"""LSTM and GRU cells, stacked unrolls and exact backpropagation through time.

Arrays are batch-major: a sequence batch is ``(B, T, D)``, states are
``(B, H)``. Gate order is fixed: LSTM ``input|forget|cell|output`` with a
single bias, GRU ``reset|update|new`` with separate input/hidden biases
(the candidate uses ``r * (W_hn h + b_hn)``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels as _k
from .numerics import Rng, rng_uniform


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class LstmCellParams:
    W_ih: np.ndarray  # (4H, D)
    W_hh: np.ndarray  # (4H, H)
    b: np.ndarray     # (4H,)

    def __post_init__(self):
        four_h, h = self.W_hh.shape
        if four_h != 4 * h or h == 0:
            raise ValueError(f"W_hh must be (4H, H), got {self.W_hh.shape}")
        if self.W_ih.shape[0] != four_h or self.W_ih.shape[1] == 0:
            raise ValueError(f"W_ih must be (4H, D), got {self.W_ih.shape}")
        if self.b.shape != (four_h,):
            raise ValueError(f"b must be ({four_h},), got {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_ih.shape[1]

    def tensors(self) -> dict:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b": self.b}

    def copy(self) -> "LstmCellParams":
        return LstmCellParams(self.W_ih.copy(), self.W_hh.copy(), self.b.copy())

    def zeros_like(self) -> "LstmCellParams":
        return LstmCellParams(np.zeros_like(self.W_ih), np.zeros_like(self.W_hh), np.zeros_like(self.b))


@dataclass
class GruCellParams:
    W_ih: np.ndarray  # (3H, D)
    W_hh: np.ndarray  # (3H, H)
    b_ih: np.ndarray  # (3H,)
    b_hh: np.ndarray  # (3H,)

    def __post_init__(self):
        three_h, h = self.W_hh.shape
        if three_h != 3 * h or h == 0:
            raise ValueError(f"W_hh must be (3H, H), got {self.W_hh.shape}")
        if self.W_ih.shape[0] != three_h or self.W_ih.shape[1] == 0:
            raise ValueError(f"W_ih must be (3H, D), got {self.W_ih.shape}")
        if self.b_ih.shape != (three_h,) or self.b_hh.shape != (three_h,):
            raise ValueError("GRU biases must both be (3H,)")

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_ih.shape[1]

    def tensors(self) -> dict:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}

    def copy(self) -> "GruCellParams":
        return GruCellParams(self.W_ih.copy(), self.W_hh.copy(), self.b_ih.copy(), self.b_hh.copy())

    def zeros_like(self) -> "GruCellParams":
        return GruCellParams(*(np.zeros_like(t) for t in self.tensors().values()))


CellParams = Union[LstmCellParams, GruCellParams]


def init_uniform(shape, rng: Rng, scale: Optional[float] = None) -> np.ndarray:
    """Matrix with i.i.d. entries in [-scale, scale]; default scale 1/sqrt(fan_in)."""
    shape = tuple(int(s) for s in shape)
    if scale is None:
        scale = 1.0 / np.sqrt(shape[-1])
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n = int(np.prod(shape, dtype=np.int64))
    return rng_uniform(rng, n, -scale, scale).reshape(shape)


def init_lstm(input_size: int, hidden: int, rng: Rng, scale: Optional[float] = None) -> LstmCellParams:
    scale = 1.0 / np.sqrt(hidden) if scale is None else scale
    return LstmCellParams(
        W_ih=init_uniform((4 * hidden, input_size), rng, scale),
        W_hh=init_uniform((4 * hidden, hidden), rng, scale),
        b=np.zeros(4 * hidden),
    )


def init_gru(input_size: int, hidden: int, rng: Rng, scale: Optional[float] = None) -> GruCellParams:
    scale = 1.0 / np.sqrt(hidden) if scale is None else scale
    return GruCellParams(
        W_ih=init_uniform((3 * hidden, input_size), rng, scale),
        W_hh=init_uniform((3 * hidden, hidden), rng, scale),
        b_ih=np.zeros(3 * hidden),
        b_hh=np.zeros(3 * hidden),
    )


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------

def _check_step(x, h, p):
    if x.shape[-1] != p.input_size:
        raise ValueError(f"input width {x.shape[-1]} != cell input size {p.input_size}")
    if h.shape[-1] != p.hidden:
        raise ValueError(f"state width {h.shape[-1]} != cell hidden size {p.hidden}")


def lstm_cell_forward(x, state, p: LstmCellParams):
    """One LSTM update. Works on a single vector or a (B, D) batch."""
    h, c = (np.asarray(s, dtype=np.float64) for s in state)
    x = np.asarray(x, dtype=np.float64)
    _check_step(x, h, p)
    if c.shape != h.shape:
        raise ValueError("h and c shapes differ")
    H = p.hidden
    a = x @ p.W_ih.T + h @ p.W_hh.T + p.b
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = sigmoid(a[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    cache = {"x": x, "h": h, "c": c, "i": i, "f": f, "g": g, "o": o, "c_new": c_new}
    return h_new, c_new, cache


def gru_cell_forward(x, h, p: GruCellParams):
    """One GRU update; h' = (1 - u) * n + u * h."""
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_step(x, h, p)
    H = p.hidden
    xp = x @ p.W_ih.T + p.b_ih
    hp = h @ p.W_hh.T + p.b_hh
    r = sigmoid(xp[..., :H] + hp[..., :H])
    u = sigmoid(xp[..., H:2 * H] + hp[..., H:2 * H])
    n = np.tanh(xp[..., 2 * H:] + r * hp[..., 2 * H:])
    h_new = (1.0 - u) * n + u * h
    cache = {"x": x, "h": h, "r": r, "u": u, "n": n, "hp_n": hp[..., 2 * H:]}
    return h_new, cache


# ---------------------------------------------------------------------------
# whole-sequence layers
# ---------------------------------------------------------------------------

def lstm_layer_forward(xs: np.ndarray, h0: np.ndarray, c0: np.ndarray, p: LstmCellParams,
                       keep: bool = True):
    """Unroll one LSTM layer over ``xs`` of shape (B, T, D).

    Each step projects ``[x_t, h]`` with one fixed-shape product, so step t
    is bitwise independent of how many steps follow it. With ``keep=False``
    nothing beyond the hidden sequence is stored (inference only). Caches
    are kept time-major.
    """
    B, T, D = xs.shape
    H = p.hidden
    if D != p.input_size:
        raise ValueError(f"input width {D} != cell input size {p.input_size}")
    W = np.ascontiguousarray(np.concatenate([p.W_ih, p.W_hh], axis=1).T)
    xt = np.ascontiguousarray(xs.transpose(1, 0, 2), dtype=np.float64)
    h0 = np.ascontiguousarray(np.broadcast_to(h0, (B, H)), dtype=np.float64)
    c0 = np.ascontiguousarray(np.broadcast_to(c0, (B, H)), dtype=np.float64)
    b = np.ascontiguousarray(p.b, dtype=np.float64)
    hs = np.empty((T + 1, B, H))
    hs[0] = h0
    if keep:
        cs, acts, tcs = np.empty((T + 1, B, H)), np.empty((T, B, 4 * H)), np.empty((T, B, H))
        cs[0] = c0
    else:
        act, tc = np.empty((B, 4 * H)), np.empty((B, H))
    xh = np.empty((B, D + H))
    a = np.empty((B, 4 * H))
    c = c0.copy()
    for t in range(T):
        xh[:, :D] = xt[t]
        xh[:, D:] = hs[t]
        np.matmul(xh, W, out=a)
        a += b
        if keep:
            act, tc = acts[t], tcs[t]
        np.multiply(a, 0.5, out=act)
        np.tanh(act, out=act)
        np.tanh(a[:, 2 * H:3 * H], out=act[:, 2 * H:3 * H])
        _k.lstm_gates(act, c)
        np.tanh(c, out=tc)
        np.multiply(act[:, 3 * H:], tc, out=hs[t + 1])
        if keep:
            cs[t + 1] = c
    c_last = c
    out = hs[1:].transpose(1, 0, 2)
    if not keep:
        return out, {"kind": "lstm", "c_last": c_last}
    cache = {"kind": "lstm", "x": xt, "h": hs, "c": cs, "acts": acts, "tc": tcs, "c_last": c_last}
    return out, cache


def lstm_layer_backward(dhs: np.ndarray, cache: dict, p: LstmCellParams):
    """Reverse of :func:`lstm_layer_forward` given dLoss/dh_t for every step."""
    xt, hs, cs, acts, tcs = cache["x"], cache["h"], cache["c"], cache["acts"], cache["tc"]
    T, B, H = tcs.shape
    dht = np.ascontiguousarray(dhs.transpose(1, 0, 2), dtype=np.float64)
    dA = np.empty((T, B, 4 * H))
    dh0, dc0 = _k.lstm_backward(dht, cs, acts, tcs, np.ascontiguousarray(p.W_hh), dA)
    flat = dA.reshape(T * B, 4 * H)
    grads = LstmCellParams(
        W_ih=flat.T @ xt.reshape(T * B, -1),
        W_hh=flat.T @ hs[:-1].reshape(T * B, H),
        b=flat.sum(axis=0),
    )
    dxs = (dA @ p.W_ih).transpose(1, 0, 2)
    return grads, dxs, dh0, dc0


def gru_layer_forward(xs: np.ndarray, h0: np.ndarray, p: GruCellParams, keep: bool = True):
    B, T, D = xs.shape
    H = p.hidden
    if D != p.input_size:
        raise ValueError(f"input width {D} != cell input size {p.input_size}")
    xt = np.ascontiguousarray(xs.transpose(1, 0, 2), dtype=np.float64)
    h0 = np.ascontiguousarray(np.broadcast_to(h0, (B, H)), dtype=np.float64)
    hs = np.empty((T + 1, B, H))
    if keep:
        gates, hpn = np.empty((T, B, 3 * H)), np.empty((T, B, H))  # gates: r | u | n
    else:
        gates = hpn = np.empty((1, 1, 1))
    _k.gru_forward(xt, h0, np.ascontiguousarray(p.W_ih.T), np.ascontiguousarray(p.W_hh.T),
                   np.ascontiguousarray(p.b_ih, dtype=np.float64),
                   np.ascontiguousarray(p.b_hh, dtype=np.float64), hs, gates, hpn, keep)
    out = hs[1:].transpose(1, 0, 2)
    if not keep:
        return out, {"kind": "gru"}
    cache = {"kind": "gru", "x": xt, "h": hs, "gates": gates, "hpn": hpn}
    return out, cache


def gru_layer_backward(dhs: np.ndarray, cache: dict, p: GruCellParams):
    xt, hs, gates, hpn = cache["x"], cache["h"], cache["gates"], cache["hpn"]
    T, B, H = hpn.shape
    dht = np.ascontiguousarray(dhs.transpose(1, 0, 2), dtype=np.float64)
    dX = np.empty((T, B, 3 * H))
    dHp = np.empty((T, B, 3 * H))
    dh0 = _k.gru_backward(dht, hs, gates, hpn, np.ascontiguousarray(p.W_hh), dX, dHp)
    fx = dX.reshape(T * B, 3 * H)
    fh = dHp.reshape(T * B, 3 * H)
    grads = GruCellParams(
        W_ih=fx.T @ xt.reshape(T * B, -1),
        W_hh=fh.T @ hs[:-1].reshape(T * B, H),
        b_ih=fx.sum(axis=0),
        b_hh=fh.sum(axis=0),
    )
    dxs = (dX @ p.W_ih).transpose(1, 0, 2)
    return grads, dxs, dh0


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------

@dataclass
class StackState:
    """Per-layer hidden states (and cell states for LSTM layers)."""

    h: list
    c: list = field(default_factory=list)

    @classmethod
    def zeros(cls, layers: Sequence[CellParams], batch: int) -> "StackState":
        hs = [np.zeros((batch, p.hidden)) for p in layers]
        cs = [np.zeros((batch, p.hidden)) if isinstance(p, LstmCellParams) else None for p in layers]
        return cls(h=hs, c=cs)


@dataclass
class TapeCache:
    layers: list
    caches: list
    final_state: StackState
    used: bool = False


def _as_batch(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    if xs.ndim != 3:
        raise ValueError(f"expected (B, T, D) sequences, got shape {xs.shape}")
    return xs


def stack_forward(xs, layers: Sequence[CellParams], init: Optional[StackState] = None,
                  keep: bool = True):
    """Unroll a stack; layer k consumes layer k-1's hidden sequence.

    Returns the per-layer hidden sequences (each ``(B, T, H_k)``) and the
    tape needed by :func:`stack_backward`. ``tape.final_state`` can seed a
    continuation run.
    """
    xs = _as_batch(xs)
    B = xs.shape[0]
    if init is None:
        init = StackState.zeros(layers, B)
    if len(init.h) != len(layers):
        raise ValueError("initial state layer count does not match the stack")
    outputs, caches = [], []
    final = StackState(h=[], c=[])
    inp = xs
    for k, p in enumerate(layers):
        if inp.shape[-1] != p.input_size:
            raise ValueError(f"layer {k}: input width {inp.shape[-1]} != {p.input_size}")
        if isinstance(p, LstmCellParams):
            hs, cache = lstm_layer_forward(inp, init.h[k], init.c[k], p, keep=keep)
            final.c.append(cache["c_last"].copy())
        else:
            hs, cache = gru_layer_forward(inp, init.h[k], p, keep=keep)
            final.c.append(None)
        final.h.append(hs[:, -1].copy())
        outputs.append(hs)
        caches.append(cache)
        inp = hs
    tape = TapeCache(layers=list(layers), caches=caches, final_state=final, used=not keep)
    return outputs, tape


def stack_backward(tape: TapeCache, grad_out):
    """Exact gradients of a loss that depends on the emitted hidden states.

    ``grad_out`` is either one array for the top layer or a list with one
    entry (array or None) per layer. Returns ``(param_grads, dxs, dinit)``.
    """
    if tape.used:
        raise RuntimeError("tape already consumed by a backward pass")
    layers, caches = tape.layers, tape.caches
    L = len(layers)
    if isinstance(grad_out, np.ndarray):
        grad_out = [None] * (L - 1) + [grad_out]
    if len(grad_out) != L:
        raise ValueError("grad_out must have one entry per layer")
    T, B = caches[0]["x"].shape[:2]
    grads = [None] * L
    dinit = StackState(h=[None] * L, c=[None] * L)
    carry = None
    for k in range(L - 1, -1, -1):
        p = layers[k]
        H = p.hidden
        g = grad_out[k]
        if g is not None:
            g = _as_batch(g)
            if g.shape != (B, T, H):
                raise ValueError(f"layer {k}: grad shape {g.shape} != {(B, T, H)}")
        if carry is None:
            dhs = np.zeros((B, T, H)) if g is None else g
        else:
            dhs = carry if g is None else carry + g
        if isinstance(p, LstmCellParams):
            grads[k], carry, dh0, dc0 = lstm_layer_backward(dhs, caches[k], p)
            dinit.c[k] = dc0
        else:
            grads[k], carry, dh0 = gru_layer_backward(dhs, caches[k], p)
        dinit.h[k] = dh0
    tape.used = True
    return grads, carry, dinit


def count_params(layers: Sequence[CellParams]) -> int:
    return sum(t.size for p in layers for t in p.tensors().values())
