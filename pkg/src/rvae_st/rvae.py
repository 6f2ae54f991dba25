"""Recurrent VAE with a repeat-vector decoder and a time-distributed head.

Encoder: stacked LSTMs over the input; the top layer's hidden state at the
final step feeds two linear heads for the latent mean and log-variance.
Decoder: the latent vector is fed unchanged at every step into stacked
LSTMs (zero initial states) and one shared linear map turns each step's top
hidden state into the output. No tensor depends on the sequence length.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .numerics import Rng
from .recurrent import (
    LstmCellParams,
    StackState,
    init_lstm,
    init_uniform,
    stack_backward,
    stack_forward,
)

HIDDEN = 256
LAYERS = 4
LATENT = 20


@dataclass
class RvaeParams:
    encoder: List[LstmCellParams]
    mu_W: np.ndarray   # (H, z)
    mu_b: np.ndarray
    lv_W: np.ndarray   # (H, z)
    lv_b: np.ndarray
    decoder: List[LstmCellParams]
    out_W: np.ndarray  # (H, d_c)
    out_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.encoder[0].input_size

    @property
    def out_channels(self) -> int:
        return self.out_W.shape[1]

    @property
    def hidden(self) -> int:
        return self.encoder[0].hidden

    @property
    def layers(self) -> int:
        return len(self.encoder)

    @property
    def latent(self) -> int:
        return self.mu_W.shape[1]

    def dims(self) -> dict:
        return {"c": self.channels, "d_c": self.out_channels, "hidden": self.hidden,
                "layers": self.layers, "z": self.latent}

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter array under a stable name, in checkpoint order."""
        out = OrderedDict()
        for k, p in enumerate(self.encoder):
            for name, t in p.tensors().items():
                out[f"encoder.{k}.{name}"] = t
        out["head_mu.W"] = self.mu_W
        out["head_mu.b"] = self.mu_b
        out["head_logvar.W"] = self.lv_W
        out["head_logvar.b"] = self.lv_b
        for k, p in enumerate(self.decoder):
            for name, t in p.tensors().items():
                out[f"decoder.{k}.{name}"] = t
        out["out_proj.W"] = self.out_W
        out["out_proj.b"] = self.out_b
        return out

    def copy(self) -> "RvaeParams":
        return RvaeParams(
            encoder=[p.copy() for p in self.encoder],
            mu_W=self.mu_W.copy(), mu_b=self.mu_b.copy(),
            lv_W=self.lv_W.copy(), lv_b=self.lv_b.copy(),
            decoder=[p.copy() for p in self.decoder],
            out_W=self.out_W.copy(), out_b=self.out_b.copy(),
        )

    def zeros_like(self) -> "RvaeParams":
        z = self.copy()
        for t in z.tensors().values():
            t[...] = 0.0
        return z


def shapes_for(c: int, d_c: Optional[int] = None, hidden: int = HIDDEN,
               layers: int = LAYERS, latent: int = LATENT) -> "OrderedDict[str, tuple]":
    """Tensor manifest for the given dimensions, same order as ``tensors()``."""
    d_c = c if d_c is None else d_c
    out = OrderedDict()

    def lstm_stack(prefix, first):
        for k in range(layers):
            d_in = first if k == 0 else hidden
            out[f"{prefix}.{k}.W_ih"] = (4 * hidden, d_in)
            out[f"{prefix}.{k}.W_hh"] = (4 * hidden, hidden)
            out[f"{prefix}.{k}.b"] = (4 * hidden,)

    lstm_stack("encoder", c)
    out["head_mu.W"] = (hidden, latent)
    out["head_mu.b"] = (latent,)
    out["head_logvar.W"] = (hidden, latent)
    out["head_logvar.b"] = (latent,)
    lstm_stack("decoder", latent)
    out["out_proj.W"] = (hidden, d_c)
    out["out_proj.b"] = (d_c,)
    return out


def params_from_tensors(tensors: dict, layers: int) -> RvaeParams:
    def stack(prefix):
        return [LstmCellParams(tensors[f"{prefix}.{k}.W_ih"], tensors[f"{prefix}.{k}.W_hh"],
                               tensors[f"{prefix}.{k}.b"]) for k in range(layers)]
    return RvaeParams(
        encoder=stack("encoder"),
        mu_W=tensors["head_mu.W"], mu_b=tensors["head_mu.b"],
        lv_W=tensors["head_logvar.W"], lv_b=tensors["head_logvar.b"],
        decoder=stack("decoder"),
        out_W=tensors["out_proj.W"], out_b=tensors["out_proj.b"],
    )


def _dense(fan_in: int, fan_out: int, rng: Rng):
    return init_uniform((fan_in, fan_out), rng, 1.0 / math.sqrt(fan_in)), np.zeros(fan_out)


def init_rvae(c: int, rng: Rng, d_c: Optional[int] = None, hidden: int = HIDDEN,
              layers: int = LAYERS, latent: int = LATENT) -> RvaeParams:
    """Uniform initialization: weights in +-1/sqrt(fan), biases zero."""
    d_c = c if d_c is None else d_c
    encoder = [init_lstm(c if k == 0 else hidden, hidden, rng) for k in range(layers)]
    mu_W, mu_b = _dense(hidden, latent, rng)
    lv_W, lv_b = _dense(hidden, latent, rng)
    decoder = [init_lstm(latent if k == 0 else hidden, hidden, rng) for k in range(layers)]
    out_W, out_b = _dense(hidden, d_c, rng)
    return RvaeParams(encoder, mu_W, mu_b, lv_W, lv_b, decoder, out_W, out_b)


def param_count(p) -> int:
    return int(sum(t.size for t in p.tensors().values()))


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    eps: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    sse: float
    kl: float
    alpha: float
    beta: float


def _batch(x, channels: int) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (l, c) or (B, l, c) input, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("sequence length must be at least 1")
    if x.shape[2] != channels:
        raise ValueError(f"channel mismatch: data has {x.shape[2]}, model expects {channels}")
    return x, single


def _project(hs: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # step by step so every output row sees the same fixed-shape product
    out = np.empty(hs.shape[:2] + (W.shape[1],))
    for t in range(hs.shape[1]):
        out[:, t] = hs[:, t] @ W
    out += b
    return out


def encode(x, p: RvaeParams, keep: bool = False):
    """Latent mean and log-variance from the final top-layer hidden state."""
    xb, single = _batch(x, p.channels)
    outs, tape = stack_forward(xb, p.encoder, keep=keep)
    h_last = outs[-1][:, -1]
    mu = h_last @ p.mu_W + p.mu_b
    logvar = h_last @ p.lv_W + p.lv_b
    if keep:
        return mu, logvar, h_last, tape
    if single:
        return mu[0], logvar[0]
    return mu, logvar


def reparameterize(mu, logvar, rng: Optional[Rng] = None, eps=None) -> LatentCode:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    z = mu + np.exp(0.5 * logvar) * eps
    return LatentCode(mu=mu, logvar=logvar, z=z, eps=eps)


def _decode(z: np.ndarray, length: int, p: RvaeParams, keep: bool):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != p.latent:
        raise ValueError(f"latent width {z.shape[1]} != {p.latent}")
    if length < 1:
        raise ValueError("length must be at least 1")
    zs = np.broadcast_to(z[:, None, :], (z.shape[0], int(length), z.shape[1]))
    outs, tape = stack_forward(zs, p.decoder, StackState.zeros(p.decoder, z.shape[0]), keep=keep)
    top = outs[-1]
    return _project(top, p.out_W, p.out_b), top, tape


def decode(z, length: int, p: RvaeParams) -> np.ndarray:
    """Decode latent vector(s) into sequence(s) of ``length`` steps."""
    single = np.ndim(z) == 1
    xhat, _, _ = _decode(z, length, p, keep=False)
    return xhat[0] if single else xhat


def sample(n: int, length: int, p: RvaeParams, rng: Rng, batch_size: int = 256) -> np.ndarray:
    """n sequences from the prior N(0, I); any length, including unseen ones."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z = rng.standard_normal((n, p.latent))
    parts = [decode(z[i:i + batch_size], length, p) for i in range(0, n, batch_size)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# loss, gradients, ELBO algebra
# ---------------------------------------------------------------------------

def kl_per_sample(mu, logvar) -> np.ndarray:
    return 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=-1)


def loss(x, xhat, mu, logvar, alpha: float, beta: float) -> LossBreakdown:
    """alpha * mean_batch(SSE) + beta * mean_batch(KL to N(0, I))."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes differ")
    if x.ndim == 2:
        x, xhat = x[None], xhat[None]
    if mu.shape[0] != x.shape[0]:
        raise ValueError("latent batch does not match data batch")
    diff = x - xhat
    sse = float(np.mean(np.sum(diff * diff, axis=(1, 2))))
    kl = float(np.mean(kl_per_sample(mu, logvar)))
    return LossBreakdown(total=alpha * sse + beta * kl, sse=sse, kl=kl, alpha=alpha, beta=beta)


def sample_losses(p: RvaeParams, x, alpha: float, beta: float, eps=None) -> np.ndarray:
    """Per-sample total loss; ``eps=None`` scores with the posterior mean."""
    xb, _ = _batch(x, p.channels)
    mu, logvar = encode(xb, p)
    z = mu if eps is None else mu + np.exp(0.5 * logvar) * eps
    xhat, _, _ = _decode(z, xb.shape[1], p, keep=False)
    diff = xb - xhat
    return alpha * np.sum(diff * diff, axis=(1, 2)) + beta * kl_per_sample(mu, logvar)


def loss_backward(p: RvaeParams, x, alpha: float, beta: float,
                  rng: Optional[Rng] = None, eps=None):
    """Loss and exact gradients for every tensor, pathwise through z.

    Pass ``eps`` (shape (B, z)) to pin the reparameterization noise, otherwise
    it is drawn from ``rng``. Returns ``(LossBreakdown, grads)`` where grads
    is an :class:`RvaeParams` of gradient arrays.
    """
    xb, _ = _batch(x, p.channels)
    B, T, C = xb.shape
    mu, logvar, h_last, enc_tape = encode(xb, p, keep=True)
    code = reparameterize(mu, logvar, rng=rng, eps=eps)
    xhat, top, dec_tape = _decode(code.z, T, p, keep=True)
    result = loss(xb, xhat, mu, logvar, alpha, beta)

    dxhat = (2.0 * alpha / B) * (xhat - xb)
    H = p.hidden
    flat_top = top.reshape(B * T, H)
    flat_d = dxhat.reshape(B * T, C)
    g_out_W = flat_top.T @ flat_d
    g_out_b = flat_d.sum(axis=0)
    dtop = dxhat @ p.out_W.T
    dec_grads, dzs, _ = stack_backward(dec_tape, dtop)
    dz = dzs.sum(axis=1)

    std = np.exp(0.5 * logvar)
    dmu = dz + (beta / B) * mu
    dlogvar = 0.5 * dz * code.eps * std + (0.5 * beta / B) * (np.exp(logvar) - 1.0)
    g_mu_W = h_last.T @ dmu
    g_lv_W = h_last.T @ dlogvar
    dh_last = dmu @ p.mu_W.T + dlogvar @ p.lv_W.T
    denc = np.zeros((B, T, H))
    denc[:, -1] = dh_last
    enc_grads, _, _ = stack_backward(enc_tape, denc)

    grads = RvaeParams(
        encoder=enc_grads,
        mu_W=g_mu_W, mu_b=dmu.sum(axis=0),
        lv_W=g_lv_W, lv_b=dlogvar.sum(axis=0),
        decoder=dec_grads,
        out_W=g_out_W, out_b=g_out_b,
    )
    return result, grads


def _check_weights(alpha: float, beta: float, T: int, C: int):
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"alpha and beta must be positive (got {alpha}, {beta})")
    if T < 1 or C < 1:
        raise ValueError("T and C must be at least 1")


def elbo_from_loss(L: float, alpha: float, beta: float, T: int, C: int) -> float:
    """ELBO implied by the weighted loss under a Gaussian likelihood of variance beta/(2 alpha)."""
    _check_weights(alpha, beta, T, C)
    return -L / beta - 0.5 * math.log(math.pi * beta / alpha) * T * C


def loss_from_elbo(elbo: float, alpha: float, beta: float, T: int, C: int) -> float:
    _check_weights(alpha, beta, T, C)
    return -beta * (elbo + 0.5 * math.log(math.pi * beta / alpha) * T * C)


def elbo_norm(L: float, alpha: float, beta: float, T: int, C: int) -> float:
    return elbo_from_loss(L, alpha, beta, T, C) / (T * C)


def default_alpha(length: int) -> float:
    return 500.0 / length


# ---------------------------------------------------------------------------
# control decoder (length-dependent ablation)
# ---------------------------------------------------------------------------

@dataclass
class ControlDecoderParams:
    """Dense -> relu -> reshape -> LSTM stack -> flatten -> dense, built for one length."""

    length: int
    in_W: np.ndarray   # (z, l*H)
    in_b: np.ndarray
    lstm: List[LstmCellParams]
    out_W: np.ndarray  # (l*H, l*d_c)
    out_b: np.ndarray

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict([("dense_in.W", self.in_W), ("dense_in.b", self.in_b)])
        for k, p in enumerate(self.lstm):
            for name, t in p.tensors().items():
                out[f"lstm.{k}.{name}"] = t
        out["dense_out.W"] = self.out_W
        out["dense_out.b"] = self.out_b
        return out


def init_control_decoder(length: int, d_c: int, rng: Rng, hidden: int = HIDDEN,
                         layers: int = LAYERS, latent: int = LATENT) -> ControlDecoderParams:
    in_W, in_b = _dense(latent, length * hidden, rng)
    lstm = [init_lstm(hidden, hidden, rng) for _ in range(layers)]
    out_W, out_b = _dense(length * hidden, length * d_c, rng)
    return ControlDecoderParams(length, in_W, in_b, lstm, out_W, out_b)


def control_param_count(length: int, d_c: int, hidden: int = HIDDEN,
                        layers: int = LAYERS, latent: int = LATENT) -> int:
    """Closed-form size of the control decoder (no allocation)."""
    lstm = layers * (4 * hidden * hidden * 2 + 4 * hidden)
    return (latent + 1) * length * hidden + lstm + (length * hidden + 1) * length * d_c


def control_decode(z, length: int, p: ControlDecoderParams) -> np.ndarray:
    if length != p.length:
        raise ValueError(f"control decoder was built for l={p.length}, asked for l={length}")
    single = np.ndim(z) == 1
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    B = z.shape[0]
    H = p.lstm[0].hidden
    seq = np.maximum(z @ p.in_W + p.in_b, 0.0).reshape(B, length, H)
    outs, _ = stack_forward(seq, p.lstm, keep=False)
    flat = outs[-1].reshape(B, length * H)
    out = (flat @ p.out_W + p.out_b).reshape(B, length, -1)
    return out[0] if single else out
