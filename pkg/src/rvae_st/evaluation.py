"""Diagnostics: sliding-window average ELBO, discriminative score, ESP curves,
spectral comparison and PCA overlap export."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numerics import PcaFit, Rng, Spectrum, derive_seed, pca_top2, periodogram_power
from .recurrent import (GruCellParams, LstmCellParams, gru_layer_backward, gru_layer_forward,
                        init_gru, init_uniform, lstm_layer_forward, sigmoid)
from .rvae import RvaeParams, default_alpha, sample_losses
from .training import AdamState, adam_step

# ---------------------------------------------------------------------------
# average ELBO over sliding windows
# ---------------------------------------------------------------------------


@dataclass
class AvgElboReport:
    value: float
    window: int
    n_samples: int
    length: int
    channels: int
    scorer_id: str = ""
    windows_per_sample: int = 0


def window_starts(length: int, window: int) -> np.ndarray:
    """Start indices t in [0, l - window), or the single start 0 when l == window."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if window > length:
        raise ValueError(f"window {window} exceeds sequence length {length}")
    return np.arange(max(length - window, 1))


def avg_elbo(synthetic, scorer: RvaeParams, window: int = 50, alpha: Optional[float] = None,
             beta: float = 0.1, scorer_id: str = "", block: int = 512) -> AvgElboReport:
    """Mean normalized ELBO of ``scorer`` over every length-``window`` slice.

    Windows are scored deterministically with the posterior mean (no noise).
    ``alpha`` defaults to 500/window, the rule the scorer was trained with.
    """
    x = np.asarray(synthetic, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    n, l, c = x.shape
    if c != scorer.channels:
        raise ValueError(f"scorer expects {scorer.channels} channels, data has {c}")
    starts = window_starts(l, window)
    if alpha is None:
        alpha = default_alpha(window)
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    idx = starts[:, None] + np.arange(window)[None, :]
    total, count = 0.0, 0
    const = 0.5 * math.log(math.pi * beta / alpha)
    for i in range(n):
        wins = x[i][idx]                                  # (n_windows, window, c)
        for s in range(0, len(wins), block):
            losses = sample_losses(scorer, wins[s:s + block], alpha, beta)
            norm = -losses / beta / (window * c) - const
            total += float(np.sum(norm))
            count += len(losses)
    return AvgElboReport(value=total / count, window=window, n_samples=n, length=l,
                         channels=c, scorer_id=scorer_id, windows_per_sample=len(starts))


# ---------------------------------------------------------------------------
# discriminative score
# ---------------------------------------------------------------------------

@dataclass
class DiscParams:
    gru: GruCellParams
    W: np.ndarray   # (H, 1)
    b: np.ndarray   # (1,)

    def tensors(self) -> dict:
        t = {f"gru.{k}": v for k, v in self.gru.tensors().items()}
        t["W"] = self.W
        t["b"] = self.b
        return t

    def copy(self) -> "DiscParams":
        return DiscParams(self.gru.copy(), self.W.copy(), self.b.copy())


@dataclass
class DiscScore:
    accuracy: float
    score: float
    seed: int
    epochs_run: int = 0
    seeds: List[int] = field(default_factory=list)


def disc_hidden(channels: int) -> int:
    return max(channels // 2, 1)


def init_discriminator(channels: int, rng: Rng) -> DiscParams:
    H = disc_hidden(channels)
    return DiscParams(gru=init_gru(channels, H, rng), W=init_uniform((H, 1), rng, 1.0 / math.sqrt(H)),
                      b=np.zeros(1))


def _disc_logits(p: DiscParams, x: np.ndarray, keep: bool = False):
    h0 = np.zeros((x.shape[0], p.gru.hidden))
    hs, cache = gru_layer_forward(x, h0, p.gru, keep=keep)
    last = hs[:, -1]
    return (last @ p.W)[:, 0] + p.b[0], last, cache


def _bce(logits: np.ndarray, y: np.ndarray) -> float:
    # softplus(z) - y z, written to stay finite for large |z|
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def _disc_grads(p: DiscParams, x: np.ndarray, y: np.ndarray):
    logits, last, cache = _disc_logits(p, x, keep=True)
    B, T = x.shape[:2]
    dlogit = (sigmoid(logits) - y) / B
    gW = last.T @ dlogit[:, None]
    gb = np.array([dlogit.sum()])
    dhs = np.zeros((B, T, p.gru.hidden))
    dhs[:, -1] = dlogit[:, None] * p.W[:, 0]
    g_gru, _, _ = gru_layer_backward(dhs, cache, p.gru)
    return _bce(logits, y), DiscParams(g_gru, gW, gb)


def _disc_eval(p: DiscParams, x, y, block: int = 1024):
    logits = np.concatenate([_disc_logits(p, x[i:i + block])[0] for i in range(0, len(x), block)])
    return _bce(logits, y), logits


def discriminative_score(real, synth, rng: Rng, n_train: int = 2000, n_val: int = 500,
                         n_test: int = 500, batch_size: int = 128, lr: float = 1e-3,
                         patience: int = 50, max_epochs: int = 2000) -> DiscScore:
    """D = |0.5 - a| for a GRU classifier separating real (1) from synthetic (0).

    Each class contributes ``n_train + n_val + n_test`` samples drawn without
    replacement. Early stopping on validation cross-entropy restores the
    best weights before the test accuracy ``a`` is measured.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim == 2:
        real, synth = real[:, :, None], synth[:, :, None]
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"real {real.shape[1:]} and synthetic {synth.shape[1:]} shapes differ")
    need = n_train + n_val + n_test
    if len(real) < need or len(synth) < need:
        raise ValueError(f"each set needs at least {need} samples "
                         f"(got {len(real)} real, {len(synth)} synthetic)")
    seed = rng.integer()
    pr = Rng(derive_seed(seed, "pick-real")).permutation(len(real))[:need]
    ps = Rng(derive_seed(seed, "pick-synth")).permutation(len(synth))[:need]

    def part(a, b):
        x = np.concatenate([real[pr[a:b]], synth[ps[a:b]]])
        y = np.concatenate([np.ones(b - a), np.zeros(b - a)])
        return x, y

    x_tr, y_tr = part(0, n_train)
    x_va, y_va = part(n_train, n_train + n_val)
    x_te, y_te = part(n_train + n_val, need)

    p = init_discriminator(real.shape[2], Rng(derive_seed(seed, "init")))
    state = AdamState(lr=lr, eps=1e-7)
    best, best_p, wait, epoch = math.inf, p.copy(), 0, 0
    for epoch in range(1, max_epochs + 1):
        order = Rng(derive_seed(seed, "shuffle", epoch)).permutation(len(x_tr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            _, grads = _disc_grads(p, x_tr[idx], y_tr[idx])
            adam_step(p, grads, state)
        v, _ = _disc_eval(p, x_va, y_va)
        if v < best:
            best, best_p, wait = v, p.copy(), 0
        else:
            wait += 1
            if wait >= patience:
                break
    _, logits = _disc_eval(best_p, x_te, y_te)
    acc = float(np.mean((logits > 0.0) == (y_te > 0.5)))
    return DiscScore(accuracy=acc, score=abs(0.5 - acc), seed=seed, epochs_run=epoch, seeds=[seed])


# ---------------------------------------------------------------------------
# echo state property
# ---------------------------------------------------------------------------

@dataclass
class EspCurve:
    t: np.ndarray
    r: np.ndarray
    d: np.ndarray


def decoder_drive(params: RvaeParams, z: np.ndarray, length: int) -> np.ndarray:
    """Input sequence seen by the top decoder layer: repeated z through the
    lower layers from zero states. Shape (n_z, length, width)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    xs = np.broadcast_to(z[:, None, :], (z.shape[0], length, z.shape[1]))
    for layer in params.decoder[:-1]:
        zeros = np.zeros((z.shape[0], layer.hidden))
        xs, _ = lstm_layer_forward(np.ascontiguousarray(xs), zeros, zeros, layer, keep=False)
    return np.ascontiguousarray(xs)


def top_layer_distances(top: LstmCellParams, drive: np.ndarray, h_a: np.ndarray,
                        h_b: np.ndarray, chunk: int = 100) -> np.ndarray:
    """||h_t - h'_t|| for t = 0..l, per trajectory pair.

    ``drive`` is (B, l, D); ``h_a``/``h_b`` are (B, H) top-layer starts.
    Cell states start at zero. Returns (B, l + 1).
    """
    B, l, _ = drive.shape
    H = top.hidden
    out = np.empty((B, l + 1))
    out[:, 0] = np.linalg.norm(h_a - h_b, axis=1)
    # the two sets run as separate same-shape products so that rows which
    # have converged bitwise stay identical from then on
    ha, hb = h_a, h_b
    ca, cb = np.zeros((B, H)), np.zeros((B, H))
    for s in range(0, l, chunk):
        e = min(s + chunk, l)
        xs = np.ascontiguousarray(drive[:, s:e])
        hsa, cache_a = lstm_layer_forward(xs, ha, ca, top, keep=False)
        hsb, cache_b = lstm_layer_forward(xs, hb, cb, top, keep=False)
        out[:, s + 1:e + 1] = np.linalg.norm(hsa - hsb, axis=2)
        ha, ca = hsa[:, -1], cache_a["c_last"]
        hb, cb = hsb[:, -1], cache_b["c_last"]
    return out


def esp_curve(params: RvaeParams, length: int, rng: Rng, n_z: int = 10, n_pairs: int = 20,
              max_redraws: int = 3) -> EspCurve:
    """Normalized top-layer state distance r(t) = d(t)/d(0) under a shared drive."""
    if length < 1:
        raise ValueError("length must be at least 1")
    H = params.hidden
    z = rng.standard_normal((n_z, params.latent))
    drive = np.repeat(decoder_drive(params, z, length), n_pairs, axis=0)
    for _ in range(max_redraws):
        h_a = rng.standard_normal((n_z * n_pairs, H))
        h_b = rng.standard_normal((n_z * n_pairs, H))
        if np.all(np.linalg.norm(h_a - h_b, axis=1) > 0):
            break
    else:
        raise FloatingPointError("initial state pairs keep coinciding")
    dist = top_layer_distances(params.decoder[-1], drive, h_a, h_b)
    d = dist.mean(axis=0)
    r = d / d[0]
    r[0] = 1.0
    return EspCurve(t=np.arange(length + 1), r=r, d=d)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class PsdComparison:
    real: Spectrum
    synth: Spectrum
    real_peaks: np.ndarray     # bin indices, increasing frequency
    synth_peaks: np.ndarray
    offsets: np.ndarray        # synth - real, in bins


def _single_channel(x, channel: Optional[int]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[2] > 1 and channel is None:
            raise ValueError("multi-channel input: pick a channel")
        x = x[:, :, channel or 0]
    if x.ndim != 2:
        raise ValueError("expected (n, l) or (n, l, c) input")
    return x


def mean_spectrum(x, channel: Optional[int] = None) -> Spectrum:
    x = _single_channel(x, channel)
    n = x.shape[1]
    return Spectrum(freqs=np.arange(n // 2 + 1) / n, power=periodogram_power(x).mean(axis=0), n=n)


def find_peaks(power: np.ndarray, n_peaks: int = 2) -> np.ndarray:
    """Bins of the largest local maxima (3-bin neighborhoods, DC excluded),
    returned in increasing frequency."""
    p = np.asarray(power)
    cands = []
    for k in range(1, len(p)):
        left = p[k - 1]
        right = p[k + 1] if k + 1 < len(p) else -np.inf
        if p[k] > left and p[k] >= right:
            cands.append(k)
    cands.sort(key=lambda k: (-p[k], k))
    return np.array(sorted(cands[:n_peaks]), dtype=np.int64)


def psd_compare(real, synth, n_peaks: int = 2, channel: Optional[int] = None) -> PsdComparison:
    rs = mean_spectrum(real, channel)
    ss = mean_spectrum(synth, channel)
    if rs.n != ss.n:
        raise ValueError(f"sequence lengths differ: {rs.n} vs {ss.n}")
    rp = find_peaks(rs.power, n_peaks)
    sp = find_peaks(ss.power, n_peaks)
    k = min(len(rp), len(sp))
    return PsdComparison(real=rs, synth=ss, real_peaks=rp, synth_peaks=sp,
                         offsets=sp[:k] - rp[:k])


# ---------------------------------------------------------------------------
# PCA overlap
# ---------------------------------------------------------------------------

def pca_overlap(real, synth, seed: int = 0):
    """Fit the top-2 PCA on ``real`` only and project both sets."""
    r = np.asarray(real, dtype=np.float64)
    s = np.asarray(synth, dtype=np.float64)
    r = r.reshape(len(r), -1)
    s = s.reshape(len(s), -1)
    if r.shape[1] != s.shape[1]:
        raise ValueError("real and synthetic samples have different sizes")
    fit = pca_top2(r, seed=seed)
    return fit, fit.projected, fit.transform(s)


def pca_overlap_export(real, synth, path, seed: int = 0):
    """Write ``set,pc1,pc2`` rows for both sets; returns (fit, real_xy, synth_xy)."""
    fit, rp, sp = pca_overlap(real, synth, seed)
    with open(path, "w", newline="") as fh:
        fh.write("set,pc1,pc2\n")
        for label, pts in (("real", rp), ("synthetic", sp)):
            for a, b in pts:
                fh.write(f"{label},{float(a)!r},{float(b)!r}\n")
    return fit, rp, sp


# ---------------------------------------------------------------------------
# results file
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ("metric", "dataset", "l", "seed", "value")


def append_results(path, rows: Sequence[Sequence]) -> None:
    """Append (metric, dataset, l, seed, value) rows, writing the header once."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for metric, dataset, l, seed, value in rows:
            w.writerow([metric, dataset, int(l), int(seed), repr(float(value))])
