"""Dense linear algebra, seeded randomness, Fourier transforms and PCA.

Everything here works in float64. Random streams come from a PCG64 bit
generator; uniforms are built from the top 53 bits of each raw 64-bit word
and Gaussians from Box-Muller on that uniform stream, so a seed pins every
draw exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def mat_mul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matrix product overflowed")
    return out


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

def derive_seed(master: int, *keys) -> int:
    """Stable 64-bit child seed from a master seed and any labels.

    The labels are joined as text and hashed with BLAKE2b, so the same
    (master, keys) always maps to the same child seed on every platform.
    """
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Single-owner random stream. Never share one between threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.PCG64(self.seed)

    def child(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n))

    def random(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return rng_uniform(self, n, lo, hi)

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return rng_normal(self, n, mean, std)

    def standard_normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return rng_normal(self, n, 0.0, 1.0).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def integer(self) -> int:
        return int(self.raw(1)[0])


def rng_uniform(rng: Rng, n: int, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"empty interval: lo={lo} > hi={hi}")
    u = rng.random(n)
    out = lo + (hi - lo) * u
    # rounding can land exactly on hi for wide intervals
    if hi > lo:
        out = np.minimum(out, np.nextafter(hi, lo))
    return out


def rng_normal(rng: Rng, n: int, mean: float, std: float) -> np.ndarray:
    if std < 0:
        raise ValueError(f"negative standard deviation {std}")
    n = int(n)
    pairs = (n + 1) // 2
    u = rng.random(2 * pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
    angle = _TWO_PI * u[pairs:]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return mean + std * z[:n]


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_radix2(a: np.ndarray, sign: float) -> np.ndarray:
    """Iterative Cooley-Tukey along the last axis; length must be 2**k."""
    n = a.shape[-1]
    lead = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        w = np.exp(sign * 1j * np.pi * np.arange(half) / half)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def _fft_forward(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n & (n - 1) == 0:
        return _fft_radix2(x, -1.0)
    # Bluestein: X_k = w_k * sum_j (x_j w_j) conj(w_{k-j}),  w_k = exp(-i pi k^2 / n)
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 2).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    conv = _fft_radix2(_fft_radix2(a, -1.0) * _fft_radix2(b, -1.0), 1.0) / m
    return conv[..., :n] * chirp


def dft(x, inverse: bool = False) -> np.ndarray:
    """Discrete Fourier transform along the last axis, any length.

    Forward is unnormalized, X_k = sum_j x_j exp(-2 pi i jk/n); the inverse
    carries the 1/n factor, so dft(dft(x), inverse=True) == x.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("dft of an empty vector")
    n = x.shape[-1]
    if not inverse:
        return _fft_forward(x)
    return np.conj(_fft_forward(np.conj(x))) / n


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class Spectrum:
    """One-sided power spectrum; freqs in cycles/sample on [0, 0.5]."""

    freqs: np.ndarray
    power: np.ndarray
    n: int

    def variance(self) -> float:
        """Mean-removed signal variance recovered from the bins (Parseval)."""
        p = self.power
        fold = np.full(p.shape[-1], 2.0)
        fold[0] = 1.0
        if self.n % 2 == 0:
            fold[-1] = 1.0
        return float(np.sum(p * fold, axis=-1) / self.n)


def periodogram_power(x: np.ndarray) -> np.ndarray:
    """|DFT|^2/n of the mean-detrended signal along the last axis, bins 0..n//2."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("periodogram needs at least 2 samples")
    centered = x - x.mean(axis=-1, keepdims=True)
    spec = dft(centered)[..., : n // 2 + 1]
    return (spec.real ** 2 + spec.imag ** 2) / n


def periodogram(x) -> Spectrum:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("periodogram expects a 1-D signal")
    power = periodogram_power(x)
    n = x.shape[0]
    return Spectrum(freqs=np.arange(n // 2 + 1) / n, power=power, n=n)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaFit:
    mean: np.ndarray
    components: np.ndarray       # (2, p), orthonormal rows
    singular_values: np.ndarray  # (2,)
    projected: np.ndarray        # fit rows in component coordinates

    def transform(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        return (rows - self.mean) @ self.components.T


def _power_eig(gram: np.ndarray, start: np.ndarray, max_iter: int, tol: float):
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        resid = np.linalg.norm(w - lam * v)
        v = w / norm
        if resid <= tol * abs(lam):
            break
    return max(lam, 0.0), v


def pca_top2(samples, seed: int = 0, max_iter: int = 200, tol: float = 1e-10) -> PcaFit:
    """Top-2 principal directions via the n x n Gram matrix (method of snapshots).

    Power iteration with deflation; the start vectors are seeded so repeated
    fits agree bitwise. Stops on a relative eigen-residual of ``tol``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D (rows x features) array")
    n, p = x.shape
    if n < 3:
        raise ValueError(f"PCA needs at least 3 rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T
    rng = Rng(seed)

    lam1, u1 = _power_eig(gram, rng.standard_normal(n), max_iter, tol)
    deflated = gram - lam1 * np.outer(u1, u1)
    start = rng.standard_normal(n)
    start -= (start @ u1) * u1
    lam2, u2 = _power_eig(deflated, start, max_iter, tol)

    comps = np.zeros((2, p))
    if lam1 > 0:
        comps[0] = xc.T @ u1 / np.sqrt(lam1)
        comps[0] /= np.linalg.norm(comps[0])
    else:
        comps[0, 0] = 1.0
    if lam2 > 1e-14 * max(lam1, 1e-300):
        c2 = xc.T @ u2 / np.sqrt(lam2)
    else:
        # rank-1 data: any unit direction orthogonal to the first will do
        c2 = rng.standard_normal(p)
    c2 = c2 - (c2 @ comps[0]) * comps[0]
    comps[1] = c2 / np.linalg.norm(c2)

    projected = xc @ comps.T
    # taken from the projections: the Gram eigenvalues only resolve singular
    # values down to sqrt(machine eps) of the largest
    sv = np.linalg.norm(projected, axis=0)
    return PcaFit(mean=mean, components=comps, singular_values=sv, projected=projected)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)
