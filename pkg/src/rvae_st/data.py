"""Dataset ingestion, scaling, chunking, synthetic generators and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .numerics import Rng, dft
from .rvae import RvaeParams, params_from_tensors, shapes_for

# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


class CsvFormatError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray                 # (time, channels)
    channel_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("raw series must be (time, channels)")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.values.shape[1])]
        if len(self.channel_names) != self.values.shape[1]:
            raise ValueError("channel name count does not match the data")


def _fmt(v: float) -> str:
    return repr(float(v))


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise CsvFormatError(f"{path}: header has empty column names")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                raise CsvFormatError(f"{path}: row {lineno} has a non-numeric cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise CsvFormatError(f"{path}: row {lineno} contains NaN or infinity")
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return header, np.array(rows, dtype=np.float64)


def load_csv(path) -> RawSeries:
    """Read a time x channels table with a header row of channel names."""
    header, body = _read_rows(path)
    return RawSeries(body, header)


def save_csv(path, series: RawSeries) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(series.channel_names) + "\n")
        for row in series.values:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def save_batch_csv(path, batch: np.ndarray, channel_names: Optional[Sequence[str]] = None) -> None:
    """Long-format batch file: columns ``sample,t,<channels...>``."""
    batch = np.asarray(batch, dtype=np.float64)
    n, l, c = batch.shape
    names = list(channel_names) if channel_names else [f"ch{i}" for i in range(c)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["sample", "t"] + names) + "\n")
        for i in range(n):
            for t in range(l):
                fh.write(f"{i},{t}," + ",".join(_fmt(v) for v in batch[i, t]) + "\n")


def load_batch_csv(path):
    """Inverse of :func:`save_batch_csv`; returns ``(batch, channel_names)``."""
    header, body = _read_rows(path)
    if header[:2] != ["sample", "t"]:
        raise CsvFormatError(f"{path}: batch files start with 'sample,t' columns")
    sample = body[:, 0].astype(np.int64)
    t = body[:, 1].astype(np.int64)
    n = int(sample.max()) + 1
    l = int(t.max()) + 1
    if body.shape[0] != n * l:
        raise CsvFormatError(f"{path}: expected {n}x{l} rows, found {body.shape[0]}")
    batch = np.empty((n, l, len(header) - 2))
    batch[sample, t] = body[:, 2:]
    return batch, header[2:]


def is_batch_csv(path) -> bool:
    with open(path, newline="") as fh:
        first = fh.readline().strip().split(",")
    return [h.strip() for h in first[:2]] == ["sample", "t"]


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalerState:
    """Per-channel affine map of [min, max] onto [-1, 1]."""

    min: np.ndarray
    max: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * (x - self.min) / (self.max - self.min) - 1.0

    def invert(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return (y + 1.0) * 0.5 * (self.max - self.min) + self.min


def fit_scaler(values) -> ScalerState:
    """Fit on a (time, channels) series or an (n, l, channels) batch."""
    v = np.asarray(values.values if isinstance(values, RawSeries) else values, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1])
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    const = np.nonzero(hi <= lo)[0]
    if const.size:
        raise ValueError(f"constant channel(s) {const.tolist()} cannot be min-max scaled")
    return ScalerState(min=lo, max=hi)


# ---------------------------------------------------------------------------
# chunking and splitting
# ---------------------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ChunkSpec:
    length: int
    step: Optional[int] = None

    def __post_init__(self):
        if self.step is None:
            self.step = max(1, round_half_up(0.1 * self.length))
        if not 1 <= self.step <= self.length:
            raise ValueError(f"step must lie in [1, {self.length}], got {self.step}")

    @classmethod
    def fraction(cls, length: int, frac: float) -> "ChunkSpec":
        return cls(length, max(1, round_half_up(frac * length)))


def chunk_count(n: int, spec: ChunkSpec) -> int:
    return (n - spec.length) // spec.step + 1


def chunk(series, spec: ChunkSpec) -> np.ndarray:
    """Windows of ``spec.length`` starting at 0, step, 2*step, ..."""
    v = np.asarray(series.values if isinstance(series, RawSeries) else series, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    n = v.shape[0]
    if n < spec.length:
        raise ValueError(f"series of length {n} is shorter than chunk length {spec.length}")
    starts = np.arange(chunk_count(n, spec)) * spec.step
    idx = starts[:, None] + np.arange(spec.length)[None, :]
    return v[idx]


def chunk_batch(batch: np.ndarray, spec: ChunkSpec) -> np.ndarray:
    """Chunk every sample of an (n, L, c) batch and stack the windows."""
    return np.concatenate([chunk(s, spec) for s in batch], axis=0)


def split_indices(n: int, seed: int, val_every: int = 10):
    if n < val_every:
        raise ValueError(f"need at least {val_every} samples to split, got {n}")
    perm = Rng(seed).permutation(n)
    n_val = n // val_every
    return perm[n_val:], perm[:n_val]


def split_train_val(batch: np.ndarray, seed: int):
    """Seeded 9:1 shuffle-split."""
    train_idx, val_idx = split_indices(len(batch), seed)
    return batch[train_idx], batch[val_idx]


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def sine_batch(freqs: np.ndarray, phases: np.ndarray, length: int) -> np.ndarray:
    """sin(2 pi f t + phi) for t = 0..length-1; freqs/phases are (n, channels)."""
    t = np.arange(length, dtype=np.float64)
    arg = 2.0 * np.pi * freqs[:, None, :] * t[None, :, None] + phases[:, None, :]
    return np.sin(arg)


def gen_sine(n_samples: int, length: int, channels: int = 5, rng: Optional[Rng] = None) -> np.ndarray:
    """Independent unit sines per sample and channel; f = |N(0, 0.1)|, phase ~ N(0, 0.1)."""
    if n_samples < 1 or length < 1:
        raise ValueError("n_samples and length must be positive")
    rng = rng or Rng(0)
    k = n_samples * channels
    freqs = np.abs(rng.normal(k, 0.0, 0.1)).reshape(n_samples, channels)
    phases = rng.normal(k, 0.0, 0.1).reshape(n_samples, channels)
    return sine_batch(freqs, phases, length)


PSD_PEAKS = ((0.08, 1.0), (0.12, 0.9))
PSD_WIDTH = 0.002
PSD_FLOOR = 1e-4


def target_psd(freqs, peaks=PSD_PEAKS, width=PSD_WIDTH, floor=PSD_FLOOR) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=np.float64)
    p = np.full(freqs.shape, floor)
    for f0, amp in peaks:
        p += amp * np.exp(-(freqs - f0) ** 2 / (2.0 * width ** 2))
    return p


def psd_signals(n_samples: int, length: int, rng: Rng, peaks=PSD_PEAKS, width=PSD_WIDTH,
                floor=PSD_FLOOR, return_imag: bool = False):
    """Unscaled signals with magnitude sqrt(P) and uniform random phases."""
    n_half = length // 2 + 1
    mag = np.sqrt(target_psd(np.arange(n_half) / length, peaks, width, floor))
    phases = rng.uniform(n_samples * n_half, 0.0, 2.0 * np.pi).reshape(n_samples, n_half)
    half = mag * np.exp(1j * phases)
    half[:, 0] = mag[0]
    if length % 2 == 0:
        half[:, -1] = mag[-1]
    spec = np.empty((n_samples, length), dtype=np.complex128)
    spec[:, :n_half] = half
    tail = np.arange(n_half, length)
    spec[:, tail] = np.conj(half[:, length - tail])
    sig = dft(spec, inverse=True)
    if return_imag:
        return sig.real, np.abs(sig.imag).max(initial=0.0)
    return sig.real


def gen_psd_dataset(n_samples: int = 30000, length: int = 1000, rng: Optional[Rng] = None,
                    peaks=PSD_PEAKS, width=PSD_WIDTH, floor=PSD_FLOOR,
                    block: int = 2000) -> np.ndarray:
    """Single-channel signals with a two-peak target spectrum, scaled jointly to [-1, 1]."""
    if length < 8:
        raise ValueError("length must be at least 8")
    if int(min(f for f, _ in peaks) * length) < 1:
        raise ValueError(f"length {length} cannot resolve the lowest spectral peak")
    rng = rng or Rng(0)
    out = np.empty((n_samples, length))
    for s in range(0, n_samples, block):
        e = min(s + block, n_samples)
        sig, imag = psd_signals(e - s, length, rng, peaks, width, floor, return_imag=True)
        if imag > 1e-9:
            raise FloatingPointError(f"inverse transform left imaginary residue {imag}")
        out[s:e] = sig
    lo, hi = out.min(), out.max()
    out = 2.0 * (out - lo) / (hi - lo) - 1.0
    # pin the extremes exactly against rounding
    out[np.unravel_index(np.argmin(out), out.shape)] = -1.0
    out[np.unravel_index(np.argmax(out), out.shape)] = 1.0
    return out[:, :, None]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RVST"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: RvaeParams
    scaler: Optional[ScalerState] = None
    seed: int = 0
    schedule: List[int] = field(default_factory=list)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    d = p.dims()
    tensors = p.tensors()
    manifest = json.dumps([[k, list(t.shape)] for k, t in tensors.items()],
                          separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<5I", d["c"], d["d_c"], d["hidden"], d["layers"], d["z"]),
             struct.pack("<I", len(manifest)), manifest]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors.values()]
    if ckpt.scaler is None:
        parts.append(struct.pack("<I", 0))
    else:
        lo = np.asarray(ckpt.scaler.min, dtype="<f8")
        hi = np.asarray(ckpt.scaler.max, dtype="<f8")
        parts += [struct.pack("<I", lo.size), lo.tobytes(), hi.tobytes()]
    parts.append(struct.pack("<Q", int(ckpt.seed) & 0xFFFFFFFFFFFFFFFF))
    parts.append(struct.pack("<I", len(ckpt.schedule)))
    parts.append(struct.pack(f"<{len(ckpt.schedule)}I", *ckpt.schedule))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < len(MAGIC):
        raise CheckpointTruncatedError("checkpoint truncated inside the magic bytes")
    if r.take(4) != MAGIC:
        raise CheckpointMagicError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    c, d_c, hidden, layers, z = r.unpack("<5I")
    (mlen,) = r.unpack("<I")
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable tensor manifest: {exc}") from None
    expected = [[k, list(s)] for k, s in shapes_for(c, d_c, hidden, layers, z).items()]
    if manifest != expected:
        raise CheckpointError("tensor manifest does not match the declared dimensions")
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    (sc,) = r.unpack("<I")
    scaler = None
    if sc:
        lo = np.frombuffer(r.take(8 * sc), dtype="<f8").astype(np.float64)
        hi = np.frombuffer(r.take(8 * sc), dtype="<f8").astype(np.float64)
        scaler = ScalerState(min=lo, max=hi)
    (seed,) = r.unpack("<Q")
    (ns,) = r.unpack("<I")
    schedule = list(r.unpack(f"<{ns}I"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return Checkpoint(params=params_from_tensors(tensors, layers), scaler=scaler,
                      seed=seed, schedule=schedule)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
