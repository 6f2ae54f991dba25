"""Adam, early-stopped phases, and conventional vs. progressive-length training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import ChunkSpec, chunk, chunk_batch, split_train_val
from .numerics import Rng, derive_seed
from .rvae import (HIDDEN, LATENT, LAYERS, RvaeParams, elbo_norm, init_rvae, loss_backward,
                   sample_losses)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _tensors(obj) -> dict:
    if isinstance(obj, dict):
        return obj
    return obj.tensors()


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in _tensors(grads).values()))


def adam_step(params, grads, state: AdamState, clip_norm: Optional[float] = None):
    """One bias-corrected Adam update, applied to the parameter arrays in place.

    ``params`` and ``grads`` are either dicts of arrays or objects exposing
    ``tensors()`` with matching keys. Returns ``(params, state)``.
    """
    pt, gt = _tensors(params), _tensors(grads)
    if pt.keys() != gt.keys():
        raise ValueError("parameter and gradient tensors do not match")
    for k in pt:
        if pt[k].shape != gt[k].shape:
            raise ValueError(f"shape mismatch for {k}: {pt[k].shape} vs {gt[k].shape}")
    scale = 1.0
    if clip_norm is not None:
        norm = global_norm(gt)
        if norm > clip_norm:
            scale = clip_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in pt.items():
        g = gt[k] * scale if scale != 1.0 else gt[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# plans and reports
# ---------------------------------------------------------------------------

def linear_schedule(start: int, step: int, end: int) -> Tuple[int, ...]:
    """Inclusive start:step:end."""
    if start < 1 or step < 1 or end < start:
        raise ValueError(f"invalid schedule {start}:{step}:{end}")
    return tuple(range(start, end + 1, step))


@dataclass
class TrainPlan:
    schedule: Tuple[int, ...] = linear_schedule(100, 100, 1000)
    alpha_scale: float = 500.0       # alpha = alpha_scale / l
    beta: float = 0.1
    batch_size: int = 32
    max_epochs: int = 2000
    patience: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    clip_norm: Optional[float] = None
    seed: int = 0
    hidden: int = HIDDEN
    layers: int = LAYERS
    latent: int = LATENT
    chunk_fraction: float = 0.1

    def __post_init__(self):
        self.schedule = tuple(int(l) for l in self.schedule)
        if not self.schedule:
            raise ValueError("schedule is empty")
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError(f"schedule must be strictly increasing: {self.schedule}")
        if self.schedule[0] < 1:
            raise ValueError("sequence lengths must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.alpha_scale <= 0 or self.beta <= 0:
            raise ValueError("loss weights must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def alpha(self, length: int) -> float:
        return self.alpha_scale / length

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class PhaseReport:
    length: int
    epochs_run: int
    best_val_loss: float
    best_val_elbo_norm: float
    best_epoch: int = 0
    history: List[float] = field(default_factory=list)


# An objective maps (params, batch, alpha, beta, rng) to (loss, grads); an
# evaluator maps (params, batch, alpha, beta, rng) to a validation loss.
Objective = Callable[..., Tuple[float, object]]
Evaluator = Callable[..., float]


def rvae_objective(params: RvaeParams, batch, alpha, beta, rng: Rng):
    result, grads = loss_backward(params, batch, alpha, beta, rng=rng)
    return result.total, grads


def rvae_validation(params: RvaeParams, batch, alpha, beta, rng: Rng, block: int = 256) -> float:
    """Mean total loss with one fixed noise draw per validation sample."""
    eps = rng.standard_normal((len(batch), params.latent))
    parts = [sample_losses(params, batch[i:i + block], alpha, beta, eps[i:i + block])
             for i in range(0, len(batch), block)]
    return float(np.mean(np.concatenate(parts)))


def train_phase(train: np.ndarray, val: np.ndarray, params, plan: TrainPlan, phase: int = 0,
                objective: Objective = rvae_objective, evaluate: Evaluator = rvae_validation):
    """Shuffled mini-batch Adam at one length with early stopping on validation loss.

    Adam moments start fresh. The best-validation parameters are restored
    before returning ``(params, PhaseReport)``.
    """
    train = np.asarray(train, dtype=np.float64)
    val = np.asarray(val, dtype=np.float64)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train_phase needs non-empty train and validation sets")
    length, channels = train.shape[1], train.shape[2]
    alpha, beta = plan.alpha(length), plan.beta
    state = plan.adam()
    best_loss, best_params, best_epoch = math.inf, None, 0
    history, wait, epoch = [], 0, 0
    n = len(train)

    for epoch in range(1, plan.max_epochs + 1):
        order = Rng(derive_seed(plan.seed, "shuffle", phase, epoch)).permutation(n)
        noise = Rng(derive_seed(plan.seed, "noise", phase, epoch))
        for s in range(0, n, plan.batch_size):
            batch = train[order[s:s + plan.batch_size]]
            _, grads = objective(params, batch, alpha, beta, noise)
            adam_step(params, grads, state, plan.clip_norm)
        v = evaluate(params, val, alpha, beta, Rng(derive_seed(plan.seed, "val", length)))
        history.append(v)
        if not math.isfinite(v):
            log.warning("phase %d (l=%d): non-finite validation loss at epoch %d", phase, length, epoch)
        if v < best_loss:
            best_loss, best_params, best_epoch, wait = v, params.copy(), epoch, 0
        else:
            wait += 1
        log.debug("phase %d l=%d epoch %d val %.6g", phase, length, epoch, v)
        if wait >= plan.patience:
            break

    if best_params is None:
        raise FloatingPointError(f"no finite validation loss in phase {phase} (l={length})")
    report = PhaseReport(length=length, epochs_run=epoch, best_val_loss=best_loss,
                         best_val_elbo_norm=elbo_norm(best_loss, alpha, beta, length, channels),
                         best_epoch=best_epoch, history=history)
    log.info("phase %d l=%d: %d epochs, best val %.6g (elbo_norm %.4f) at epoch %d",
             phase, length, epoch, best_loss, report.best_val_elbo_norm, best_epoch)
    return best_params, report


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------

def make_phase_data(source, length: int, phase: int, plan: TrainPlan) -> np.ndarray:
    """Samples of exactly ``length`` steps from a series, a batch or a generator.

    ``source`` may be a (time, channels) array or RawSeries (chunked with step
    ``chunk_fraction * l``), an (n, L, c) batch whose samples are chunked the
    same way, or a callable ``source(length, phase)`` returning a batch.
    """
    if callable(source):
        data = np.asarray(source(length, phase), dtype=np.float64)
    else:
        values = getattr(source, "values", source)
        values = np.asarray(values, dtype=np.float64)
        spec = ChunkSpec.fraction(length, plan.chunk_fraction)
        if values.ndim == 3:
            if values.shape[1] < length:
                raise ValueError(f"samples of length {values.shape[1]} are shorter than l={length}")
            data = values if values.shape[1] == length else chunk_batch(values, spec)
        else:
            if values.shape[0] < length:
                raise ValueError(f"series of length {values.shape[0]} is shorter than l={length}")
            data = chunk(values, spec)
    if data.ndim != 3 or data.shape[1] != length:
        raise ValueError(f"phase data must be (n, {length}, c), got {data.shape}")
    return data


def _source_length(source) -> Optional[int]:
    if callable(source):
        return None
    values = np.asarray(getattr(source, "values", source))
    return values.shape[1] if values.ndim == 3 else values.shape[0]


def subsequent_train(source, plan: TrainPlan, params: Optional[RvaeParams] = None,
                     on_phase: Optional[Callable[[int, RvaeParams, PhaseReport], None]] = None):
    """Train at each schedule length in turn, carrying the weights forward.

    The split and the validation noise are keyed by length, so two runs that
    both reach a length score on the same validation set there. Returns
    ``(params, reports)`` with one PhaseReport per schedule entry.
    """
    have = _source_length(source)
    if have is not None and have < plan.schedule[-1]:
        raise ValueError(f"data length {have} is shorter than the final l={plan.schedule[-1]}")
    reports = []
    for phase, length in enumerate(plan.schedule):
        data = make_phase_data(source, length, phase, plan)
        train, val = split_train_val(data, derive_seed(plan.seed, "split", length))
        if params is None:
            params = init_rvae(data.shape[2], Rng(derive_seed(plan.seed, "init")),
                               hidden=plan.hidden, layers=plan.layers, latent=plan.latent)
        params, report = train_phase(train, val, params, plan, phase=phase)
        reports.append(report)
        if on_phase is not None:
            on_phase(phase, params, report)
    return params, reports


def conventional_train(source, length: int, plan: TrainPlan):
    """Single phase at ``length`` from a fresh initialization."""
    params, reports = subsequent_train(source, replace(plan, schedule=(int(length),)))
    return params, reports[0]
