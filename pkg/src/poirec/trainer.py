"""Cloze-style training with pairwise BPR loss and uniform negatives."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import PAD, Catalog, SplitDataset
from .model import ModelConfig, ModelParams, init_params, masked_hidden, pad_left, score_selected
from .numerics import Tensor, make_rng

logger = logging.getLogger(__name__)

# stream tags for make_rng; keep stable, they are part of reproducibility
_SHUFFLE, _BATCH, _VALID = 1, 2, 3


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during optimisation."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.001
    batch_size: int = 16
    mask_ratio: float = 0.2
    negatives_per_positive: int = 1
    seed: int = 0
    early_stop_patience: int | None = None
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    valid_negatives: int = 100
    last_item_mask_prob: float = 0.0
    random_crop: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.negatives_per_positive < 1:
            raise ValueError("epochs, batch_size and negatives_per_positive must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class MaskedBatch:
    tokens: np.ndarray  # [B, N]
    positions: np.ndarray  # [P, 2] (row, t), row-major order
    targets: np.ndarray  # [P]
    negatives: np.ndarray  # [P, X]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    valid_hr10: float = float("nan")
    wall_seconds: float = 0.0


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


# -- sampling -----------------------------------------------------------------

def apply_cloze_mask(sequence: Sequence[int], mask_ratio: float, rng: np.random.Generator,
                     mask_token: int):
    """Mask each position with probability ``mask_ratio``; force one mask if none was drawn.

    Returns a new list, the masked positions and their original items.  The
    input sequence is not modified.
    """
    seq = list(sequence)
    if not seq:
        raise ValueError("cannot mask an empty sequence")
    chosen = rng.random(len(seq)) < mask_ratio
    if not chosen.any():
        chosen[rng.integers(len(seq))] = True
    positions = np.flatnonzero(chosen)
    targets = [seq[p] for p in positions]
    for p in positions:
        seq[p] = mask_token
    return seq, positions.tolist(), targets


def sample_negatives_uniform(target, num_items: int, x: int, rng: np.random.Generator) -> np.ndarray:
    """``x`` items drawn uniformly with replacement from ``{1..num_items} \\ {target}``.

    ``target`` may be an array, in which case the result has shape ``target.shape + (x,)``.
    """
    if num_items < 2:
        raise ValueError("no negatives available")
    target = np.asarray(target, dtype=np.int64)
    draws = rng.integers(1, num_items, size=target.shape + (x,))
    # shift values at or above the target up by one: uniform over the other items
    return draws + (draws >= target[..., None])


def bpr_loss(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Mean of ``-ln sigmoid(s_pos - s_neg)`` over all (position, negative) pairs."""
    pos_scores, neg_scores = nx.as_tensor(pos_scores), nx.as_tensor(neg_scores)
    if pos_scores.ndim == 1:
        pos_scores = nx.reshape(pos_scores, (-1, 1))
    if pos_scores.shape[0] != neg_scores.shape[0]:
        raise ValueError(f"bpr_loss shape mismatch {pos_scores.shape} vs {neg_scores.shape}")
    return nx.mean(nx.softplus(neg_scores - pos_scores))


def training_windows(sequences: Sequence[Sequence[int]], max_len: int,
                     rng: np.random.Generator | None = None) -> list[tuple[int, ...]]:
    """Cut each sequence into ``max_len`` chunks aligned to its end.

    With ``rng``, each sequence first loses a random number of its most recent
    items (leaving at least two), so that across epochs every item is seen at
    every window position rather than at one fixed phase.
    """
    out = []
    for seq in sequences:
        seq = tuple(seq)
        end = len(seq)
        if rng is not None and end > 2:
            end -= int(rng.integers(0, min(max_len, end - 1)))
        while end > 0:
            start = max(0, end - max_len)
            out.append(seq[start:end])
            end = start
    return out


def make_batch(windows: Sequence[Sequence[int]], catalog: Catalog, model_config: ModelConfig,
               train_config: TrainConfig, rng: np.random.Generator) -> MaskedBatch:
    rows, positions, targets = [], [], []
    n = model_config.max_seq_len
    for r, window in enumerate(windows):
        if train_config.last_item_mask_prob and rng.random() < train_config.last_item_mask_prob:
            masked, pos, tgt = list(window[:-1]) + [catalog.mask_token], [len(window) - 1], [window[-1]]
        else:
            masked, pos, tgt = apply_cloze_mask(window, train_config.mask_ratio, rng, catalog.mask_token)
        offset = n - len(masked)
        rows.append(pad_left(masked, n))
        positions += [(r, offset + p) for p in pos]
        targets += tgt
    positions = np.asarray(positions, dtype=np.int64)
    order = np.lexsort((positions[:, 1], positions[:, 0]))
    targets = np.asarray(targets, dtype=np.int64)[order]
    negatives = sample_negatives_uniform(targets, catalog.num_items,
                                         train_config.negatives_per_positive, rng)
    return MaskedBatch(np.asarray(rows, dtype=np.int64), positions[order], targets, negatives)


def batch_loss(batch: MaskedBatch, catalog: Catalog, params: ModelParams, model_config: ModelConfig,
               mode: str = "train", rng=None) -> Tensor:
    hidden, positions = masked_hidden(batch.tokens, catalog, params, model_config, mode=mode, rng=rng)
    assert np.array_equal(positions, batch.positions)
    ids = np.concatenate([batch.targets[:, None], batch.negatives], axis=1)
    scores = score_selected(hidden, ids, params)
    return bpr_loss(scores[:, 0], scores[:, 1:])


# -- optimiser ------------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over a :class:`ModelParams` mapping."""

    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm: float | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: ModelParams) -> float:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, t in params.items():
            g = grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


# -- loops ----------------------------------------------------------------------

def train_epoch(params: ModelParams, train: Sequence[Sequence[int]], catalog: Catalog,
                train_config: TrainConfig, model_config: ModelConfig, epoch: int = 0,
                optimizer: Adam | None = None) -> tuple[ModelParams, EpochStats]:
    """One pass over shuffled training windows; updates ``params`` in place.

    Randomness for the shuffle and for each batch comes from streams keyed by
    ``(seed, epoch)`` and ``(seed, epoch, batch)``.
    """
    if not any(len(s) for s in train):
        raise ValueError("empty training set")
    if optimizer is None:
        optimizer = Adam(params, train_config.learning_rate, train_config.beta1, train_config.beta2,
                         train_config.adam_eps, train_config.clip_norm)
    seed = train_config.seed
    shuffle_rng = make_rng(seed, _SHUFFLE, epoch)
    windows = training_windows([s for s in train if len(s) > 0], model_config.max_seq_len,
                               shuffle_rng if train_config.random_crop else None)
    order = shuffle_rng.permutation(len(windows))
    start = time.perf_counter()
    losses = []
    for b, lo in enumerate(range(0, len(windows), train_config.batch_size)):
        rng = make_rng(seed, _BATCH, epoch, b)
        batch = make_batch([windows[i] for i in order[lo:lo + train_config.batch_size]],
                           catalog, model_config, train_config, rng)
        params.zero_grad()
        loss = batch_loss(batch, catalog, params, model_config, mode="train", rng=rng)
        value = loss.item()
        if not math.isfinite(value):
            norms = {k: float(np.linalg.norm(t.data)) for k, t in params.items()}
            raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {b}; parameter norms {norms}")
        nx.backward(loss)
        optimizer.step(params)
        losses.append(value)
    params.zero_grad()
    stats = EpochStats(epoch, float(np.mean(losses)), len(losses),
                       wall_seconds=time.perf_counter() - start)
    return params, stats


def validation_hr10(params: ModelParams, data: SplitDataset, model_config: ModelConfig,
                    train_config: TrainConfig) -> float:
    from .evaluator import EvalProtocol, evaluate

    x = min(train_config.valid_negatives, data.catalog.num_items - 1)
    protocol = EvalProtocol("uniform", x=x, ks=(10,), seed=train_config.seed)
    report = evaluate(params, model_config, data.valid, data.catalog, protocol)
    return report.mean("hr", 10)


def fit(data: SplitDataset, train_config: TrainConfig, model_config: ModelConfig,
        params: ModelParams | None = None,
        validator: Callable[[ModelParams], float] | None = None,
        on_epoch: Callable[[EpochStats], None] | None = None) -> FitResult:
    """Train for up to ``epochs`` epochs, keeping the parameters with the best validation HR@10."""
    catalog = data.catalog
    if params is None:
        params = init_params(model_config, catalog.num_items, catalog.num_keywords, train_config.seed)
    if validator is None:
        def validator(p):
            return validation_hr10(p, data, model_config, train_config)
    optimizer = Adam(params, train_config.learning_rate, train_config.beta1, train_config.beta2,
                     train_config.adam_eps, train_config.clip_norm)
    best, best_hr, best_epoch, stale = None, -math.inf, 0, 0
    history = []
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        params, stats = train_epoch(params, data.train, catalog, train_config, model_config,
                                    epoch=epoch, optimizer=optimizer)
        stats.valid_hr10 = float(validator(params))
        stats.wall_seconds = time.perf_counter() - start
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        logger.info("epoch %d loss %.6f valid HR@10 %.4f", epoch, stats.mean_loss, stats.valid_hr10)
        if stats.valid_hr10 >= best_hr:
            # ties keep the later parameters but do not count as progress
            stale = 0 if stats.valid_hr10 > best_hr else stale + 1
            best, best_hr, best_epoch = params.copy(), stats.valid_hr10, epoch
        else:
            stale += 1
        if train_config.early_stop_patience is not None and stale >= train_config.early_stop_patience:
            break
    return FitResult(best, history, best_epoch)


def history_csv(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,mean_loss,valid_hr10,wall_seconds"]
    for s in history:
        lines.append(f"{s.epoch},{s.mean_loss!r},{s.valid_hr10!r},{s.wall_seconds:.3f}")
    return "\n".join(lines) + "\n"
