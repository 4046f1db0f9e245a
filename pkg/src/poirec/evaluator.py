"""Top-k ranking metrics and candidate-sampling evaluation protocols.

Three protocols are supported for building the ranked candidate list of a
held-out target: ``full`` (every item), ``uniform`` (target plus X distinct
uniformly drawn items) and ``popularity`` (target plus X distinct items drawn
proportionally to training popularity).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Catalog
from .model import ModelConfig, ModelParams, next_item_scores, rank_items
from .numerics import make_rng

METRICS = ("precision", "recall", "f1", "hr", "ndcg")
STRATEGIES = ("full", "uniform", "popularity")
SCHEMA_VERSION = 1


# -- per-user metrics ------------------------------------------------------------

def precision_at_k(recommended: Sequence, relevant: Iterable, k: int) -> float:
    if len(recommended) == 0:
        raise ValueError("empty recommendation list")
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = set(relevant)
    top = recommended[:k]
    return sum(1 for r in top if r in rel) / min(k, len(recommended))


def recall_at_k(recommended: Sequence, relevant: Iterable, k: int) -> float:
    rel = set(relevant)
    if not rel:
        raise ValueError("empty relevant set")
    return sum(1 for r in recommended[:k] if r in rel) / len(rel)


def f1_at_k(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def hit_rate_at_k(recommended: Sequence, relevant: Iterable, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = set(relevant)
    return 1.0 if any(r in rel for r in recommended[:k]) else 0.0


def ndcg_at_k(recommended: Sequence, relevant: Iterable, k: int) -> float:
    """DCG over the top-k normalised by the ideal DCG for ``min(|relevant|, k)`` hits."""
    rel = set(relevant)
    if not rel:
        raise ValueError("empty relevant set")
    dcg = sum(1.0 / math.log2(i + 2) for i, r in enumerate(recommended[:k]) if r in rel)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(rel), k)))
    return dcg / idcg


def _single_target_metrics(rank: int, k: int, list_len: int) -> dict[str, float]:
    """All five metrics for one relevant item found at 1-based ``rank``."""
    hit = 1.0 if rank <= k else 0.0
    precision = hit / min(k, list_len)
    return {
        "precision": precision,
        "recall": hit,
        "f1": f1_at_k(precision, hit),
        "hr": hit,
        "ndcg": hit / math.log2(rank + 1),
    }


# -- protocols ------------------------------------------------------------------

@dataclass(frozen=True)
class EvalProtocol:
    strategy: str = "full"
    x: int = 100
    ks: tuple[int, ...] = (10, 20, 50)
    seed: int = 0
    exclude_train_items: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("ks must be a nonempty list of positive cutoffs")
        if self.strategy != "full" and self.x < 1:
            raise ValueError("X must be >= 1 for sampled protocols")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))

    @property
    def label(self) -> str:
        return "full" if self.strategy == "full" else f"{self.strategy[:3]}-{self.x}"

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "X": self.x if self.strategy != "full" else None,
                "ks": list(self.ks), "seed": self.seed}


def _draw_without_replacement(pool: np.ndarray, weights: np.ndarray | None, x: int,
                              rng: np.random.Generator) -> np.ndarray:
    if weights is None:
        return rng.choice(pool, size=x, replace=False)
    # sequential draws renormalised after each pick
    return rng.choice(pool, size=x, replace=False, p=weights / weights.sum())


def build_candidates(protocol: EvalProtocol, target: int, user_train_items, catalog: Catalog,
                     rng: np.random.Generator) -> np.ndarray:
    """Candidate items for one held-out target; the target is always first for sampled protocols."""
    items = np.arange(1, catalog.num_items + 1)
    excluded = set(user_train_items) - {target} if protocol.exclude_train_items else set()
    if protocol.strategy == "full":
        if excluded:
            items = items[~np.isin(items, list(excluded))]
        return items
    x = protocol.x
    pool = items[items != target]
    if excluded:
        pool = pool[~np.isin(pool, list(excluded))]
    if len(pool) < x:
        raise ValueError(f"cannot draw {x} distinct negatives from {len(pool)} items")
    if protocol.strategy == "uniform":
        negs = _draw_without_replacement(pool, None, x, rng)
    else:
        counts = catalog.popularity_array[pool - 1].astype(np.float64)
        positive = counts > 0
        n_pos = int(positive.sum())
        if n_pos >= x:
            negs = _draw_without_replacement(pool[positive], counts[positive], x, rng)
        else:
            # every popular item, topped up uniformly from the zero-count ones
            filler = _draw_without_replacement(pool[~positive], None, x - n_pos, rng)
            negs = np.concatenate([pool[positive], filler])
    return np.concatenate([[target], negs]).astype(np.int64)


# -- reports ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    protocol: EvalProtocol
    num_users: int
    stats: dict = field(default_factory=dict)  # (metric, k) -> (mean, sd)
    per_user: dict = field(default_factory=dict)  # (metric, k) -> np.ndarray

    def mean(self, metric: str, k: int) -> float:
        return self.stats[(metric, k)][0]

    def sd(self, metric: str, k: int) -> float:
        return self.stats[(metric, k)][1]

    def rows(self) -> list[dict]:
        p = self.protocol
        return [
            {"metric": m, "k": k, "mean": self.stats[(m, k)][0], "sd": self.stats[(m, k)][1],
             "protocol": p.strategy, "X": p.x if p.strategy != "full" else "",
             "seed": p.seed, "num_users": self.num_users}
            for m in METRICS for k in p.ks
        ]

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "protocol": self.protocol.to_dict(),
            "num_users": self.num_users,
            "metrics": [{k: r[k] for k in ("metric", "k", "mean", "sd")} for r in self.rows()],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["metric", "k", "mean", "sd", "protocol", "X", "seed", "num_users"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows():
            writer.writerow({**r, "mean": repr(r["mean"]), "sd": repr(r["sd"])})
        return buf.getvalue()


def _aggregate(per_user: dict) -> dict:
    # population standard deviation across users
    return {key: (float(np.mean(v)), float(np.std(v))) for key, v in per_user.items()}


def rank_test_targets(params: ModelParams, model_config: ModelConfig,
                      pairs: Sequence[tuple[Sequence[int], int]], catalog: Catalog,
                      protocol: EvalProtocol, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """1-based rank of each target within its candidate list, and each list's length.

    Candidate sampling for user ``i`` uses the stream ``(seed, i)``, so the
    result does not depend on batching or on the order users are processed in.
    """
    ranks = np.empty(len(pairs), dtype=np.int64)
    sizes = np.empty(len(pairs), dtype=np.int64)
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        scores = next_item_scores([ctx for ctx, _ in chunk], catalog, params, model_config)
        for j, (ctx, target) in enumerate(chunk):
            u = lo + j
            cands = build_candidates(protocol, target, ctx, catalog, make_rng(protocol.seed, u))
            ranked = rank_items(scores[j], cands)
            ranks[u] = int(np.flatnonzero(ranked == target)[0]) + 1
            sizes[u] = len(ranked)
    return ranks, sizes


def metrics_from_ranks(ranks: np.ndarray, sizes: np.ndarray, ks: Iterable[int]) -> dict:
    per_user = {}
    for k in ks:
        rows = [_single_target_metrics(int(r), k, int(s)) for r, s in zip(ranks, sizes)]
        for m in METRICS:
            per_user[(m, k)] = np.array([row[m] for row in rows])
    _check_identities(per_user, ranks, sizes, ks)
    return per_user


def _check_identities(per_user: dict, ranks, sizes, ks) -> None:
    for k in ks:
        hr = per_user[("hr", k)]
        if not np.array_equal(per_user[("recall", k)], hr):
            raise AssertionError(f"recall@{k} != HR@{k} with a single relevant item")
        if not np.allclose(per_user[("precision", k)], hr / np.minimum(k, sizes), rtol=0, atol=1e-15):
            raise AssertionError(f"precision@{k} != HR@{k}/k with a single relevant item")
        expected = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
        if not np.allclose(per_user[("ndcg", k)], expected, rtol=0, atol=1e-15):
            raise AssertionError(f"NDCG@{k} != 1/log2(rank+1) with a single relevant item")


def evaluate(params: ModelParams, model_config: ModelConfig,
             pairs: Sequence[tuple[Sequence[int], int]], catalog: Catalog,
             protocol: EvalProtocol, batch_size: int = 16) -> MetricsReport:
    """Rank every held-out target under ``protocol`` and aggregate metrics over users."""
    if len(pairs) == 0:
        raise ValueError("empty test set")
    ranks, sizes = rank_test_targets(params, model_config, pairs, catalog, protocol, batch_size)
    per_user = metrics_from_ranks(ranks, sizes, protocol.ks)
    return MetricsReport(protocol, len(pairs), _aggregate(per_user), per_user)


def sweep_k(params: ModelParams, model_config: ModelConfig,
            pairs: Sequence[tuple[Sequence[int], int]], catalog: Catalog, protocol: EvalProtocol,
            k_min: int = 10, k_max: int = 100, step: int = 10, batch_size: int = 16) -> list[dict]:
    """F1, HR and NDCG for every k in ``range(k_min, k_max + 1, step)`` from one ranking pass."""
    if k_min < 1 or k_max < k_min or step < 1:
        raise ValueError("need 1 <= k_min <= k_max and step >= 1")
    ranks, sizes = rank_test_targets(params, model_config, pairs, catalog, protocol, batch_size)
    if k_max > int(sizes.min()):
        raise ValueError(f"k_max {k_max} exceeds candidate-set size {int(sizes.min())}")
    ks = list(range(k_min, k_max + 1, step))
    per_user = metrics_from_ranks(ranks, sizes, ks)
    stats = _aggregate(per_user)
    return [
        {"k": k, **{f"{m}_mean": stats[(m, k)][0] for m in ("f1", "hr", "ndcg")},
         **{f"{m}_sd": stats[(m, k)][1] for m in ("f1", "hr", "ndcg")}}
        for k in ks
    ]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["k", "f1_mean", "f1_sd", "hr_mean", "hr_sd", "ndcg_mean", "ndcg_sd"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: (r[c] if c == "k" else repr(r[c])) for c in cols})
    return buf.getvalue()
