"""Bidirectional transformer recommender with keyword-augmented item embeddings.

Input representation at position t is ``E_V[item_t] + E_P[t] + k_t`` where
``k_t`` is the multi-hot keyword vector of the item projected by ``W_K``.
Item scores at a position are ``E_V @ gelu(H h_t) + b_out`` (output weights
tied to the item table).

Sequences are left-padded, so the most recent item (or the appended mask
token at inference) always sits at position ``max_seq_len - 1``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import PAD, Catalog
from .numerics import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "embed_sequence",
    "encode",
    "score_items",
    "score_selected",
    "forward_masked",
    "masked_hidden",
    "pad_left",
    "predict_next",
    "rank_items",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    num_heads: int = 6
    hidden_size: int = 256
    max_seq_len: int = 100
    mask_ratio: float = 0.2
    dropout_rate: float = 0.5
    ffn_multiplier: int = 4
    use_keywords: bool = True
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.hidden_size, self.ffn_multiplier) < 1:
            raise ValueError("layer, head, hidden and ffn sizes must be positive")
        if self.num_heads > self.hidden_size:
            raise ValueError(f"num_heads {self.num_heads} exceeds hidden_size {self.hidden_size}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def attention_width(self) -> int:
        """Concatenated head width; below ``hidden_size`` when heads do not divide it."""
        return self.num_heads * self.head_dim

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ModelParams(dict):
    """Ordered mapping from parameter name to trainable :class:`Tensor`."""

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def assert_finite(self):
        for t in self.values():
            t.check_finite()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.values())


# -- initialisation -----------------------------------------------------------

def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_shapes(config: ModelConfig, num_items: int, num_keywords: int) -> list[tuple[str, tuple, str]]:
    d, f = config.hidden_size, config.hidden_size * config.ffn_multiplier
    w = config.attention_width
    spec = [
        ("item_embedding", (num_items + 2, d), "weight"),
        ("position_embedding", (config.max_seq_len, d), "weight"),
    ]
    if config.use_keywords and num_keywords > 0:
        spec.append(("keyword_projection", (num_keywords, d), "weight"))
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        for proj in ("query", "key", "value"):
            spec.append((p + f"attn.{proj}.weight", (d, w), "weight"))
            spec.append((p + f"attn.{proj}.bias", (w,), "zeros"))
        spec.append((p + "attn.output.weight", (w, d), "weight"))
        spec.append((p + "attn.output.bias", (d,), "zeros"))
        spec += [
            (p + "attn_norm.gain", (d,), "ones"),
            (p + "attn_norm.bias", (d,), "zeros"),
            (p + "ffn.in.weight", (d, f), "weight"),
            (p + "ffn.in.bias", (f,), "zeros"),
            (p + "ffn.out.weight", (f, d), "weight"),
            (p + "ffn.out.bias", (d,), "zeros"),
            (p + "ffn_norm.gain", (d,), "ones"),
            (p + "ffn_norm.bias", (d,), "zeros"),
        ]
    spec += [("head.weight", (d, d), "weight"), ("output_bias", (num_items + 2,), "zeros")]
    return spec


def init_params(config: ModelConfig, num_items: int, num_keywords: int, seed: int) -> ModelParams:
    """Truncated-normal(0, 0.02) weights, zero biases, unit norm gains.

    Each weight draws from its own stream keyed by ``(seed, crc32(name))``, so
    adding or removing a parameter leaves every other initial value unchanged.
    """
    params = ModelParams()
    for name, shape, kind in _param_shapes(config, num_items, num_keywords):
        if kind == "weight":
            data = _truncated_normal(nx.make_rng(seed, zlib.crc32(name.encode())), shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        if name == "item_embedding":
            data[PAD] = 0.0
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- forward pass -------------------------------------------------------------

def pad_left(seq: Sequence[int], length: int) -> list[int]:
    seq = list(seq)[-length:]
    return [PAD] * (length - len(seq)) + seq


def embed_sequence(items, catalog: Catalog, params: ModelParams, config: ModelConfig) -> Tensor:
    """Input embeddings for a ``[N]`` or ``[B, N]`` array of token indices."""
    tokens = np.asarray(items, dtype=np.int64)
    n = tokens.shape[-1]
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    h = nx.embedding_lookup(params["item_embedding"], tokens)
    h = h + nx.take(params["position_embedding"], slice(0, n))
    if config.use_keywords and "keyword_projection" in params:
        multihot = catalog.keyword_matrix[tokens]  # pad/mask rows are all zero
        h = h + nx.matmul(Tensor(multihot), params["keyword_projection"])
    return h


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return nx.matmul(x, params[name + ".weight"]) + params[name + ".bias"]


def _split_heads(x: Tensor, b: int, n: int, config: ModelConfig) -> Tensor:
    return nx.transpose(nx.reshape(x, (b, n, config.num_heads, config.head_dim)), (0, 2, 1, 3))


def encode(h0: Tensor, attention_mask, params: ModelParams, config: ModelConfig,
           mode: str = "eval", rng: np.random.Generator | None = None,
           return_attention: bool = False):
    """Run the encoder stack.

    ``attention_mask`` is true at real (non-pad) positions; pad keys are given
    ``-inf`` scores.  Attention dropout is active only with ``mode="train"``.
    """
    squeeze = h0.ndim == 2
    if squeeze:
        h0 = nx.reshape(h0, (1,) + h0.shape)
        attention_mask = np.asarray(attention_mask, dtype=bool)[None, :]
    mask = np.asarray(attention_mask, dtype=bool)
    b, n, d = h0.shape
    training = mode == "train"
    if training and config.dropout_rate > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    key_pad = ~mask[:, None, None, :]
    scale = 1.0 / math.sqrt(config.head_dim)

    x = h0
    attentions = []
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        q = _split_heads(_linear(x, params, p + "attn.query"), b, n, config)
        k = _split_heads(_linear(x, params, p + "attn.key"), b, n, config)
        v = _split_heads(_linear(x, params, p + "attn.value"), b, n, config)
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * scale
        weights = nx.softmax(nx.masked_fill(scores, key_pad, -np.inf), axis=-1)
        if return_attention:
            attentions.append(weights.data)
        if training and config.dropout_rate > 0:
            weights = weights * nx.dropout_mask(weights.shape, config.dropout_rate, rng)
        ctx = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (b, n, config.attention_width))
        x = nx.layer_norm(x + _linear(ctx, params, p + "attn.output"),
                          params[p + "attn_norm.gain"], params[p + "attn_norm.bias"], config.layer_norm_eps)
        ff = _linear(nx.gelu(_linear(x, params, p + "ffn.in")), params, p + "ffn.out")
        x = nx.layer_norm(x + ff, params[p + "ffn_norm.gain"], params[p + "ffn_norm.bias"],
                          config.layer_norm_eps)
    if squeeze:
        x = nx.reshape(x, (n, d))
    return (x, attentions) if return_attention else x


def _project(hidden: Tensor, params: ModelParams) -> Tensor:
    return nx.gelu(nx.matmul(hidden, params["head.weight"]))


def score_items(hidden: Tensor, params: ModelParams) -> Tensor:
    """Scores over the whole vocabulary (including pad and mask rows) for ``[d]`` or ``[P, d]`` states."""
    single = hidden.ndim == 1
    if single:
        hidden = nx.reshape(hidden, (1, -1))
    z = _project(hidden, params)
    scores = nx.matmul(z, nx.transpose(params["item_embedding"], (1, 0))) + params["output_bias"]
    return nx.reshape(scores, (-1,)) if single else scores


def score_selected(hidden: Tensor, item_ids, params: ModelParams) -> Tensor:
    """Scores of chosen items only: ``hidden [P, d]``, ``item_ids [P, C]`` -> ``[P, C]``."""
    ids = np.asarray(item_ids, dtype=np.int64)
    p, c = ids.shape
    z = nx.reshape(_project(hidden, params), (p, -1, 1))
    rows = nx.embedding_lookup(params["item_embedding"], ids)  # [P, C, d]
    dots = nx.reshape(nx.matmul(rows, z), (p, c))
    bias = nx.embedding_lookup(nx.reshape(params["output_bias"], (-1, 1)), ids)
    return dots + nx.reshape(bias, (p, c))


def masked_hidden(tokens, catalog: Catalog, params: ModelParams, config: ModelConfig,
                  mode: str = "eval", rng=None) -> tuple[Tensor, np.ndarray]:
    """Final hidden states at every mask-token position of a ``[B, N]`` batch.

    Returns the ``[P, d]`` states and the ``[P, 2]`` (row, position) pairs in
    row-major order.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    is_mask = tokens == catalog.mask_token
    missing = np.flatnonzero(~is_mask.any(axis=1))
    if missing.size:
        raise ValueError(f"sequence {int(missing[0])} in batch contains no mask token")
    b, n = tokens.shape
    h = encode(embed_sequence(tokens, catalog, params, config), tokens != PAD,
               params, config, mode=mode, rng=rng)
    positions = np.argwhere(is_mask)
    flat = nx.reshape(h, (b * n, config.hidden_size))
    return nx.take(flat, positions[:, 0] * n + positions[:, 1]), positions


def forward_masked(tokens, catalog: Catalog, params: ModelParams, config: ModelConfig,
                   mode: str = "eval", rng=None) -> tuple[Tensor, np.ndarray]:
    hidden, positions = masked_hidden(tokens, catalog, params, config, mode, rng)
    return score_items(hidden, params), positions


# -- inference ----------------------------------------------------------------

def next_item_tokens(histories: Sequence[Sequence[int]], catalog: Catalog, config: ModelConfig) -> np.ndarray:
    """Left-padded ``[B, N]`` batch with a mask token after the most recent ``N - 1`` items."""
    rows = []
    for hist in histories:
        if len(hist) == 0:
            raise ValueError("history must be nonempty")
        recent = list(hist)[-(config.max_seq_len - 1):]
        rows.append(pad_left(recent + [catalog.mask_token], config.max_seq_len))
    return np.asarray(rows, dtype=np.int64)


def next_item_scores(histories, catalog: Catalog, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Eval-mode score rows ``[B, vocab_size]`` for the item following each history."""
    tokens = next_item_tokens(histories, catalog, config)
    scores, _ = forward_masked(tokens, catalog, params, config, mode="eval")
    return scores.data


def rank_items(scores: np.ndarray, candidates) -> np.ndarray:
    """Candidates sorted by descending score, ties by ascending item index."""
    cand = np.asarray(candidates, dtype=np.int64)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order]


def predict_next(history: Sequence[int], catalog: Catalog, params: ModelParams, config: ModelConfig,
                 k: int, candidates=None) -> list[tuple[int, float]]:
    scores = next_item_scores([history], catalog, params, config)[0]
    if candidates is None:
        candidates = np.arange(1, catalog.num_items + 1)
    ranked = rank_items(scores, candidates)[:k]
    return [(int(i), float(scores[i])) for i in ranked]


# -- checkpoints ----------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      8 bytes  b"POIRECK\x00"
#   version    uint32   = 1
#   hlen       uint64   length of the JSON header in bytes
#   header     hlen bytes UTF-8 JSON (sorted keys, compact separators):
#                {"config": {...}, "catalog_digest": str,
#                 "arrays": [{"name": str, "shape": [int, ...]}, ...]}
#   payload    float64 little-endian row-major data of each array, in header order
#   checksum   32 bytes SHA-256 of every preceding byte

MAGIC = b"POIRECK\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, config: ModelConfig, catalog_digest: str) -> str:
    """Write a checkpoint; returns the SHA-256 hex digest of the file."""
    header = {
        "config": asdict(config),
        "catalog_digest": catalog_digest,
        "arrays": [{"name": k, "shape": list(t.shape)} for k, t in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<IQ", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for t in params.values():
        body += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    checksum = hashlib.sha256(body).digest()
    body += checksum
    Path(path).write_bytes(bytes(body))
    return hashlib.sha256(bytes(body)).hexdigest()


def load_checkpoint(path, catalog_digest: str | None = None) -> tuple[ModelParams, ModelConfig, str]:
    """Read a checkpoint, verifying format, checksum and (optionally) the catalog digest."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt file)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = len(MAGIC) + 12
    try:
        header = json.loads(body[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    offset += hlen
    if catalog_digest is not None and header["catalog_digest"] != catalog_digest:
        raise CheckpointError("model/catalog mismatch")
    params = ModelParams()
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(body):
            raise CheckpointError("checkpoint payload shorter than header declares")
        data = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        params[entry["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=entry["name"])
        offset += nbytes
    if offset != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return params, ModelConfig.from_dict(header["config"]), header["catalog_digest"]
