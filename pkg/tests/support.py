"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from poirec import ModelConfig, SyntheticSpec, TrainConfig, generate_synthetic, init_params, prepare_corpus
from poirec import numerics as nx
from poirec.trainer import batch_loss, make_batch, training_windows

TINY = dict(num_layers=1, num_heads=2, hidden_size=8, max_seq_len=6)


def tiny_data(seed: int = 0, users: int = 4, items: int = 7, events: int = 8, noise: float = 0.3):
    inter, meta = generate_synthetic(SyntheticSpec(users, items, 3, noise, seed=seed, events_per_user=events))
    return prepare_corpus(inter, meta)


def tiny_model_loss(seed: int, dropout: float = 0.0, weight_scale: float = 0.3, use_keywords: bool = True):
    """A scalar BPR loss over one masked batch of the tiny model, plus its parameters.

    Weights are redrawn at ``weight_scale`` so the check exercises a regime
    away from the near-zero initialisation.
    """
    data = tiny_data(seed)
    catalog = data.catalog
    config = ModelConfig(dropout_rate=dropout, use_keywords=use_keywords, **TINY)
    params = init_params(config, catalog.num_items, catalog.num_keywords, seed)
    rng = nx.make_rng(seed, 1)
    for name, t in params.items():
        t.data = t.data + rng.normal(0.0, weight_scale, t.data.shape)
    tc = TrainConfig(batch_size=4, negatives_per_positive=2, seed=seed)
    windows = training_windows(data.train, config.max_seq_len)[:4]
    batch = make_batch(windows, catalog, config, tc, nx.make_rng(seed, 2))

    def loss():
        return batch_loss(batch, catalog, params, config, mode="train", rng=nx.make_rng(seed, 3))

    return loss, params


def random_weights(rng: np.random.Generator, shape) -> nx.Tensor:
    return nx.Tensor(rng.normal(size=shape))


# (name, builder) pairs: each builder maps an rng to (f, {name: tensor}) for grad_check_many
def _op_cases():
    def elementwise(op, shape=(3, 4)):
        def build(rng):
            a = nx.Tensor(rng.normal(size=shape), requires_grad=True)
            b = nx.Tensor(rng.normal(size=shape[-1:]), requires_grad=True)
            w = random_weights(rng, shape)
            return (lambda: nx.tensor_sum(op(a, b) * w)), {"a": a, "b": b}
        return build

    def unary(op, shape=(2, 3, 4), scale=1.0):
        def build(rng):
            x = nx.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
            w = random_weights(rng, shape)
            return (lambda: nx.tensor_sum(op(x) * w)), {"x": x}
        return build

    def matmul(rng):
        a = nx.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = nx.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = random_weights(rng, (2, 3, 5))
        return (lambda: nx.tensor_sum(nx.matmul(a, b) * w)), {"a": a, "b": b}

    def batched_matmul(rng):
        a = nx.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = nx.Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = random_weights(rng, (2, 3, 3))
        return (lambda: nx.tensor_sum(nx.matmul(a, b) * w)), {"a": a, "b": b}

    def layer_norm(rng):
        x = nx.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        g = nx.Tensor(rng.normal(size=5), requires_grad=True)
        b = nx.Tensor(rng.normal(size=5), requires_grad=True)
        w = random_weights(rng, (3, 5))
        return (lambda: nx.tensor_sum(nx.layer_norm(x, g, b) * w)), {"x": x, "gain": g, "bias": b}

    def embedding(rng):
        table = nx.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        idx = rng.integers(0, 6, size=(2, 5))
        w = random_weights(rng, (2, 5, 3))
        return (lambda: nx.tensor_sum(nx.embedding_lookup(table, idx) * w)), {"table": table}

    def take(rng):
        x = nx.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        idx = rng.integers(0, 5, size=4)
        w = random_weights(rng, (4, 3))
        return (lambda: nx.tensor_sum(nx.take(x, idx) * w)), {"x": x}

    def masked_fill(rng):
        x = nx.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        mask = rng.random((3, 4)) < 0.4
        w = random_weights(rng, (3, 4))
        return (lambda: nx.tensor_sum(nx.masked_fill(x, mask, 2.5) * w)), {"x": x}

    def masked_softmax(rng):
        # the attention pattern: -inf fill on some keys, then softmax
        x = nx.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        mask = np.zeros((3, 4), dtype=bool)
        mask[:, 0] = True
        w = random_weights(rng, (3, 4))
        return (lambda: nx.tensor_sum(nx.softmax(nx.masked_fill(x, mask, -np.inf)) * w)), {"x": x}

    def shape_ops(rng):
        x = nx.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = random_weights(rng, (3, 2, 2, 2))
        return (lambda: nx.tensor_sum(nx.reshape(nx.transpose(x, (1, 0, 2)), (3, 2, 2, 2)) * w)), {"x": x}

    def reductions(rng):
        x = nx.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = random_weights(rng, (4,))
        return (lambda: nx.mean(nx.tensor_sum(x, axis=0) * w) + nx.mean(x * x)), {"x": x}

    def getitem(rng):
        x = nx.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = random_weights(rng, (4, 2))
        return (lambda: nx.tensor_sum(x[:, 1:3] * w)), {"x": x}

    return [
        ("add", elementwise(nx.add)),
        ("sub", elementwise(nx.sub)),
        ("mul", elementwise(nx.mul)),
        ("neg", unary(lambda x: -x)),
        ("gelu", unary(nx.gelu, scale=2.0)),
        ("softplus", unary(nx.softplus, scale=3.0)),
        ("softmax", unary(nx.softmax)),
        ("log_softmax", unary(nx.log_softmax)),
        ("matmul", matmul),
        ("batched_matmul", batched_matmul),
        ("layer_norm", layer_norm),
        ("embedding_lookup", embedding),
        ("take", take),
        ("masked_fill", masked_fill),
        ("masked_softmax", masked_softmax),
        ("reshape_transpose", shape_ops),
        ("sum_mean", reductions),
        ("getitem", getitem),
    ]


OP_CASES = _op_cases()
