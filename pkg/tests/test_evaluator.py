import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poirec import EvalProtocol, ModelConfig, evaluate, init_params, sweep_k
from poirec import numerics as nx
from poirec.corpus import Catalog
from poirec.evaluator import (build_candidates, f1_at_k, hit_rate_at_k, metrics_from_ranks, ndcg_at_k,
                              precision_at_k, recall_at_k, sweep_csv)
from poirec.model import ModelParams

import support


def brute_precision(rec, rel, k):
    return len(set(rec[:k]) & set(rel)) / min(k, len(rec))


def brute_recall(rec, rel, k):
    return len(set(rec[:k]) & set(rel)) / len(set(rel))


def brute_ndcg(rec, rel, k):
    rel = set(rel)
    gains = [1.0 if r in rel else 0.0 for r in rec[:k]]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(rel), k)))
    return dcg / ideal


class TestMetricValues:
    def test_precision(self):
        assert precision_at_k(["a", "b"], {"a"}, 2) == 0.5
        assert precision_at_k(["a", "b", "c"], {"z"}, 2) == 0.0

    def test_recall(self):
        assert recall_at_k(["a", "c", "d"], {"a", "b"}, 3) == 0.5
        assert recall_at_k(["b", "a", "c"], {"a", "b"}, 2) == 1.0

    def test_f1(self):
        assert f1_at_k(0.5, 0.5) == 0.5
        assert f1_at_k(0.0, 0.7) == 0.0
        assert f1_at_k(1.0, 0.5) == pytest.approx(2 / 3, abs=1e-15)

    def test_hit_rate(self):
        rec = list(range(20))
        assert hit_rate_at_k(rec, {2}, 10) == 1.0
        assert hit_rate_at_k(rec, {10}, 10) == 0.0

    def test_ndcg(self):
        assert ndcg_at_k(["t", "x"], {"t"}, 5) == 1.0
        assert ndcg_at_k(["x", "t"], {"t"}, 5) == pytest.approx(1 / math.log2(3), abs=1e-15)
        assert ndcg_at_k(["x", "y", "t"], {"t"}, 2) == 0.0

    @given(st.permutations(list(range(15))), st.sets(st.integers(0, 14), min_size=1), st.integers(1, 20))
    def test_against_brute_force(self, rec, rel, k):
        assert abs(precision_at_k(rec, rel, k) - brute_precision(rec, rel, k)) <= 1e-12
        assert abs(recall_at_k(rec, rel, k) - brute_recall(rec, rel, k)) <= 1e-12
        assert abs(ndcg_at_k(rec, rel, k) - brute_ndcg(rec, rel, k)) <= 1e-12

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_single_relevant_identities(self, rank, k):
        rec = list(range(1, 41))
        rel = {rank}
        hr = hit_rate_at_k(rec, rel, k)
        assert recall_at_k(rec, rel, k) == hr
        assert precision_at_k(rec, rel, k) == pytest.approx(hr / k, abs=1e-15)
        assert ndcg_at_k(rec, rel, k) == pytest.approx(hr / math.log2(rank + 1), abs=1e-15)

    def test_mean_hr_counts_users(self):
        ranks = np.array([1, 5, 11, 30, 2])
        per_user = metrics_from_ranks(ranks, np.full(5, 40), [10])
        assert per_user[("hr", 10)].mean() == 3 / 5


def catalog_with_popularity(pop):
    n = len(pop)
    return Catalog(tuple(f"i{i}" for i in range(n)), (), (frozenset(),) * n, tuple(pop), ("",) * n)


class TestCandidates:
    def test_full(self):
        cat = catalog_with_popularity([1] * 5)
        assert build_candidates(EvalProtocol("full"), 3, (), cat, nx.make_rng(0)).tolist() == [1, 2, 3, 4, 5]

    @given(st.integers(1, 8), st.integers(0, 1000))
    def test_uniform_with_all_negatives_is_full_set(self, target, seed):
        cat = catalog_with_popularity([1] * 8)
        c = build_candidates(EvalProtocol("uniform", x=7), target, (), cat, nx.make_rng(seed))
        assert set(c.tolist()) == set(range(1, 9)) and c[0] == target

    @given(st.sampled_from(["uniform", "popularity"]), st.integers(1, 20), st.integers(1, 19),
           st.integers(0, 10**6))
    @settings(max_examples=60)
    def test_sampled_are_distinct_and_exclude_target(self, strategy, target, x, seed):
        cat = catalog_with_popularity([(i * 7) % 5 for i in range(20)])
        c = build_candidates(EvalProtocol(strategy, x=x), target, (), cat, nx.make_rng(seed))
        assert len(c) == x + 1 and len(set(c.tolist())) == x + 1
        assert c[0] == target and target not in c[1:]

    def test_popularity_proportions(self):
        cat = catalog_with_popularity([3, 1, 0])
        rng = nx.make_rng(11)
        draws = np.array([build_candidates(EvalProtocol("popularity", x=1), 3, (), cat, rng)[1]
                          for _ in range(100_000)])
        assert abs((draws == 1).mean() - 0.75) < 0.01

    def test_popularity_tops_up_from_unseen_items(self):
        cat = catalog_with_popularity([5, 0, 0, 0])
        c = build_candidates(EvalProtocol("popularity", x=3), 2, (), cat, nx.make_rng(0))
        assert sorted(c.tolist()) == [1, 2, 3, 4]

    def test_too_few_items(self):
        cat = catalog_with_popularity([1, 1, 1])
        with pytest.raises(ValueError, match="distinct negatives"):
            build_candidates(EvalProtocol("uniform", x=5), 1, (), cat, nx.make_rng(0))

    def test_protocol_validation(self):
        with pytest.raises(ValueError):
            EvalProtocol("random")
        with pytest.raises(ValueError):
            EvalProtocol("full", ks=())
        assert EvalProtocol("uniform", x=100).label == "uni-100"
        assert EvalProtocol("popularity", x=100).label == "pop-100"


def oracle_params(catalog, config, pairs):
    """Parameters whose scores put each pair's target first.

    With zero weights every hidden state is the same, so the output bias
    alone decides the ranking; raising the bias of the shared target makes
    it rank 1 for everyone.
    """
    params = init_params(config, catalog.num_items, catalog.num_keywords, 0)
    for t in params.values():
        t.data = np.zeros_like(t.data)
    params["output_bias"].data[pairs[0][1]] = 10.0
    return params


CFG = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, max_seq_len=6)


class TestEvaluate:
    def test_perfect_model(self):
        cat = catalog_with_popularity([2] * 6)
        pairs = [((1, 2), 4), ((3,), 4), ((5, 6, 1), 4)]
        params = oracle_params(cat, CFG, pairs)
        for proto in (EvalProtocol("full"), EvalProtocol("uniform", x=3), EvalProtocol("popularity", x=3)):
            r = evaluate(params, CFG, pairs, cat, proto)
            for k in proto.ks:
                assert r.mean("hr", k) == 1.0 and r.mean("ndcg", k) == 1.0
                assert r.sd("hr", k) == 0.0 and r.sd("ndcg", k) == 0.0

    def test_hand_built_fixture(self):
        # bias-only model: item j scores j, so the ranking is 9, 8, ..., 1 for everyone
        cat = catalog_with_popularity([1] * 9)
        params = init_params(CFG, 9, 0, 0)
        for t in params.values():
            t.data = np.zeros_like(t.data)
        params["output_bias"].data[1:10] = np.arange(1, 10)
        targets = [9, 8, 6, 2, 1]  # ranks 1, 2, 4, 8, 9
        pairs = [((1,), t) for t in targets]
        r = evaluate(params, CFG, pairs, cat, EvalProtocol("full", ks=(1, 5, 9)))
        ranks = np.array([1, 2, 4, 8, 9])
        for k in (1, 5, 9):
            hit = (ranks <= k).astype(float)
            ndcg = np.where(ranks <= k, 1 / np.log2(ranks + 1), 0.0)
            prec = hit / k
            f1 = 2 * prec * hit / np.maximum(prec + hit, 1e-300)
            for name, v in (("hr", hit), ("recall", hit), ("precision", prec), ("ndcg", ndcg), ("f1", f1)):
                assert abs(r.mean(name, k) - v.mean()) <= 1e-12
                assert abs(r.sd(name, k) - v.std()) <= 1e-12

    def test_uniform_all_negatives_equals_full(self):
        data = support.tiny_data(3, users=8, items=10, events=10)
        cfg = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, max_seq_len=6)
        params = init_params(cfg, data.catalog.num_items, data.catalog.num_keywords, 1)
        full = evaluate(params, cfg, data.test, data.catalog, EvalProtocol("full"))
        uni = evaluate(params, cfg, data.test, data.catalog,
                       EvalProtocol("uniform", x=data.catalog.num_items - 1))
        assert full.stats == uni.stats

    def test_batch_size_does_not_matter(self):
        data = support.tiny_data(4, users=9, items=10, events=10)
        params = init_params(CFG, data.catalog.num_items, data.catalog.num_keywords, 2)
        proto = EvalProtocol("popularity", x=5, seed=3)
        a = evaluate(params, CFG, data.test, data.catalog, proto, batch_size=2)
        b = evaluate(params, CFG, data.test, data.catalog, proto, batch_size=16)
        assert a.to_csv() == b.to_csv()

    def test_report_serialisation(self):
        data = support.tiny_data(5, users=4, items=8, events=8)
        params = init_params(CFG, data.catalog.num_items, data.catalog.num_keywords, 2)
        r = evaluate(params, CFG, data.test, data.catalog, EvalProtocol("uniform", x=5, ks=(1, 3)))
        doc = json.loads(r.to_json())
        assert doc["schema_version"] == 1 and doc["protocol"]["X"] == 5
        assert len(doc["metrics"]) == 10
        lines = r.to_csv().splitlines()
        assert lines[0] == "metric,k,mean,sd,protocol,X,seed,num_users" and len(lines) == 11

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(ModelParams(), CFG, [], catalog_with_popularity([1]), EvalProtocol())


@pytest.fixture(scope="module")
def setup():
    data = support.tiny_data(6, users=10, items=30, events=12, noise=0.5)
    params = init_params(CFG, data.catalog.num_items, data.catalog.num_keywords, 3)
    return data, params


class TestSweep:
    def test_monotone_and_complete(self, setup):
        data, params = setup
        n = data.catalog.num_items
        rows = sweep_k(params, CFG, data.test, data.catalog, EvalProtocol("full"), 1, n, 1)
        hr = [r["hr_mean"] for r in rows]
        assert all(a <= b for a, b in zip(hr, hr[1:]))
        assert hr[-1] == 1.0

    def test_matches_point_evaluation(self, setup):
        data, params = setup
        proto = EvalProtocol("uniform", x=20, ks=(10, 20), seed=4)
        rows = {r["k"]: r for r in sweep_k(params, CFG, data.test, data.catalog, proto, 10, 20, 10)}
        report = evaluate(params, CFG, data.test, data.catalog, proto)
        for k in (10, 20):
            for m in ("f1", "hr", "ndcg"):
                assert rows[k][f"{m}_mean"] == report.mean(m, k)
                assert rows[k][f"{m}_sd"] == report.sd(m, k)

    def test_k_range_validation(self, setup):
        data, params = setup
        with pytest.raises(ValueError, match="exceeds"):
            sweep_k(params, CFG, data.test, data.catalog, EvalProtocol("uniform", x=5), 1, 10, 1)
        with pytest.raises(ValueError):
            sweep_k(params, CFG, data.test, data.catalog, EvalProtocol("full"), 5, 1, 1)

    def test_csv(self, setup):
        data, params = setup
        rows = sweep_k(params, CFG, data.test, data.catalog, EvalProtocol("full"), 10, 20, 10)
        assert sweep_csv(rows).splitlines()[0] == "k,f1_mean,f1_sd,hr_mean,hr_sd,ndcg_mean,ndcg_sd"
