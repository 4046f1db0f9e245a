import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from poirec import corpus
from poirec.corpus import (CorpusError, Interaction, ItemMeta, ParseError, SyntheticSpec, UserSequence,
                           build_catalog, build_sequences, dataset_stats, generate_synthetic,
                           parse_interactions, split_leave_one_out, to_implicit)


def events(*rows):
    return [Interaction(u, i, t, 4.0) for u, i, t in rows]


class TestParse:
    def test_field_mapping(self):
        [it] = parse_interactions(["u1\tb9\t100\t4.0\t"])
        assert it == Interaction("u1", "b9", 100, 4.0, False)

    def test_review_flag(self):
        [it] = parse_interactions(["u1\tb9\t100\t\tgreat place"])
        assert it.rating is None and it.has_review

    def test_malformed_timestamp_reports_line(self):
        with pytest.raises(ParseError) as exc:
            parse_interactions(["u1\tb9\tabc\t\t"])
        assert exc.value.line_no == 1
        assert "line 1" in str(exc.value)

    def test_line_number_counts_blank_lines(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_interactions(["u1\tb1\t1\t4\t", "", "u1\tb2\t-5\t4\t"])

    def test_rating_out_of_range(self):
        with pytest.raises(ParseError, match="outside"):
            parse_interactions(["u1\tb1\t1\t7\t"])

    def test_order_preserved(self):
        lines = ["u1\tb1\t30\t4\t", "u2\tb2\t10\t3\t", "u1\tb3\t20\t5\t"]
        assert [i.item_id for i in parse_interactions(lines)] == ["b1", "b2", "b3"]

    def test_lenient_mode_collects_errors(self):
        errors = []
        out = parse_interactions(["u1\tb1\t1\t4\t", "bad", "u1\tb2\t2\t4\t"], strict=False, errors=errors)
        assert len(out) == 2 and len(errors) == 1 and errors[0].line_no == 2

    @given(st.lists(st.tuples(st.sampled_from(["u1", "u2", "u3"]), st.sampled_from(["a", "b", "c"]),
                              st.integers(0, 10**9), st.one_of(st.none(), st.floats(1, 5)), st.booleans()),
                    max_size=20))
    def test_format_parse_round_trip(self, rows):
        its = [Interaction(*r) for r in rows]
        assert parse_interactions([corpus.format_interaction(i) for i in its]) == its

    def test_metadata_categories(self):
        [m] = corpus.parse_metadata(["b1\tCafe One\tfood, bar\tTown"])
        assert m == ItemMeta("b1", "Cafe One", ("food", "bar"), "Town")


class TestImplicit:
    def test_rules(self):
        its = [Interaction("u", "a", 1, 2.0), Interaction("u", "b", 2, None, True), Interaction("u", "c", 3)]
        assert [i.item_id for i in to_implicit(its)] == ["a", "b"]
        assert all(i.rating is None and not i.has_review for i in to_implicit(its))


class TestCatalog:
    def test_construction(self):
        cat = build_catalog(events(("u", "b1", 1), ("u", "b2", 2)), [ItemMeta("b1", "B one", ("food", "bar"))])
        assert cat.item_index == {"b1": 1, "b2": 2}
        assert {cat.keywords[k] for k in cat.keywords_of(1)} == {"food", "bar"}
        assert cat.keywords_of(2) == frozenset()
        assert cat.name_of(1) == "B one"

    def test_popularity(self):
        cat = build_catalog(events(("u", "b1", 1), ("u", "b1", 2), ("u", "b2", 3)))
        assert cat.popularity == (2, 1)

    def test_special_tokens(self):
        cat = build_catalog(events(*[("u", f"b{i}", i) for i in range(5)]))
        assert (cat.num_items, cat.mask_token, cat.pad_token, cat.vocab_size) == (5, 6, 0, 7)

    def test_keyword_matrix_rows(self):
        cat = build_catalog(events(("u", "b1", 1), ("u", "b2", 2)), [ItemMeta("b2", "", ("x", "y"))])
        km = cat.keyword_matrix
        assert km.shape == (4, 2)
        assert km[0].sum() == 0 and km[1].sum() == 0 and km[3].sum() == 0
        assert km[2].tolist() == [1.0, 1.0]

    def test_empty(self):
        with pytest.raises(CorpusError, match="empty"):
            build_catalog([])

    def test_dict_round_trip_and_digest(self):
        cat = build_catalog(events(("u", "b1", 1), ("u", "b2", 2)), [ItemMeta("b1", "n", ("food",))])
        again = corpus.Catalog.from_dict(cat.to_dict())
        assert again == cat and again.digest() == cat.digest()
        assert cat.with_popularity([(1, 1, 1)]).digest() != cat.digest()


class TestSequences:
    def test_sorted_by_time(self):
        its = events(("u", "c", 30), ("u", "a", 10), ("u", "b", 20))
        cat = build_catalog(its)
        [seq] = build_sequences(its, cat)
        assert [cat.item_ids[i - 1] for i in seq.items] == ["a", "b", "c"]

    def test_min_interactions(self):
        its = events(*[("u", f"b{i}", i) for i in range(9)])
        assert build_sequences(its, build_catalog(its), min_interactions=10) == []

    def test_ties_keep_input_order(self):
        its = events(("u", "x", 5), ("u", "y", 5), ("u", "z", 1))
        cat = build_catalog(its)
        [seq] = build_sequences(its, cat)
        assert [cat.item_ids[i - 1] for i in seq.items] == ["z", "x", "y"]


class TestSplit:
    def test_five(self):
        d = split_leave_one_out([UserSequence("u", (1, 2, 3, 4, 5))])
        assert d.train == ((1, 2, 3),)
        assert d.valid == (((1, 2, 3), 4),)
        assert d.test == (((1, 2, 3, 4), 5),)

    def test_minimum_length(self):
        d = split_leave_one_out([UserSequence("u", (7, 8, 9))])
        assert d.train == ((7,),) and d.valid == (((7,), 8),) and d.test == (((7, 8), 9),)

    def test_too_short(self):
        with pytest.raises(CorpusError, match="u9"):
            split_leave_one_out([UserSequence("u9", (1, 2))])

    def test_popularity_from_train_only(self):
        its = events(("u", "a", 1), ("u", "b", 2), ("u", "c", 3), ("u", "c", 4))
        cat = build_catalog(its)
        d = split_leave_one_out(build_sequences(its, cat), cat)
        assert d.catalog.popularity == (1, 1, 0)

    @given(st.lists(st.lists(st.integers(1, 9), min_size=3, max_size=15), min_size=1, max_size=6))
    def test_split_invariants(self, seqs):
        d = split_leave_one_out([UserSequence(f"u{i}", tuple(s)) for i, s in enumerate(seqs)])
        for s, train, (vctx, vt), (tctx, tt) in zip(seqs, d.train, d.valid, d.test):
            assert train == vctx and tctx == vctx + (vt,) and tctx + (tt,) == tuple(s)
            assert len(train) == len(s) - 2


class TestSynthetic:
    def test_noise_free_cycle(self):
        spec = SyntheticSpec(3, 10, 3, 0.0, seed=4, events_per_user=9)
        inter, meta = generate_synthetic(spec)
        assert len(meta) == 10
        for u in ("u0000", "u0001", "u0002"):
            items = [i.item_id for i in inter if i.user_id == u]
            assert len(set(items[:3])) == 3
            assert items == items[:3] * 3

    def test_deterministic(self):
        spec = SyntheticSpec(5, 12, 4, 0.3, seed=9)
        assert generate_synthetic(spec) == generate_synthetic(spec)
        assert generate_synthetic(spec) != generate_synthetic(SyntheticSpec(5, 12, 4, 0.3, seed=10))

    def test_full_noise_is_uniform(self):
        spec = SyntheticSpec(100, 20, 4, 1.0, seed=2, events_per_user=1000)
        inter, _ = generate_synthetic(spec)
        counts = np.bincount([int(i.item_id[1:]) for i in inter], minlength=20)
        assert counts.sum() == 100_000
        assert stats.chisquare(counts).pvalue > 0.001

    def test_correlated_itineraries_share_a_group(self):
        inter, meta = generate_synthetic(SyntheticSpec(10, 30, 5, 0.0, seed=1, correlated_keywords=True))
        group = {m.item_id: next(c for c in m.categories if c.startswith("group")) for m in meta}
        for u in {i.user_id for i in inter}:
            assert len({group[i.item_id] for i in inter if i.user_id == u}) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(1, 3, 5))


class TestStats:
    def test_counts(self):
        its = events(*[(f"u{i % 3}", f"b{i % 5}", i) for i in range(12)])
        r = dataset_stats(its, build_catalog(its)).to_dict()
        assert (r["users"], r["items"], r["interactions"]) == (3, 5, 12)
        assert r["schema_version"] == 1

    def test_empty(self):
        r = dataset_stats([]).to_dict()
        assert (r["users"], r["items"], r["interactions"]) == (0, 0, 0)


def test_prepare_corpus_filters_short_users():
    its = events(("a", "x", 1), ("a", "y", 2), ("a", "z", 3), ("b", "x", 1), ("b", "y", 2))
    d = corpus.prepare_corpus(its, min_interactions=3)
    assert d.user_ids == ("a",)
