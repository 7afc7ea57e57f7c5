"""Topic classifier: BM25 ranking, distant supervision, linear head."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtca.topics import (
    InvertedIndex,
    TopicHead,
    TopicSet,
    assign_topic,
    bm25_rank,
    build_distant_supervision,
    read_assignments,
    read_topic_file,
    tokenize,
    train_topic_head,
    write_assignments,
    write_topic_file,
)

FIXTURE_CORPUS = {
    "s0": "supply chain disruption hits ports",
    "s1": "the supply of labor is tight",
    "s2": "weather was mild this quarter",
    "s3": "chain stores report strong supply chain recovery",
    "s4": "ports congestion easing",
}

# hand-evaluated BM25 (k1=1.2, b=0.75, Lucene IDF) for query (supply, chain)
FIXTURE_RANKING = [
    ("s3", 1.569110698720698),
    ("s0", 1.437076582922785),
    ("s1", 0.5070822342419361),
]


class TestTokenize:
    def test_lowercase_split_short_drop(self):
        assert tokenize("The U.S. GDP grew 3% in Q2!") == ["the", "gdp", "grew", "in", "q2"]

    def test_empty(self):
        assert tokenize("!!! -") == []


class TestBM25:
    def test_single_document_closed_form(self):
        index = InvertedIndex({"only": "growth outlook strong"})
        ranking = bm25_rank(index, ["growth"])
        # tf=1 and len==avglen collapse the normalizer: score == IDF
        idf = math.log(1 + (1 - 1 + 0.5) / (1 + 0.5))
        assert ranking == [("only", pytest.approx(idf, rel=1e-12))]

    def test_no_matching_terms(self):
        index = InvertedIndex(FIXTURE_CORPUS)
        assert bm25_rank(index, ["zebra"]) == []

    def test_fixture_scores(self):
        index = InvertedIndex(FIXTURE_CORPUS)
        ranking = bm25_rank(index, ["supply", "chain"])
        assert [sid for sid, _ in ranking] == [sid for sid, _ in FIXTURE_RANKING]
        for (sid, got), (_, want) in zip(ranking, FIXTURE_RANKING):
            assert got == pytest.approx(want, rel=1e-12)

    def test_index_invariants(self):
        index = InvertedIndex(FIXTURE_CORPUS)
        for term, postings in index.postings.items():
            assert index.document_frequency(term) == len(postings)
        assert all(n > 0 for n in index.lengths.values())
        assert index.avg_length == pytest.approx(5.2)

    def test_tie_breaks_by_id(self):
        index = InvertedIndex({"b": "alpha beta", "a": "alpha beta"})
        ranking = bm25_rank(index, ["alpha"])
        assert [sid for sid, _ in ranking] == ["a", "b"]

    @given(st.integers(1, 5), st.integers(0, 30))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_term_frequency(self, tf, extra_tokens):
        # more occurrences of the query term never lower the score, document
        # length held fixed by padding with filler
        def corpus_with(tf_count):
            body = " ".join(["target"] * tf_count + ["filler%d" % i for i in range(extra_tokens)])
            return {"doc": body, "other": "background words here"}

        low = bm25_rank(InvertedIndex(corpus_with(tf)), ["target"])
        high = bm25_rank(InvertedIndex(corpus_with(tf + 1)), ["target"])
        assert dict(high)["doc"] >= dict(low)["doc"] - 1e-12

    @given(st.integers(0, 20))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_document_length(self, pad):
        # a longer document with the same term count never scores higher
        def score(pad_count):
            corpus = {
                "doc": "target " + " ".join("pad%d" % i for i in range(pad_count)),
                "other": "background words here and there",
            }
            return dict(bm25_rank(InvertedIndex(corpus), ["target"]))["doc"]

        assert score(pad + 1) <= score(pad) + 1e-12


class TestDistantSupervision:
    def _ranking(self, index, terms):
        return bm25_rank(index, terms)

    def test_two_sentence_corpus(self):
        index = InvertedIndex({"a": "supply chain news", "b": "weather report"})
        ranking = self._ranking(index, ["supply"])
        samples = build_distant_supervision(
            0, ranking, ["a", "b"], no_topic_label=2, n_top=1, rng=np.random.default_rng(0)
        )
        assert ("a", 0) in samples
        assert ("b", 2) in samples
        pos = {s for s, lab in samples if lab == 0}
        neg = {s for s, lab in samples if lab == 2}
        assert pos.isdisjoint(neg)

    def test_deterministic_given_seed(self):
        corpus = {f"s{i}": ("topic words here" if i < 3 else f"noise alpha{i} beta{i}") for i in range(60)}
        index = InvertedIndex(corpus)
        ranking = self._ranking(index, ["topic"])
        a = build_distant_supervision(0, ranking, list(corpus), 1, n_top=3, rng=np.random.default_rng(5))
        b = build_distant_supervision(0, ranking, list(corpus), 1, n_top=3, rng=np.random.default_rng(5))
        assert a == b

    def test_positive_purity_on_planted_corpus(self):
        rng = np.random.default_rng(7)
        corpus = {}
        for i in range(100):
            if i < 12:
                corpus[f"s{i:03d}"] = f"margin pressure outlook item{i}"
            else:
                words = " ".join(f"w{rng.integers(1000)}" for _ in range(6))
                corpus[f"s{i:03d}"] = words
        index = InvertedIndex(corpus)
        ranking = bm25_rank(index, ["margin", "pressure"])
        samples = build_distant_supervision(0, ranking, list(corpus), 1, n_top=10, rng=rng)
        positives = [sid for sid, lab in samples if lab == 0]
        planted = sum("margin" in corpus[sid] for sid in positives)
        assert planted >= 9

    def test_small_corpus_shrinks_with_warning(self, caplog):
        index = InvertedIndex({"a": "topic thing", "b": "other stuff", "c": "more stuff"})
        ranking = bm25_rank(index, ["topic"])
        with caplog.at_level(logging.WARNING, logger="mtca.topics"):
            samples = build_distant_supervision(
                0, ranking, ["a", "b", "c"], 1, n_top=5, rng=np.random.default_rng(1)
            )
        assert "shrinking" in caplog.text
        assert len(samples) == 2


class TestTopicHead:
    def _clusters(self, rng, n_per=60, dim=16):
        c0 = rng.normal(loc=0.0, size=(n_per, dim)) + np.r_[4.0, np.zeros(dim - 1)]
        c1 = rng.normal(loc=0.0, size=(n_per, dim)) + np.r_[-4.0, np.zeros(dim - 1)]
        X = np.vstack([c0, c1])
        y = np.array([0] * n_per + [1] * n_per)
        return X, y

    def test_separable_clusters_high_accuracy(self, rng):
        X, y = self._clusters(rng)
        hold_X, hold_y = self._clusters(np.random.default_rng(123))
        head = train_topic_head(X, y, num_labels=3, epochs=300, lr=0.5)
        preds = [assign_topic(v, head)[0] for v in hold_X]
        assert np.mean(np.asarray(preds) == hold_y) >= 0.95

    def test_single_label_rejected(self, rng):
        X = rng.normal(size=(10, 4))
        with pytest.raises(ValueError):
            train_topic_head(X, np.zeros(10, dtype=int), num_labels=2)

    def test_zero_epochs_near_chance(self, rng):
        X, y = self._clusters(rng)
        head = train_topic_head(X, y, num_labels=3, epochs=0)
        preds = np.array([assign_topic(v, head)[0] for v in X])
        # untrained head ties everywhere; tie-break sends everything to label 0
        assert np.mean(preds == y) == pytest.approx(0.5)
        assert set(preds) == {0}

    def test_zero_head_tie_breaks_to_label_zero(self):
        head = TopicHead(weights=np.zeros((4, 8)), bias=np.zeros(4))
        label, conf = assign_topic(np.ones(8), head)
        assert label == 0
        assert conf == pytest.approx(0.25)

    def test_embedding_matching_weight_row_wins(self):
        W = np.zeros((3, 4))
        W[1] = [0.0, 2.0, 0.0, 0.0]
        head = TopicHead(weights=W, bias=np.zeros(3))
        label, conf = assign_topic(np.array([0.0, 3.0, 0.0, 0.0]), head)
        assert label == 1
        assert 0 < conf <= 1

    def test_distribution_sums_to_one(self, rng):
        head = TopicHead(weights=rng.normal(size=(5, 6)), bias=rng.normal(size=5))
        probs = head.probabilities(rng.normal(size=6))
        assert abs(probs.sum() - 1.0) <= 1e-10

    def test_planted_topic_agreement(self, rng):
        # synthetic mixed corpus: two topic clusters plus background noise
        dim = 12
        centers = {0: np.eye(dim)[0] * 5, 1: np.eye(dim)[1] * 5}
        X, y = [], []
        for label, center in centers.items():
            for _ in range(40):
                X.append(center + rng.normal(scale=0.5, size=dim))
                y.append(label)
        for _ in range(40):
            X.append(rng.normal(scale=0.5, size=dim))
            y.append(2)
        X, y = np.asarray(X), np.asarray(y)
        head = train_topic_head(X, y, num_labels=3, epochs=300, lr=0.5)
        preds = np.array([assign_topic(v, head)[0] for v in X])
        assert np.mean(preds == y) >= 0.9

    def test_save_load_roundtrip(self, tmp_path, rng):
        head = TopicHead(weights=rng.normal(size=(3, 5)), bias=rng.normal(size=3))
        head.save(tmp_path / "head.mtph")
        loaded = TopicHead.load(tmp_path / "head.mtph")
        np.testing.assert_array_equal(loaded.weights, head.weights)
        np.testing.assert_array_equal(loaded.bias, head.bias)

    def test_divergence_aborts(self, rng):
        X = rng.normal(size=(20, 3)) * 1e150
        y = np.array([0, 1] * 10)
        with pytest.raises(FloatingPointError):
            with np.errstate(all="ignore"):
                train_topic_head(X, y, num_labels=2, epochs=50, lr=1e200)


class TestTopicFiles:
    def test_roundtrip(self, tmp_path):
        topics = TopicSet(
            names=["supply chain", "labor"],
            query_terms=[["supply", "chain", "logistics"], ["union", "wages"]],
        )
        path = tmp_path / "topics.tsv"
        write_topic_file(path, topics)
        loaded = read_topic_file(path)
        assert loaded == topics
        assert loaded.no_topic_label == 2

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            TopicSet(names=["a", "a"], query_terms=[["x"], ["y"]])

    def test_assignments_roundtrip(self, tmp_path):
        rows = [("t0:0", 3, 0.912345), ("news:7", 221, 0.333333)]
        path = tmp_path / "assign.tsv"
        write_assignments(path, rows)
        assert read_assignments(path) == rows
