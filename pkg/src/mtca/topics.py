"""Topic assignment: BM25 retrieval, distant supervision, linear topic head.

The topic head is a multinomial logistic layer over frozen sentence
embeddings with N_f + 1 outputs, the extra label meaning "no topic".  It is
trained on distant supervision: the top BM25 hits for a topic's query terms
are positives, random sentences far outside the hit region are negatives.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TOPIC_HEAD_MAGIC = b"MTPH"
_TOKEN_RE = re.compile(r"[0-9a-z]+")

BM25_K1 = 1.2
BM25_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) >= 2]


@dataclass(frozen=True)
class TopicSet:
    names: list[str]
    query_terms: list[list[str]]

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ValueError("topic names must be unique")
        if any(not n for n in self.names):
            raise ValueError("topic names must be nonempty")

    @property
    def num_topics(self) -> int:
        return len(self.names)

    @property
    def no_topic_label(self) -> int:
        return len(self.names)


def read_topic_file(path) -> TopicSet:
    """One topic per line: name<TAB>comma-separated query terms."""
    names, terms = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected name<TAB>terms")
            name, raw = line.split("\t", 1)
            names.append(name.strip())
            terms.append([t.strip() for t in raw.split(",") if t.strip()])
    return TopicSet(names=names, query_terms=terms)


def write_topic_file(path, topics: TopicSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, terms in zip(topics.names, topics.query_terms):
            fh.write(f"{name}\t{','.join(terms)}\n")


class InvertedIndex:
    """Term postings over a sentence corpus, the substrate for BM25."""

    def __init__(self, sentences: dict[str, str]):
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.lengths: dict[str, int] = {}
        for sid in sorted(sentences):
            tokens = tokenize(sentences[sid])
            self.lengths[sid] = len(tokens)
            counts: dict[str, int] = {}
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
            for tok, tf in counts.items():
                self.postings.setdefault(tok, []).append((sid, tf))
        self.num_sentences = len(self.lengths)
        total = sum(self.lengths.values())
        self.avg_length = total / self.num_sentences if self.num_sentences else 0.0

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        # Lucene-flavored IDF, strictly positive so scores stay monotone in tf
        df = self.document_frequency(term)
        return float(np.log(1.0 + (self.num_sentences - df + 0.5) / (df + 0.5)))


def bm25_rank(
    index: InvertedIndex,
    query_terms: list[str],
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> list[tuple[str, float]]:
    """Sentences containing at least one query term, best score first.

    Ties break on ascending sentence id.  Unknown terms contribute zero.
    """
    if not query_terms:
        raise ValueError("bm25_rank: empty query")
    scores: dict[str, float] = {}
    for term in query_terms:
        for tok in tokenize(term) or []:
            postings = index.postings.get(tok)
            if not postings:
                continue
            idf = index.idf(tok)
            for sid, tf in postings:
                norm = k1 * (1.0 - b + b * index.lengths[sid] / index.avg_length)
                scores[sid] = scores.get(sid, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def build_distant_supervision(
    topic_id: int,
    ranking: list[tuple[str, float]],
    corpus_ids: list[str],
    no_topic_label: int,
    n_top: int = 10,
    rng: np.random.Generator | None = None,
) -> list[tuple[str, int]]:
    """Top-ranked hits become topic positives, far-away sentences negatives.

    Negatives are sampled without replacement from outside the top 5*n_top
    region of the ranking; positives and negatives never overlap.
    """
    if not ranking:
        raise ValueError("build_distant_supervision: empty ranking")
    rng = rng or np.random.default_rng(0)
    corpus_ids = sorted(corpus_ids)
    effective = min(n_top, len(corpus_ids) // 2)
    if effective < n_top:
        log.warning(
            "corpus of %d sentences too small for n_top=%d; shrinking to %d",
            len(corpus_ids), n_top, effective,
        )
    if effective == 0:
        raise ValueError("corpus too small for any distant supervision")

    positives = [sid for sid, _ in ranking[:effective]]
    exclusion = {sid for sid, _ in ranking[: 5 * n_top]} | set(positives)
    candidates = [sid for sid in corpus_ids if sid not in exclusion]
    if len(candidates) < effective:
        log.warning(
            "topic %d: only %d negatives outside the hit region; sampling from the rest",
            topic_id, len(candidates),
        )
        candidates = [sid for sid in corpus_ids if sid not in positives]
    take = min(effective, len(candidates))
    picked = rng.choice(len(candidates), size=take, replace=False)
    negatives = [candidates[i] for i in sorted(picked)]
    return [(sid, topic_id) for sid in positives] + [
        (sid, no_topic_label) for sid in negatives
    ]


@dataclass
class TopicHead:
    """(num_labels, dim) softmax layer over sentence embeddings."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.weights.shape[0]

    def probabilities(self, embedding: np.ndarray) -> np.ndarray:
        logits = self.weights @ np.asarray(embedding, dtype=np.float64) + self.bias
        logits -= logits.max()
        e = np.exp(logits)
        return e / e.sum()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(TOPIC_HEAD_MAGIC)
            fh.write(struct.pack("<3I", 1, *self.weights.shape))
            fh.write(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TopicHead":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != TOPIC_HEAD_MAGIC:
            raise ValueError("not a topic head file")
        version, rows, cols = struct.unpack_from("<3I", blob, 4)
        if version != 1:
            raise ValueError(f"unsupported topic head version {version}")
        weights = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=16)
        bias = np.frombuffer(blob, dtype="<f8", count=rows, offset=16 + 8 * rows * cols)
        return cls(weights=weights.reshape(rows, cols).copy(), bias=bias.copy())


def train_topic_head(
    embeddings: np.ndarray,
    labels: np.ndarray,
    num_labels: int,
    epochs: int = 200,
    lr: float = 0.5,
) -> TopicHead:
    """Full-batch softmax regression with a ridge term.

    Aborts on divergence (NaN loss); requires at least two distinct labels.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("train_topic_head: no samples")
    if np.unique(y).size < 2:
        raise ValueError("train_topic_head: need at least two distinct labels")
    n, dim = X.shape
    W = np.zeros((num_labels, dim))
    bias = np.zeros(num_labels)
    onehot = np.zeros((n, num_labels))
    onehot[np.arange(n), y] = 1.0

    for _ in range(epochs):
        logits = X @ W.T + bias
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum(probs[np.arange(n), y], 1e-300)).mean()
        if not np.isfinite(loss):
            raise FloatingPointError("topic head training diverged (NaN loss)")
        delta = (probs - onehot) / n
        W -= lr * (delta.T @ X + 1e-4 * W)
        bias -= lr * delta.sum(axis=0)
    return TopicHead(weights=W, bias=bias)


def assign_topic(embedding: np.ndarray, head: TopicHead) -> tuple[int, float]:
    """Argmax label and its softmax confidence; ties go to the lowest label."""
    probs = head.probabilities(embedding)
    label = int(np.argmax(probs))
    return label, float(probs[label])


def write_assignments(path, rows: list[tuple[str, int, float]]) -> None:
    """Delimited (sentence_id, topic_id, confidence) records."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, topic_id, conf in rows:
            fh.write(f"{sid}\t{topic_id}\t{conf:.6f}\n")


def read_assignments(path) -> list[tuple[str, int, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rows.append((parts[0], int(parts[1]), float(parts[2])))
    return rows
