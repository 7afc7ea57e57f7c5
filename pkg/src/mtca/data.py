"""Corpus ingestion, binary embedding files, labels, splits, synthetic data.

The hash embedder is the test-time stand-in for a real sentence encoder.  It
is pinned down to exact integer arithmetic (FNV-1a token hash feeding a
splitmix64 stream) so that independent implementations in other languages
can reproduce the same float32 files bit for bit:

    token vector:  state = fnv1a64(utf8(token)) XOR seed
                   v[i]  = 2 * (mix64(state + (i+1)*GOLDEN) >> 11) / 2^53 - 1
                   then normalized to unit length
    sentence:      mean of its token vectors, normalized to unit length

Reductions use sequential (left-to-right) summation to keep the result
independent of any vectorized reduction order.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .topics import tokenize

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"MEMB"
EMBEDDING_VERSION = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


# ---------------------------------------------------------------------------
# records


@dataclass
class TranscriptRecord:
    id: str
    ticker: str
    date: str
    session: str
    sentences: list[str]
    label: int | None = None

    def sentence_id(self, index: int) -> str:
        return f"{self.id}:{index}"

    def sentence_ids(self) -> list[str]:
        return [self.sentence_id(i) for i in range(len(self.sentences))]


@dataclass
class SourceSentence:
    """One cross-domain sentence (news and the like) available for perturbation."""

    id: str
    text: str
    session: str | None = None


def _validate_record(obj: dict, lineno: int, path) -> TranscriptRecord:
    try:
        rid = str(obj["id"])
        ticker = str(obj["ticker"])
        date = str(obj["date"])
        session = str(obj["session"])
        sentences = list(obj["sentences"])
        label = obj.get("label")
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}:{lineno}: malformed transcript record ({exc})") from None
    if session not in ("OP", "QA"):
        raise ValueError(f"{path}:{lineno}: session must be OP or QA, got {session!r}")
    try:
        _dt.date.fromisoformat(date)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: date {date!r} is not ISO-8601") from None
    if not sentences:
        raise ValueError(f"{path}:{lineno}: transcript has no sentences")
    if label is not None and label not in (0, 1, 2):
        raise ValueError(f"{path}:{lineno}: label must be 0, 1 or 2")
    return TranscriptRecord(
        id=rid, ticker=ticker, date=date, session=session,
        sentences=[str(s) for s in sentences],
        label=None if label is None else int(label),
    )


def parse_transcripts(path, max_sentences: int = 500) -> list[TranscriptRecord]:
    """Line-delimited JSON records; oversized transcripts truncate with a warning."""
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        log.warning("%s: no transcript records", path)
        return []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        record = _validate_record(obj, lineno, path)
        if len(record.sentences) > max_sentences:
            log.warning(
                "%s:%d: transcript %s has %d sentences, truncating to %d",
                path, lineno, record.id, len(record.sentences), max_sentences,
            )
            record.sentences = record.sentences[:max_sentences]
        records.append(record)
    return records


def write_transcripts(path, records: list[TranscriptRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.id, "ticker": r.ticker, "date": r.date,
                "session": r.session, "sentences": r.sentences,
            }
            if r.label is not None:
                obj["label"] = r.label
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def parse_source_sentences(path) -> list[SourceSentence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    SourceSentence(
                        id=str(obj["id"]),
                        text=str(obj["text"]),
                        session=obj.get("session"),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed source sentence ({exc})") from None
    return out


def write_source_sentences(path, sentences: list[SourceSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            obj = {"id": s.id, "text": s.text, "session": s.session}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# embedding files


@dataclass
class EmbeddingFile:
    dim: int
    encoder_name: str
    vectors: dict[str, np.ndarray]  # float32 rows, insertion-ordered

    def get64(self, sid: str) -> np.ndarray:
        return self.vectors[sid].astype(np.float64)

    def missing_ids(self, ids) -> list[str]:
        return [sid for sid in ids if sid not in self.vectors]


def write_embedding_file(path, dim: int, encoder_name: str, rows) -> None:
    """rows: iterable of (sentence_id, vector); vectors stored as float32 LE."""
    with open(path, "wb") as fh:
        name_raw = encoder_name.encode("utf-8")
        rows = list(rows)
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<3I", EMBEDDING_VERSION, dim, len(rows)))
        fh.write(struct.pack("<I", len(name_raw)))
        fh.write(name_raw)
        for sid, vec in rows:
            vec = np.asarray(vec)
            if vec.shape != (dim,):
                raise ValueError(f"embedding for {sid!r} has shape {vec.shape}, want ({dim},)")
            sid_raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(sid_raw)))
            fh.write(sid_raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_embedding_file(path) -> EmbeddingFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic {blob[:4]!r})")
    version, dim, count = struct.unpack_from("<3I", blob, 4)
    if version != EMBEDDING_VERSION:
        raise ValueError(f"{path}: unsupported embedding file version {version}")
    (name_len,) = struct.unpack_from("<I", blob, 16)
    offset = 20
    encoder_name = blob[offset : offset + name_len].decode("utf-8")
    offset += name_len
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (sid_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        sid = blob[offset : offset + sid_len].decode("utf-8")
        offset += sid_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        vectors[sid] = vec
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    if len(vectors) != count:
        raise ValueError(f"{path}: duplicate sentence ids collapse {count} rows to {len(vectors)}")
    return EmbeddingFile(dim=dim, encoder_name=encoder_name, vectors=vectors)


# ---------------------------------------------------------------------------
# hash embedder


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _mix64(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _sequential_norm(vec: np.ndarray) -> float:
    # cumsum is a strict left-to-right reduction, unlike np.sum's pairwise tree
    return float(math.sqrt(np.cumsum(vec * vec)[-1]))


_token_cache: dict[tuple[str, int, int], np.ndarray] = {}


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    key = (token, dim, seed)
    cached = _token_cache.get(key)
    if cached is not None:
        return cached
    state = _fnv1a64(token.encode("utf-8")) ^ (seed & _MASK64)
    steps = (np.arange(1, dim + 1, dtype=np.uint64) * np.uint64(_GOLDEN)) + np.uint64(state)
    draws = (_mix64(steps) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    vec = 2.0 * draws - 1.0
    norm = _sequential_norm(vec)
    if norm > 0:
        vec = vec / norm
    _token_cache[key] = vec
    return vec


def hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm sentence vector; empty sentences map to zero."""
    if dim <= 0:
        raise ValueError("hash_embed: dim must be positive")
    tokens = tokenize(text)
    if not tokens:
        return np.zeros(dim, dtype=np.float64)
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        acc += _token_vector(tok, dim, seed)
    acc /= float(len(tokens))
    norm = _sequential_norm(acc)
    if norm > 0:
        acc = acc / norm
    return acc


# ---------------------------------------------------------------------------
# labels and splits


def compute_labels(values, thresholds: tuple[float, float] | None = None,
                   percentiles: tuple[float, float] = (33.0, 66.0)) -> tuple[np.ndarray, tuple[float, float]]:
    """Three-way bucket: below p33 -> 0, [p33, p66) -> 1, at or above p66 -> 2.

    Thresholds come from the provided values (the caller passes training-split
    volatilities) unless given explicitly.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("compute_labels: no values")
    if thresholds is None:
        if values.size < 3:
            raise ValueError("compute_labels: need at least 3 values to fit thresholds")
        p_low, p_high = np.percentile(values, percentiles)
    else:
        p_low, p_high = thresholds
    labels = np.where(values < p_low, 0, np.where(values < p_high, 1, 2))
    return labels.astype(np.int64), (float(p_low), float(p_high))


def chronological_split(records: list[TranscriptRecord]) -> tuple[list, list, list]:
    """8:1:1 split after sorting by (date, id); boundaries at floor(0.8n), floor(0.9n)."""
    ordered = sorted(records, key=lambda r: (r.date, r.id))
    n = len(ordered)
    train_end = math.floor(n * 0.8)
    val_end = math.floor(n * 0.9)
    return ordered[:train_end], ordered[train_end:val_end], ordered[val_end:]


# ---------------------------------------------------------------------------
# prices -> volatility


def parse_prices(path) -> dict[str, list[tuple[str, float]]]:
    """CSV with header ticker,date,close; rows sorted per ticker by date."""
    series: dict[str, list[tuple[str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().lower()
        if header.replace(" ", "") != "ticker,date,close":
            raise ValueError(f"{path}: expected header ticker,date,close")
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            ticker, date, close = parts[0], parts[1], float(parts[2])
            if close <= 0:
                raise ValueError(f"{path}:{lineno}: close must be positive")
            series.setdefault(ticker, []).append((date, close))
    for ticker in series:
        series[ticker].sort()
    return series


def log_volatility(series: list[tuple[str, float]], after_date: str, horizon: int) -> float:
    """ln of the stddev of the ``horizon`` daily log returns following a date."""
    closes = [c for d, c in series if d > after_date]
    anchor = [c for d, c in series if d <= after_date]
    if not anchor or len(closes) < horizon:
        raise ValueError(
            f"need {horizon} trading days after {after_date}, have {len(closes)}"
        )
    window = [anchor[-1]] + closes[:horizon]
    returns = np.diff(np.log(window))
    std = float(np.std(returns))
    return float(np.log(max(std, 1e-12)))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    num_transcripts: int = 600
    sentences_per_transcript: int = 20
    num_topics: int = 3
    label_noise: float = 0.1
    seed: int = 7
    embed_dim: int = 32
    news_per_topic: int = 120
    num_tickers: int = 24
    topic_words: int = 8
    filler_vocab: int = 160
    # non-decisive slots re-use boilerplate drawn from this many canonical
    # sentences, the way calls repeat stock phrases; keeps filler variance low
    filler_sentence_pool: int = 40
    words_per_sentence: int = 7
    contamination_rate: float = 0.45
    # stored rows are hash embeddings times this; mimics the norm of real
    # encoder outputs so content is not swamped by the position sinusoids
    embedding_scale: float = 4.0

    def validate(self) -> "SyntheticSpec":
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")
        if self.num_topics < 1:
            raise ValueError("need at least one topic")
        return self

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh)).validate()


@dataclass
class SyntheticCorpus:
    transcripts: list[TranscriptRecord]
    news: list[SourceSentence]
    topic_names: list[str]
    topic_terms: list[list[str]]
    ground_truth: list[tuple[str, int, int]]  # (transcript id, decisive index, label)
    embeddings: list[tuple[str, np.ndarray]]
    embed_dim: int


def synth_generate(spec: SyntheticSpec) -> SyntheticCorpus:
    """Planted-signal corpus: one topical sentence per transcript fixes the label.

    Labels follow the planted topic (label = topic mod 3).  The cross-domain
    news pool mixes pure topic sentences with contaminated ones that blend in
    a second topic's words; the contaminated ones are the flip material for
    negative perturbations.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    topic_vocab = [
        [f"topic{t}word{w}" for w in range(spec.topic_words)]
        for t in range(spec.num_topics)
    ]
    filler = [f"filler{v}" for v in range(spec.filler_vocab)]

    def filler_words(k):
        return [filler[i] for i in rng.integers(0, len(filler), size=k)]

    def topic_sentence(t: int, contaminant: int | None = None) -> str:
        if contaminant is None:
            own = [topic_vocab[t][i] for i in rng.choice(spec.topic_words, size=5, replace=False)]
            rest = filler_words(spec.words_per_sentence - 5)
        else:
            own = [topic_vocab[t][i] for i in rng.choice(spec.topic_words, size=4, replace=False)]
            rest = [
                topic_vocab[contaminant][i]
                for i in rng.choice(spec.topic_words, size=3, replace=False)
            ]
            rest += filler_words(spec.words_per_sentence - 7)
        return " ".join(own + rest)

    boilerplate = [
        " ".join(filler_words(spec.words_per_sentence))
        for _ in range(spec.filler_sentence_pool)
    ]

    transcripts: list[TranscriptRecord] = []
    ground_truth: list[tuple[str, int, int]] = []
    base_date = _dt.date(2019, 1, 1)
    for i in range(spec.num_transcripts):
        tid = f"t{i:04d}"
        topic = int(rng.integers(0, spec.num_topics))
        true_label = topic % 3
        decisive = int(rng.integers(0, spec.sentences_per_transcript))
        sentences = []
        for j in range(spec.sentences_per_transcript):
            if j == decisive:
                sentences.append(topic_sentence(topic))
            else:
                sentences.append(boilerplate[int(rng.integers(0, len(boilerplate)))])
        label = true_label
        if spec.label_noise > 0 and rng.random() < spec.label_noise:
            label = int((true_label + 1 + rng.integers(0, 2)) % 3)
        transcripts.append(
            TranscriptRecord(
                id=tid,
                ticker=f"TK{i % spec.num_tickers:02d}",
                date=(base_date + _dt.timedelta(days=i)).isoformat(),
                session="OP",
                sentences=sentences,
                label=label,
            )
        )
        ground_truth.append((tid, decisive, label))

    news: list[SourceSentence] = []
    for t in range(spec.num_topics):
        for j in range(spec.news_per_topic):
            if rng.random() < spec.contamination_rate:
                other = int((t + 1 + rng.integers(0, max(spec.num_topics - 1, 1))) % spec.num_topics)
                text = topic_sentence(t, contaminant=other if other != t else None)
            else:
                text = topic_sentence(t)
            news.append(SourceSentence(id=f"news{t}_{j:04d}", text=text, session=None))

    embeddings: list[tuple[str, np.ndarray]] = []
    scale = spec.embedding_scale
    for record in transcripts:
        for idx, sent in enumerate(record.sentences):
            embeddings.append(
                (record.sentence_id(idx), scale * hash_embed(sent, spec.embed_dim, spec.seed))
            )
    for s in news:
        embeddings.append((s.id, scale * hash_embed(s.text, spec.embed_dim, spec.seed)))

    topic_names = [f"planted topic {t}" for t in range(spec.num_topics)]
    return SyntheticCorpus(
        transcripts=transcripts,
        news=news,
        topic_names=topic_names,
        topic_terms=[list(words) for words in topic_vocab],
        ground_truth=ground_truth,
        embeddings=embeddings,
        embed_dim=spec.embed_dim,
    )


def write_ground_truth(path, rows: list[tuple[str, int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid, idx, label in rows:
            fh.write(json.dumps({"id": tid, "decisive": idx, "label": label}) + "\n")


def read_ground_truth(path) -> list[tuple[str, int, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows.append((obj["id"], int(obj["decisive"]), int(obj["label"])))
    return rows
