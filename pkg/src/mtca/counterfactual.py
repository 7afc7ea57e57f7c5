"""Counterfactual perturbation scoring, augmentation selection, explanations.

A perturbation swaps one transcript sentence for a topic-matched cross-domain
sentence at the embedding level.  Its influence is scored with the
checkpoint-trace function

    score(E, E') = sum_i [ grad L(E') . grad L(E) - ||grad L(E')||^2 ]

evaluated at every saved parameter snapshot, where both losses use the label
the model predicts for the original transcript at that snapshot.  High scores
mean the perturbed transcript pushes the parameters the same way the original
does; the top slice becomes positive augmentations (self-labeled), the bottom
slice negative ones (uniform target).  Negative perturbations that flip a
correct prediction double as explanations.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .data import SourceSentence, TranscriptRecord
from .encoder import EncodedTranscript, Encoder, EncoderConfig, position_encoding
from .losses import UNIFORM_TARGET, cross_entropy, cross_entropy_value, one_hot
from .topics import tokenize

log = logging.getLogger(__name__)


class SingularInfluenceSystem(RuntimeError):
    """The damped Hessian system could not be solved to tolerance."""


# ---------------------------------------------------------------------------
# checkpoint traces


@dataclass
class Checkpoint:
    step: int
    params: np.ndarray
    lr: float


class CheckpointTrace:
    """Ordered parameter snapshots saved along one training run."""

    def __init__(self, checkpoints: Sequence[Checkpoint] = ()):
        self.checkpoints: list[Checkpoint] = []
        for ck in checkpoints:
            self.append(ck)

    def append(self, ck: Checkpoint) -> None:
        if self.checkpoints and ck.step <= self.checkpoints[-1].step:
            raise ValueError(
                f"checkpoint steps must increase: {ck.step} after {self.checkpoints[-1].step}"
            )
        self.checkpoints.append(ck)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __iter__(self):
        return iter(self.checkpoints)


# ---------------------------------------------------------------------------
# model protocol + spec-level operations


class GradModel(Protocol):
    """Anything that exposes per-instance losses and loss gradients."""

    def predict_label(self, theta: np.ndarray, x) -> int: ...

    def loss(self, theta: np.ndarray, x, label: int) -> float: ...

    def loss_grad(self, theta: np.ndarray, x, label: int) -> np.ndarray: ...


def pc(model: GradModel, theta: np.ndarray, x_orig, x_pert, label: int | None = None) -> float:
    """Loss difference of the perturbed vs original instance (positive means
    the perturbation hurts).  The evaluation label defaults to the model's
    prediction for the original instance."""
    y = model.predict_label(theta, x_orig) if label is None else label
    value = model.loss(theta, x_pert, y) - model.loss(theta, x_orig, y)
    if not np.isfinite(value):
        raise T.NonFiniteError("pc produced a non-finite loss difference")
    return value


def tracin_plus(model: GradModel, trace: CheckpointTrace, x_orig, x_pert) -> float:
    """Checkpoint-summed alignment between the perturbed instance's gradient
    and the gradient of the loss difference."""
    if len(trace) == 0:
        raise ValueError("tracin_plus: empty checkpoint trace")
    total = 0.0
    for ck in trace:
        y = model.predict_label(ck.params, x_orig)
        g_pert = model.loss_grad(ck.params, x_pert, y)
        g_orig = model.loss_grad(ck.params, x_orig, y)
        total += float(g_pert @ g_orig) - float(g_pert @ g_pert)
    return total


def average_hessian(
    model: GradModel, theta: np.ndarray, train_set: Sequence[tuple[object, int]],
    h: float = 1e-5,
) -> np.ndarray:
    """Mean training-loss Hessian via central differences of the gradient."""
    n = theta.size
    H = np.zeros((n, n))
    probe = theta.astype(np.float64).copy()
    for i in range(n):
        orig = probe[i]
        probe[i] = orig + h
        g_hi = np.zeros(n)
        for x, label in train_set:
            g_hi += model.loss_grad(probe, x, label)
        probe[i] = orig - h
        g_lo = np.zeros(n)
        for x, label in train_set:
            g_lo += model.loss_grad(probe, x, label)
        probe[i] = orig
        H[i] = (g_hi - g_lo) / (2.0 * h * len(train_set))
    return (H + H.T) / 2.0


def exact_influence(
    model: GradModel,
    theta: np.ndarray,
    x_orig,
    x_pert,
    train_set: Sequence[tuple[object, int]],
    damping: float = 1e-3,
    max_params: int = 2000,
    hessian: np.ndarray | None = None,
) -> np.ndarray:
    """Solves (H + damping I) v = grad L(orig) - grad L(pert); tiny models only."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size > max_params:
        raise ValueError(
            f"exact_influence is a validation oracle: {theta.size} parameters > {max_params}"
        )
    y = model.predict_label(theta, x_orig)
    g = model.loss_grad(theta, x_orig, y) - model.loss_grad(theta, x_pert, y)
    if hessian is None:
        hessian = average_hessian(model, theta, train_set)
    A = hessian + damping * np.eye(theta.size)
    try:
        v = np.linalg.solve(A, g)
    except np.linalg.LinAlgError as exc:
        raise SingularInfluenceSystem(f"damped system is singular: {exc}") from None
    if not np.all(np.isfinite(v)):
        raise SingularInfluenceSystem("damped system produced non-finite solution")
    residual = float(np.linalg.norm(A @ v - g))
    if not residual <= 1e-8:
        raise SingularInfluenceSystem(f"solve residual {residual:.3e} exceeds 1e-8")
    return v


# ---------------------------------------------------------------------------
# encoder adapter


class EncoderGradModel:
    """GradModel over the transcript encoder.

    ``theta`` is the full flat parameter vector; gradients are restricted to
    the configured scope (classification head plus final projection by
    default, or everything for small models).  Not thread-safe: give each
    worker its own instance.
    """

    def __init__(self, cfg: EncoderConfig, scope: str = "last"):
        self._encoder = Encoder(cfg, rng=np.random.default_rng(0))
        self.scope = scope
        self._loaded: np.ndarray | None = None

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    def _load(self, theta: np.ndarray) -> None:
        if self._loaded is not theta:
            self._encoder.load_flat(theta)
            self._loaded = theta

    def predict_label(self, theta: np.ndarray, t: EncodedTranscript) -> int:
        self._load(theta)
        return self._encoder.predict_label(t)

    def loss(self, theta: np.ndarray, t: EncodedTranscript, label: int) -> float:
        self._load(theta)
        return cross_entropy_value(self._encoder.predict_probs(t), one_hot(label))

    def loss_grad(self, theta: np.ndarray, t: EncodedTranscript, label: int) -> np.ndarray:
        self._load(theta)
        with T.Tape() as tape:
            probs = self._encoder.forward(t, train=False)
            loss = cross_entropy(probs, one_hot(label))
        tape.backward(loss)
        return self._encoder.grad_vector(self.scope)


# ---------------------------------------------------------------------------
# perturbation generation and scoring


@dataclass(frozen=True)
class Candidate:
    sentence_index: int
    replacement_id: str
    topic_id: int


def generate_perturbations(
    record: TranscriptRecord,
    sentence_topics: Sequence[int],
    pools: dict[int, list[SourceSentence]],
    no_topic_label: int,
    n_candidates: int,
    rng: np.random.Generator,
    include_no_topic: bool = False,
) -> list[Candidate]:
    """Seeded topic-matched replacement candidates, one pool draw per sentence.

    Pool entries carrying a session tag must match the transcript's session;
    untagged entries (news) are always compatible.  Empty pools skip the
    sentence with a warning.
    """
    if len(sentence_topics) != len(record.sentences):
        raise ValueError("one topic per sentence required")
    out: list[Candidate] = []
    for idx, topic in enumerate(sentence_topics):
        if topic == no_topic_label and not include_no_topic:
            continue
        pool = [
            s for s in pools.get(topic, [])
            if s.session is None or s.session == record.session
        ]
        if not pool:
            log.warning(
                "transcript %s sentence %d: empty pool for topic %d, skipping",
                record.id, idx, topic,
            )
            continue
        take = min(n_candidates, len(pool))
        picked = rng.choice(len(pool), size=take, replace=False)
        out.extend(Candidate(idx, pool[i].id, topic) for i in sorted(picked))
    return out


def perturbed_matrix(
    encoded: EncodedTranscript, sentence_index: int, replacement_vec64: np.ndarray
) -> EncodedTranscript:
    """Copy of the encoded transcript with one sentence row swapped out.

    The replacement keeps the slot's position encoding, mirroring how the
    original row was built.
    """
    matrix = encoded.matrix.copy()
    matrix[sentence_index] = replacement_vec64 + position_encoding(
        sentence_index, matrix.shape[1]
    )
    return EncodedTranscript(matrix=matrix, mask=encoded.mask)


def _thread_count(explicit: int | None) -> int:
    if explicit is not None:
        return max(1, explicit)
    env = os.environ.get("MTCA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def score_candidates(
    cfg: EncoderConfig,
    trace: CheckpointTrace,
    encoded: EncodedTranscript,
    candidates: Sequence[Candidate],
    embedding_of: Callable[[str], np.ndarray],
    scope: str = "last",
    threads: int | None = None,
) -> np.ndarray:
    """Influence score per candidate, deterministic regardless of threading.

    Parallelism splits the candidate list; each worker owns a private encoder
    and every (candidate, checkpoint) contribution lands in its own slot, so
    scheduling never changes results.
    """
    if len(trace) == 0:
        raise ValueError("score_candidates: empty trace")
    scores = np.zeros(len(candidates))
    if not candidates:
        return scores
    workers = min(_thread_count(threads), len(candidates))
    chunks = np.array_split(np.arange(len(candidates)), workers)

    def run_chunk(idx_chunk, ck: Checkpoint):
        model = EncoderGradModel(cfg, scope=scope)
        out = np.zeros(idx_chunk.size)
        y = model.predict_label(ck.params, encoded)
        g_orig = model.loss_grad(ck.params, encoded, y)
        for j, ci in enumerate(idx_chunk):
            cand = candidates[ci]
            pert = perturbed_matrix(encoded, cand.sentence_index, embedding_of(cand.replacement_id))
            g_pert = model.loss_grad(ck.params, pert, y)
            out[j] = float(g_pert @ g_orig) - float(g_pert @ g_pert)
        return out

    for ck in trace:
        if workers == 1:
            scores += run_chunk(chunks[0], ck)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: run_chunk(c, ck), chunks))
            scores += np.concatenate(results)
    return scores


# ---------------------------------------------------------------------------
# augmentation selection


@dataclass
class PerturbationRecord:
    transcript_id: str
    sentence_index: int
    replacement_id: str
    topic_id: int
    score: float
    polarity: str  # positive | negative
    target: list[float]

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"bad polarity {self.polarity!r}")
        if self.polarity == "negative" and list(self.target) != list(UNIFORM_TARGET):
            raise ValueError("negative records must carry the uniform target")
        if self.polarity == "positive" and sorted(self.target) != [0.0, 0.0, 1.0]:
            raise ValueError("positive records must carry a one-hot target")


def select_augmentations(
    transcript_id: str,
    candidates: Sequence[Candidate],
    scores: np.ndarray,
    positive_target_of: Callable[[Candidate], np.ndarray],
    k_positive: int = 1,
    k_negative: int = 1,
) -> list[PerturbationRecord]:
    """Top slice becomes positive records, bottom slice negative ones.

    Ordering is score-descending with candidate id as the tie-break, so with
    equal scores the first id goes positive and the last goes negative.  The
    two slices never overlap even when candidates run short.
    """
    n = len(candidates)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    take_p = min(k_positive, n)
    take_n = min(k_negative, n - take_p)
    records = []
    for i in order[:take_p]:
        records.append(
            PerturbationRecord(
                transcript_id=transcript_id,
                sentence_index=candidates[i].sentence_index,
                replacement_id=candidates[i].replacement_id,
                topic_id=candidates[i].topic_id,
                score=float(f"{scores[i]:.6f}"),
                polarity="positive",
                target=[float(v) for v in positive_target_of(candidates[i])],
            )
        )
    for i in order[n - take_n :]:
        records.append(
            PerturbationRecord(
                transcript_id=transcript_id,
                sentence_index=candidates[i].sentence_index,
                replacement_id=candidates[i].replacement_id,
                topic_id=candidates[i].topic_id,
                score=float(f"{scores[i]:.6f}"),
                polarity="negative",
                target=[float(v) for v in UNIFORM_TARGET],
            )
        )
    return records


def write_perturbation_records(path, records: Sequence[PerturbationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "transcript_id": r.transcript_id,
                        "sentence_index": r.sentence_index,
                        "replacement_id": r.replacement_id,
                        "topic_id": r.topic_id,
                        "score": r.score,
                        "polarity": r.polarity,
                        "target": r.target,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_perturbation_records(path) -> list[PerturbationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(PerturbationRecord(**obj))
    return out


# ---------------------------------------------------------------------------
# explanations


def token_closeness(a: str, b: str) -> float:
    """Jaccard similarity over lowercase token sets."""
    ta, tb = set(tokenize(a)), set(tokenize(b))
    if not ta and not tb:
        return 1.0
    union = ta | tb
    return len(ta & tb) / len(union)


@dataclass
class ExplanationEntry:
    sentence_index: int
    original_sentence: str
    replacement_sentence: str
    topic_id: int
    score: float
    original_label: int
    perturbed_label: int
    closeness: float


@dataclass
class ExplanationReport:
    transcript_id: str
    entries: list[ExplanationEntry]


def explain(
    encoder: Encoder,
    record: TranscriptRecord,
    encoded: EncodedTranscript,
    negative_records: Sequence[PerturbationRecord],
    embedding_of: Callable[[str], np.ndarray],
    replacement_text_of: Callable[[str], str],
) -> ExplanationReport:
    """Keeps the negative perturbations that flip a correct prediction.

    Entries sort by score ascending, most damaging first.  A transcript whose
    prediction is already wrong (or that nothing flips) yields an empty report.
    """
    entries: list[ExplanationEntry] = []
    original_label = encoder.predict_label(encoded)
    if record.label is not None and original_label == record.label:
        for r in negative_records:
            if r.transcript_id != record.id or r.polarity != "negative":
                continue
            pert = perturbed_matrix(encoded, r.sentence_index, embedding_of(r.replacement_id))
            perturbed_label = encoder.predict_label(pert)
            if perturbed_label == original_label:
                continue
            replacement_text = replacement_text_of(r.replacement_id)
            entries.append(
                ExplanationEntry(
                    sentence_index=r.sentence_index,
                    original_sentence=record.sentences[r.sentence_index],
                    replacement_sentence=replacement_text,
                    topic_id=r.topic_id,
                    score=r.score,
                    original_label=original_label,
                    perturbed_label=perturbed_label,
                    closeness=float(f"{token_closeness(record.sentences[r.sentence_index], replacement_text):.6f}"),
                )
            )
    entries.sort(key=lambda e: (e.score, e.sentence_index))
    return ExplanationReport(transcript_id=record.id, entries=entries)


def write_explanations(path, reports: Sequence[ExplanationReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(
                json.dumps(
                    {
                        "transcript_id": rep.transcript_id,
                        "entries": [
                            {
                                "sentence_index": e.sentence_index,
                                "original_sentence": e.original_sentence,
                                "replacement_sentence": e.replacement_sentence,
                                "topic_id": e.topic_id,
                                "score": e.score,
                                "original_label": e.original_label,
                                "perturbed_label": e.perturbed_label,
                                "closeness": e.closeness,
                            }
                            for e in rep.entries
                        ],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_explanations(path) -> list[ExplanationReport]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(
                    ExplanationReport(
                        transcript_id=obj["transcript_id"],
                        entries=[ExplanationEntry(**e) for e in obj["entries"]],
                    )
                )
    return out
