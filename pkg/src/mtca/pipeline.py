"""End-to-end orchestration: prepare, train rounds, augment, explain, evaluate.

The alternating protocol: round 1 trains on the labeled originals; the
resulting checkpoint trace scores topic-matched cross-domain perturbations of
every training transcript; the top/bottom slices join the pool as positive
(self-labeled) and negative (uniform-target) examples; round 2 trains on the
grown pool.  Explanations come from a separate scoring pass over the test
split.

Every random stream derives from (seed, stage[, index]) rather than one
global stream, so a resumed run replays later stages bit-identically.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counterfactual import (
    CheckpointTrace,
    Checkpoint,
    PerturbationRecord,
    explain,
    generate_perturbations,
    perturbed_matrix,
    score_candidates,
    select_augmentations,
    write_explanations,
    write_perturbation_records,
)
from .data import (
    EmbeddingFile,
    SourceSentence,
    TranscriptRecord,
    chronological_split,
    compute_labels,
    log_volatility,
    parse_prices,
    parse_source_sentences,
    parse_transcripts,
    read_embedding_file,
    write_source_sentences,
    write_transcripts,
)
from .encoder import EncodedTranscript, Encoder, EncoderConfig, build_encoded
from .evaluation import EvalReport, evaluate_predictions, random_baseline, ticker_following_baseline
from .losses import cross_entropy_value, one_hot
from .manifest import RunManifest, file_digest, tree_digest
from .topics import (
    InvertedIndex,
    TopicHead,
    TopicSet,
    assign_topic,
    bm25_rank,
    build_distant_supervision,
    read_assignments,
    read_topic_file,
    train_topic_head,
    write_assignments,
    write_topic_file,
)
from .training import TrainConfig, TrainingExample, TrainingPool, train_round

log = logging.getLogger(__name__)

TRACE_INDEX = "trace.json"


# ---------------------------------------------------------------------------
# trace persistence


def save_trace(trace: CheckpointTrace, enc_cfg: EncoderConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scratch = Encoder(enc_cfg, rng=np.random.default_rng(0))
    index = []
    for ck in trace:
        name = f"checkpoint_{ck.step:05d}.mtca"
        scratch.load_flat(ck.params)
        scratch.save(out_dir / name)
        index.append({"step": ck.step, "lr": ck.lr, "file": name})
    with open(out_dir / TRACE_INDEX, "w", encoding="utf-8") as fh:
        json.dump({"checkpoints": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trace(trace_dir, dropout: float = 0.0) -> CheckpointTrace:
    trace_dir = Path(trace_dir)
    with open(trace_dir / TRACE_INDEX, encoding="utf-8") as fh:
        index = json.load(fh)["checkpoints"]
    trace = CheckpointTrace()
    for entry in index:
        enc = Encoder.load(trace_dir / entry["file"], dropout=dropout)
        trace.append(Checkpoint(step=entry["step"], params=enc.flat_vector(), lr=entry["lr"]))
    return trace


# ---------------------------------------------------------------------------
# prepared dataset


@dataclass
class PreparedDataset:
    root: Path
    records: list[TranscriptRecord]
    embeddings: EmbeddingFile
    topics: TopicSet
    head: TopicHead
    assignments: dict[str, tuple[int, float]]
    source: list[SourceSentence]
    splits: dict[str, list[str]]
    _encoded_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, root) -> "PreparedDataset":
        root = Path(root)
        records = parse_transcripts(root / "transcripts.jsonl")
        embeddings = read_embedding_file(root / "embeddings.memb")
        topics = read_topic_file(root / "topics.tsv")
        head = TopicHead.load(root / "topic_head.mtph")
        assignments = {
            sid: (topic, conf) for sid, topic, conf in read_assignments(root / "assignments.tsv")
        }
        source_path = root / "source.jsonl"
        source = parse_source_sentences(source_path) if source_path.exists() else []
        with open(root / "splits.json", encoding="utf-8") as fh:
            splits = json.load(fh)
        return cls(
            root=root, records=records, embeddings=embeddings, topics=topics,
            head=head, assignments=assignments, source=source, splits=splits,
        )

    def split_records(self, split: str) -> list[TranscriptRecord]:
        wanted = self.splits[split]
        by_id = {r.id: r for r in self.records}
        return [by_id[rid] for rid in wanted]

    def pools(self) -> dict[int, list[SourceSentence]]:
        out: dict[int, list[SourceSentence]] = {}
        for s in self.source:
            topic, _ = self.assignments[s.id]
            out.setdefault(topic, []).append(s)
        return out

    def encode(self, record: TranscriptRecord, cfg: EncoderConfig) -> EncodedTranscript:
        cached = self._encoded_cache.get(record.id)
        if cached is None:
            vecs = np.stack([self.embeddings.get64(sid) for sid in record.sentence_ids()])
            cached = build_encoded(vecs, cfg)
            self._encoded_cache[record.id] = cached
        return cached

    def digest(self) -> str:
        return tree_digest(self.root)


class MissingEmbeddings(ValueError):
    def __init__(self, ids: list[str]):
        self.ids = ids
        super().__init__(
            f"{len(ids)} sentence ids lack embeddings: {', '.join(ids[:20])}"
            + ("..." if len(ids) > 20 else "")
        )


def prepare_dataset(
    transcripts_path,
    embeddings_path,
    topics_path,
    out_dir,
    prices_path=None,
    source_path=None,
    max_sentences: int = 500,
    horizon: int = 3,
    distant_top: int = 10,
    head_epochs: int = 300,
    head_lr: float = 0.5,
    seed: int = 0,
) -> RunManifest:
    """Validates, labels, splits, and topic-indexes a corpus into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = parse_transcripts(transcripts_path, max_sentences=max_sentences)
    embeddings = read_embedding_file(embeddings_path)
    topics = read_topic_file(topics_path)
    source = parse_source_sentences(source_path) if source_path else []

    needed = [sid for r in records for sid in r.sentence_ids()]
    needed += [s.id for s in source]
    missing = embeddings.missing_ids(needed)
    if missing:
        raise MissingEmbeddings(missing)

    train, val, test = chronological_split(records)
    if prices_path is not None:
        series = parse_prices(prices_path)
        vols = {}
        for r in records:
            if r.ticker not in series:
                raise ValueError(f"no price series for ticker {r.ticker}")
            vols[r.id] = log_volatility(series[r.ticker], r.date, horizon)
        _, thresholds = compute_labels([vols[r.id] for r in train])
        for r in records:
            labels, _ = compute_labels([vols[r.id]], thresholds=thresholds)
            r.label = int(labels[0])
        with open(out_dir / "thresholds.json", "w", encoding="utf-8") as fh:
            json.dump({"low": thresholds[0], "high": thresholds[1], "horizon": horizon}, fh)
            fh.write("\n")
    unlabeled = [r.id for r in records if r.label is None]
    if unlabeled:
        raise ValueError(
            f"{len(unlabeled)} transcripts lack labels and no prices were given: "
            + ", ".join(unlabeled[:10])
        )

    corpus = {sid: text for r in records for sid, text in zip(r.sentence_ids(), r.sentences)}
    corpus.update({s.id: s.text for s in source})
    index = InvertedIndex(corpus)
    sample_ids: list[str] = []
    sample_labels: list[int] = []
    rng = np.random.default_rng([seed, 77])
    for topic_id, terms in enumerate(topics.query_terms):
        ranking = bm25_rank(index, terms)
        if not ranking:
            log.warning("topic %d (%s): no BM25 hits, skipped", topic_id, topics.names[topic_id])
            continue
        for sid, label in build_distant_supervision(
            topic_id, ranking, list(corpus), topics.no_topic_label, n_top=distant_top, rng=rng
        ):
            sample_ids.append(sid)
            sample_labels.append(label)
    X = np.stack([embeddings.get64(sid) for sid in sample_ids])
    head = train_topic_head(
        X, np.asarray(sample_labels), num_labels=topics.no_topic_label + 1,
        epochs=head_epochs, lr=head_lr,
    )

    assignment_rows = []
    for sid in sorted(corpus):
        label, conf = assign_topic(embeddings.get64(sid), head)
        assignment_rows.append((sid, label, conf))

    with open(out_dir / "distant_samples.tsv", "w", encoding="utf-8") as fh:
        for sid, label in zip(sample_ids, sample_labels):
            fh.write(f"{sid}\t{label}\n")

    write_transcripts(out_dir / "transcripts.jsonl", records)
    shutil.copyfile(embeddings_path, out_dir / "embeddings.memb")
    write_topic_file(out_dir / "topics.tsv", topics)
    head.save(out_dir / "topic_head.mtph")
    write_assignments(out_dir / "assignments.tsv", assignment_rows)
    if source:
        write_source_sentences(out_dir / "source.jsonl", source)
    with open(out_dir / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train": [r.id for r in train],
                "val": [r.id for r in val],
                "test": [r.id for r in test],
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")

    manifest = RunManifest(
        command="prepare",
        config={
            "max_sentences": max_sentences, "horizon": horizon,
            "distant_top": distant_top, "head_epochs": head_epochs, "head_lr": head_lr,
        },
        seeds={"seed": seed},
        inputs={
            "transcripts": file_digest(transcripts_path),
            "embeddings": file_digest(embeddings_path),
            "topics": file_digest(topics_path),
            **({"prices": file_digest(prices_path)} if prices_path else {}),
            **({"source": file_digest(source_path)} if source_path else {}),
        },
    )
    manifest.record_artifacts(out_dir)
    manifest.write(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# augmentation + explanation stages


def augment_split(
    dataset: PreparedDataset,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    encoder: Encoder,
    trace: CheckpointTrace,
    split: str,
    stage_tag: int,
    k_positive: int,
    k_negative: int,
    n_candidates: int = 0,
) -> list[PerturbationRecord]:
    """Scores topic-matched perturbations for every transcript of a split."""
    pools = dataset.pools()
    records_out: list[PerturbationRecord] = []
    threads = train_cfg.threads if train_cfg.threads > 0 else None
    per_sentence = n_candidates or train_cfg.candidates_per_sentence
    for idx, record in enumerate(dataset.split_records(split)):
        rng = np.random.default_rng([train_cfg.seed, stage_tag, idx])
        sentence_topics = [dataset.assignments[sid][0] for sid in record.sentence_ids()]
        candidates = generate_perturbations(
            record, sentence_topics, pools, dataset.topics.no_topic_label,
            per_sentence, rng, train_cfg.include_no_topic,
        )
        if not candidates:
            continue
        encoded = dataset.encode(record, enc_cfg)
        scores = score_candidates(
            enc_cfg, trace, encoded, candidates, dataset.embeddings.get64,
            scope=train_cfg.gradient_scope, threads=threads,
        )

        if train_cfg.positive_target == "original":
            original_target = one_hot(encoder.predict_label(encoded))

            def positive_target(candidate):
                return original_target

        else:

            def positive_target(candidate):
                pert = perturbed_matrix(
                    encoded, candidate.sentence_index,
                    dataset.embeddings.get64(candidate.replacement_id),
                )
                return one_hot(encoder.predict_label(pert))

        records_out.extend(
            select_augmentations(
                record.id, candidates, scores, positive_target, k_positive, k_negative
            )
        )
    return records_out


def records_to_examples(
    dataset: PreparedDataset, enc_cfg: EncoderConfig, records: list[PerturbationRecord]
) -> list[TrainingExample]:
    by_id = {r.id: r for r in dataset.records}
    out = []
    for rec in records:
        encoded = dataset.encode(by_id[rec.transcript_id], enc_cfg)
        pert = perturbed_matrix(
            encoded, rec.sentence_index, dataset.embeddings.get64(rec.replacement_id)
        )
        key = f"{rec.polarity}:{rec.transcript_id}:{rec.sentence_index}:{rec.replacement_id}"
        out.append(TrainingExample(key, pert, np.asarray(rec.target), rec.polarity))
    return out


def explain_split(
    dataset: PreparedDataset,
    enc_cfg: EncoderConfig,
    encoder: Encoder,
    records: list[PerturbationRecord],
    split: str,
):
    """Explanation reports for one split from scored negative records."""
    news_text = {s.id: s.text for s in dataset.source}
    reports = []
    for record in dataset.split_records(split):
        mine = [r for r in records if r.transcript_id == record.id]
        reports.append(
            explain(
                encoder, record, dataset.encode(record, enc_cfg), mine,
                dataset.embeddings.get64, news_text.__getitem__,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_encoder(
    dataset: PreparedDataset, enc_cfg: EncoderConfig, encoder: Encoder, split: str
) -> tuple[np.ndarray, np.ndarray, float]:
    records = dataset.split_records(split)
    preds, losses = [], []
    for r in records:
        probs = encoder.predict_probs(dataset.encode(r, enc_cfg))
        preds.append(int(np.argmax(probs)))
        losses.append(cross_entropy_value(probs, one_hot(r.label)))
    labels = np.array([r.label for r in records])
    return np.array(preds), labels, float(np.mean(losses))


def build_eval_report(
    dataset: PreparedDataset, enc_cfg: EncoderConfig, encoder: Encoder, split: str, seed: int
) -> EvalReport:
    preds, labels, _ = eval_encoder(dataset, enc_cfg, encoder, split)
    history: dict[str, list[int]] = {}
    for r in sorted(dataset.split_records(split), key=lambda r: (r.date, r.id)):
        history.setdefault(r.ticker, []).append(r.label)
    baselines = {"rb": random_baseline(labels, np.random.default_rng([seed, 999]))}
    try:
        baselines["tfb"] = ticker_following_baseline(history)
    except ValueError:
        log.warning("split %s has no consecutive ticker observations; tfb skipped", split)
    return evaluate_predictions(split, preds, labels, baselines=baselines)


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class PipelineResult:
    encoder: Encoder
    traces: list[CheckpointTrace]
    augmentation_records: list[PerturbationRecord]
    explanation_records: list[PerturbationRecord]
    reports: dict[str, EvalReport]
    metrics: list[dict]
    explanations: list


def run_pipeline(
    dataset: PreparedDataset,
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    out_dir,
    resume: bool = False,
) -> PipelineResult:
    """Alternating supervised/augmentation training plus reports.

    ``rounds=1`` is the pure supervised ablation.  With ``resume=True`` the
    function reuses persisted round-1 artifacts (verifying the dataset digest
    recorded in the manifest) and replays later stages exactly.
    """
    enc_cfg.validate()
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    encoder = Encoder(enc_cfg, rng=np.random.default_rng([train_cfg.seed, 0]))
    pool = TrainingPool()
    for record in dataset.split_records("train"):
        pool.add(
            TrainingExample(
                record.id, dataset.encode(record, enc_cfg), one_hot(record.label), "original"
            )
        )

    traces: list[CheckpointTrace] = []
    augmentation_records: list[PerturbationRecord] = []
    last_val_accuracy: float | None = None
    dataset_digest = dataset.digest()
    stop_early = False

    for round_index in range(1, train_cfg.rounds + 1):
        round_dir = out_dir / "rounds" / f"round{round_index}"
        start_step = (round_index - 1) * train_cfg.epochs_per_round
        examples = pool.examples_for_round(round_index)
        pool.round_index = round_index

        round_model = round_dir / "model.mtca"
        if resume and round_model.exists():
            recorded = RunManifest.read(round_dir)
            recorded.verify_input("dataset", dataset_digest)
            encoder = Encoder.load(round_model, dropout=enc_cfg.dropout)
            trace = load_trace(round_dir / "trace", dropout=enc_cfg.dropout)
            prior_metrics = out_dir / "metrics.jsonl"
            if prior_metrics.exists():
                for line in prior_metrics.read_text().splitlines():
                    row = json.loads(line)
                    if row["round"] == round_index and row["split"] == "train":
                        metrics.append(row)
            log.info("round %d: resumed from %s", round_index, round_model)
        else:
            trace = train_round(
                encoder, examples, train_cfg,
                rng=np.random.default_rng([train_cfg.seed, 10 + round_index]),
                start_step=start_step, metrics=metrics.append, round_index=round_index,
            )
            round_dir.mkdir(parents=True, exist_ok=True)
            encoder.save(round_model)
            save_trace(trace, enc_cfg, round_dir / "trace")
            round_manifest = RunManifest(
                command=f"train-round{round_index}",
                config={
                    "round": round_index,
                    "encoder": asdict(enc_cfg),
                    "train": asdict(train_cfg),
                    "data_root": str(dataset.root),
                },
                seeds={"seed": train_cfg.seed},
                inputs={"dataset": dataset_digest},
            )
            round_manifest.record_artifacts(round_dir)
            round_manifest.write(round_dir)
        traces.append(trace)

        for split in ("val", "test"):
            if dataset.splits[split]:
                preds, labels, loss = eval_encoder(dataset, enc_cfg, encoder, split)
                metrics.append(
                    {
                        "round": round_index,
                        "epoch": start_step + train_cfg.epochs_per_round,
                        "split": split,
                        "loss": loss,
                        "accuracy": float(np.mean(preds == labels)),
                    }
                )

        if train_cfg.early_stop and dataset.splits["val"]:
            val_rows = [m for m in metrics if m["split"] == "val" and m["round"] == round_index]
            current = val_rows[-1]["accuracy"]
            if last_val_accuracy is not None and current < last_val_accuracy + 1e-3:
                stop_early = True
            last_val_accuracy = current

        if round_index < train_cfg.rounds and not stop_early:
            augmentation_records = augment_split(
                dataset, enc_cfg, train_cfg, encoder, trace, "train",
                stage_tag=500, k_positive=train_cfg.top_positive,
                k_negative=train_cfg.bottom_negative,
            )
            write_perturbation_records(out_dir / "records.jsonl", augmentation_records)
            for example in records_to_examples(dataset, enc_cfg, augmentation_records):
                pool.add(example)
        if stop_early:
            log.info("early stop after round %d", round_index)
            break

    encoder.save(out_dir / "model.mtca")

    explanation_records: list[PerturbationRecord] = []
    explanations = []
    if dataset.splits["test"] and dataset.source and traces:
        explanation_records = augment_split(
            dataset, enc_cfg, train_cfg, encoder, traces[-1], "test",
            stage_tag=900, k_positive=0, k_negative=train_cfg.explain_bottom,
            n_candidates=train_cfg.explain_candidates,
        )
        write_perturbation_records(out_dir / "explain_records.jsonl", explanation_records)
        explanations = explain_split(dataset, enc_cfg, encoder, explanation_records, "test")
        write_explanations(out_dir / "explanations.jsonl", explanations)

    reports: dict[str, EvalReport] = {}
    for split in ("train", "val", "test"):
        if dataset.splits[split]:
            report = build_eval_report(dataset, enc_cfg, encoder, split, train_cfg.seed)
            reports[split] = report
            with open(out_dir / f"eval_{split}.json", "w", encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
            with open(out_dir / f"eval_{split}.txt", "w", encoding="utf-8") as fh:
                fh.write(report.render_table())

    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    manifest = RunManifest(
        command="train",
        config={
            "encoder": asdict(enc_cfg),
            "train": asdict(train_cfg),
            "data_root": str(dataset.root),
        },
        seeds={"seed": train_cfg.seed},
        inputs={"dataset": dataset_digest},
    )
    manifest.record_artifacts(out_dir)
    manifest.write(out_dir)

    return PipelineResult(
        encoder=encoder,
        traces=traces,
        augmentation_records=augmentation_records,
        explanation_records=explanation_records,
        reports=reports,
        metrics=metrics,
        explanations=explanations,
    )
