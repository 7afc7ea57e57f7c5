"""Command-line surface: synth, prepare, train, augment, explain, evaluate.

Commands never mutate their inputs, write everything under --out together
with a run manifest, and are idempotent for fixed seeds (byte-identical
outputs, manifest timestamp aside).  Failures exit nonzero with a
categorized one-line error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .counterfactual import read_perturbation_records, write_perturbation_records
from .data import (
    SyntheticSpec,
    synth_generate,
    write_embedding_file,
    write_ground_truth,
    write_source_sentences,
    write_transcripts,
)
from .encoder import Encoder
from .manifest import DigestMismatch, RunManifest, file_digest, tree_digest
from .pipeline import (
    PreparedDataset,
    augment_split,
    build_eval_report,
    explain_split,
    load_trace,
    prepare_dataset,
    run_pipeline,
)
from .topics import TopicSet, write_topic_file
from .training import read_config
from . import tensor

log = logging.getLogger("mtca")


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth_generate(spec)
    write_transcripts(out / "transcripts.jsonl", corpus.transcripts)
    write_source_sentences(out / "news.jsonl", corpus.news)
    write_ground_truth(out / "ground_truth.jsonl", corpus.ground_truth)
    write_embedding_file(out / "embeddings.memb", corpus.embed_dim, "hash-v1", corpus.embeddings)
    write_topic_file(out / "topics.tsv", TopicSet(corpus.topic_names, corpus.topic_terms))
    manifest = RunManifest(command="synth", config=asdict(spec), seeds={"seed": spec.seed})
    manifest.record_artifacts(out)
    manifest.write(out)
    print(f"synth: {len(corpus.transcripts)} transcripts, {len(corpus.news)} source sentences -> {out}")
    return 0


def cmd_prepare(args) -> int:
    manifest = prepare_dataset(
        args.transcripts,
        args.embeddings,
        args.topics,
        args.out,
        prices_path=args.prices,
        source_path=args.source,
        max_sentences=args.max_sentences,
        horizon=args.horizon,
        distant_top=args.distant_top,
        head_epochs=args.head_epochs,
        head_lr=args.head_lr,
        seed=args.seed,
    )
    print(f"prepare: {len(manifest.artifacts)} artifacts -> {args.out}")
    return 0


def cmd_train(args) -> int:
    enc_cfg, train_cfg = read_config(args.config)
    dataset = PreparedDataset.load(args.data)
    result = run_pipeline(dataset, enc_cfg, train_cfg, args.out, resume=args.resume)
    for split, report in result.reports.items():
        print(f"train: {split} accuracy {report.accuracy:.4f}")
    print(f"train: model + artifacts -> {args.out}")
    return 0


def _model_dataset(model_dir) -> tuple[Encoder, PreparedDataset, RunManifest, dict]:
    model_dir = Path(model_dir)
    manifest = RunManifest.read(model_dir)
    data_root = manifest.config.get("data_root")
    if data_root is None:
        raise ValueError(f"{model_dir}: manifest records no data_root; re-run train")
    dataset = PreparedDataset.load(data_root)
    manifest.verify_input("dataset", dataset.digest())
    enc_cfg_fields = manifest.config["encoder"]
    dropout = enc_cfg_fields["dropout"]
    encoder = Encoder.load(model_dir / "model.mtca", dropout=dropout)
    return encoder, dataset, manifest, enc_cfg_fields


def cmd_augment(args) -> int:
    from .encoder import EncoderConfig
    from .training import TrainConfig

    encoder, dataset, manifest, enc_fields = _model_dataset(args.model)
    enc_cfg = EncoderConfig(**enc_fields)
    train_cfg = TrainConfig(**manifest.config["train"])
    trace = load_trace(args.trace, dropout=enc_cfg.dropout)
    if args.source is not None:
        source_dataset = PreparedDataset.load(args.source)
    else:
        source_dataset = dataset
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = augment_split(
        source_dataset, enc_cfg, train_cfg, encoder, trace, args.split,
        stage_tag=500 if args.split == "train" else 900,
        k_positive=train_cfg.top_positive, k_negative=train_cfg.bottom_negative,
    )
    write_perturbation_records(out / "records.jsonl", records)
    if not records:
        log.warning("augment: no candidates found (empty topic pools?); wrote empty record file")
    out_manifest = RunManifest(
        command="augment",
        config={"split": args.split, "model": str(args.model), "trace": str(args.trace)},
        seeds={"seed": train_cfg.seed},
        inputs={"dataset": source_dataset.digest(), "model": file_digest(Path(args.model) / "model.mtca")},
    )
    out_manifest.record_artifacts(out)
    out_manifest.write(out)
    print(f"augment: {len(records)} perturbation records -> {out / 'records.jsonl'}")
    return 0


def cmd_explain(args) -> int:
    from .encoder import EncoderConfig
    from .counterfactual import write_explanations

    encoder, dataset, manifest, enc_fields = _model_dataset(args.model)
    enc_cfg = EncoderConfig(**enc_fields)
    records = read_perturbation_records(args.records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = explain_split(dataset, enc_cfg, encoder, records, args.split)
    write_explanations(out / "explanations.jsonl", reports)
    kept = sum(len(r.entries) for r in reports)
    out_manifest = RunManifest(
        command="explain",
        config={"split": args.split, "records": str(args.records)},
        inputs={
            "dataset": dataset.digest(),
            "model": file_digest(Path(args.model) / "model.mtca"),
            "records": file_digest(args.records),
        },
    )
    out_manifest.record_artifacts(out)
    out_manifest.write(out)
    print(f"explain: {kept} flip entries across {len(reports)} transcripts -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .encoder import EncoderConfig

    encoder, dataset, manifest, enc_fields = _model_dataset(args.model)
    enc_cfg = EncoderConfig(**enc_fields)
    seed = manifest.seeds.get("seed", 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = build_eval_report(dataset, enc_cfg, encoder, args.split, seed)
    with open(out / f"eval_{args.split}.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(out / f"eval_{args.split}.txt", "w", encoding="utf-8") as fh:
        fh.write(report.render_table())
    out_manifest = RunManifest(
        command="evaluate",
        config={"split": args.split},
        inputs={"dataset": dataset.digest(), "model": file_digest(Path(args.model) / "model.mtca")},
    )
    out_manifest.record_artifacts(out)
    out_manifest.write(out)
    print(report.render_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtca",
        description="Sparse-attention volatility classifier with counterfactual augmentation",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic planted-signal corpus")
    p.add_argument("--spec", help="JSON file of generator settings (defaults used if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="validate, label, split and topic-index a corpus")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--prices", help="CSV price series for volatility labels")
    p.add_argument("--source", help="cross-domain sentence pool (JSONL)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-sentences", type=int, default=500)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--distant-top", type=int, default=10)
    p.add_argument("--head-epochs", type=int, default=300)
    p.add_argument("--head-lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="run the multi-round training pipeline")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="reuse persisted round-1 artifacts")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("augment", help="score perturbations against a checkpoint trace")
    p.add_argument("--model", required=True, help="trained model directory")
    p.add_argument("--trace", required=True, help="checkpoint trace directory")
    p.add_argument("--source", help="alternative prepared dataset to draw candidates from")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("explain", help="turn negative records into flip explanations")
    p.add_argument("--model", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("evaluate", help="accuracy report with reference baselines")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)
    return parser


_ERROR_CATEGORIES = (
    (DigestMismatch, "digest"),
    (tensor.NonFiniteError, "numeric"),
    (tensor.DimensionError, "shape"),
    ((FileNotFoundError, IsADirectoryError), "io"),
    ((ValueError, KeyError), "data"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except Exception as exc:  # categorize, report, nonzero exit
        for kinds, tag in _ERROR_CATEGORIES:
            if isinstance(exc, kinds):
                print(f"error[{tag}]: {exc}", file=sys.stderr)
                return 1
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
