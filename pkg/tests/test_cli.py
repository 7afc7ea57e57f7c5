"""Operator-surface walkthrough on a miniature corpus."""

import json
from pathlib import Path

import pytest

from mtca.cli import main
from mtca.encoder import EncoderConfig
from mtca.manifest import tree_digest
from mtca.training import TrainConfig, write_config

SPEC = {
    "num_transcripts": 30,
    "sentences_per_transcript": 6,
    "label_noise": 0.0,
    "seed": 5,
    "embed_dim": 16,
    "news_per_topic": 12,
    "filler_sentence_pool": 12,
    "num_tickers": 5,
}

ENC = EncoderConfig(embed_dim=16, max_sentences=6, num_heads=2, top_queries=3, dropout=0.1)
TRAIN = TrainConfig(
    lr=0.01, batch_size=8, weight_decay=0.01, kl_alpha=0.3, rounds=2,
    epochs_per_round=2, seed=3, checkpoint_every=1, candidates_per_sentence=3,
    explain_bottom=3, explain_candidates=5,
)


@pytest.fixture(scope="module")
def walkthrough(tmp_path_factory):
    """synth -> prepare -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SPEC))
    assert main(["synth", "--spec", str(spec_path), "--out", str(root / "raw")]) == 0
    assert main([
        "prepare",
        "--transcripts", str(root / "raw" / "transcripts.jsonl"),
        "--embeddings", str(root / "raw" / "embeddings.memb"),
        "--topics", str(root / "raw" / "topics.tsv"),
        "--source", str(root / "raw" / "news.jsonl"),
        "--out", str(root / "prep"),
        "--max-sentences", "6",
        "--distant-top", "6",
        "--seed", "1",
    ]) == 0
    config = root / "run.conf"
    write_config(config, ENC, TRAIN)
    assert main([
        "train", "--config", str(config), "--data", str(root / "prep"),
        "--out", str(root / "model"),
    ]) == 0
    return root


class TestSynth:
    def test_outputs_and_determinism(self, walkthrough, tmp_path):
        root = walkthrough
        spec_path = root / "spec.json"
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "again")]) == 0
        assert tree_digest(tmp_path / "again") == tree_digest(root / "raw")

    def test_zero_size_spec_valid(self, tmp_path):
        spec_path = tmp_path / "zero.json"
        spec_path.write_text(json.dumps({**SPEC, "num_transcripts": 0}))
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "zero")]) == 0
        assert (tmp_path / "zero" / "transcripts.jsonl").read_text() == ""


class TestPrepare:
    def test_missing_embedding_id_reported(self, walkthrough, tmp_path, capsys):
        root = walkthrough
        from mtca.data import read_embedding_file, write_embedding_file

        emb = read_embedding_file(root / "raw" / "embeddings.memb")
        rows = [(sid, vec) for sid, vec in emb.vectors.items() if sid != "t0002:1"]
        write_embedding_file(tmp_path / "short.memb", emb.dim, emb.encoder_name, rows)
        code = main([
            "prepare",
            "--transcripts", str(root / "raw" / "transcripts.jsonl"),
            "--embeddings", str(tmp_path / "short.memb"),
            "--topics", str(root / "raw" / "topics.tsv"),
            "--out", str(tmp_path / "prep"),
            "--max-sentences", "6",
        ])
        assert code == 1
        assert "t0002:1" in capsys.readouterr().err

    def test_rerun_identical_manifest_digest(self, walkthrough, tmp_path):
        root = walkthrough
        assert main([
            "prepare",
            "--transcripts", str(root / "raw" / "transcripts.jsonl"),
            "--embeddings", str(root / "raw" / "embeddings.memb"),
            "--topics", str(root / "raw" / "topics.tsv"),
            "--source", str(root / "raw" / "news.jsonl"),
            "--out", str(tmp_path / "prep2"),
            "--max-sentences", "6",
            "--distant-top", "6",
            "--seed", "1",
        ]) == 0
        a = json.loads((tmp_path / "prep2" / "manifest.json").read_text())
        b = json.loads((root / "prep" / "manifest.json").read_text())
        assert a["artifacts"] == b["artifacts"]


class TestTrain:
    def test_model_artifacts(self, walkthrough):
        root = walkthrough
        for name in ("model.mtca", "metrics.jsonl", "manifest.json",
                     "rounds/round1/model.mtca", "rounds/round2/model.mtca"):
            assert (root / "model" / name).exists(), name

    def test_walkthrough_reproduces_library_metrics(self, walkthrough, tmp_path):
        # the command surface must produce byte-identical metrics to calling
        # the pipeline directly on the same prepared data and config
        from mtca.pipeline import PreparedDataset, run_pipeline

        root = walkthrough
        dataset = PreparedDataset.load(root / "prep")
        run_pipeline(dataset, ENC, TRAIN, tmp_path / "direct")
        assert (tmp_path / "direct" / "metrics.jsonl").read_bytes() == (
            root / "model" / "metrics.jsonl"
        ).read_bytes()
        assert (tmp_path / "direct" / "model.mtca").read_bytes() == (
            root / "model" / "model.mtca"
        ).read_bytes()

    def test_rounds_one_is_ablation(self, walkthrough, tmp_path):
        root = walkthrough
        config = tmp_path / "ablate.conf"
        from dataclasses import replace

        write_config(config, ENC, replace(TRAIN, rounds=1))
        assert main([
            "train", "--config", str(config), "--data", str(root / "prep"),
            "--out", str(tmp_path / "ablation"),
        ]) == 0
        assert not (tmp_path / "ablation" / "records.jsonl").exists()
        rows = [json.loads(l) for l in (tmp_path / "ablation" / "metrics.jsonl").read_text().splitlines()]
        assert {r["round"] for r in rows} == {1}


class TestAugment:
    def test_records_reproduce_pipeline_stage(self, walkthrough, tmp_path):
        # pointing augment at the round-1 artifacts replays the pipeline's
        # own augmentation stage byte for byte
        root = walkthrough
        round1 = root / "model" / "rounds" / "round1"
        out = tmp_path / "aug"
        assert main([
            "augment", "--model", str(round1),
            "--trace", str(round1 / "trace"),
            "--out", str(out),
        ]) == 0
        assert (out / "records.jsonl").read_text() == (root / "model" / "records.jsonl").read_text()

    def test_empty_pool_exits_zero_with_empty_file(self, walkthrough, tmp_path):
        # a prepared dataset with no cross-domain source has empty pools
        root = walkthrough
        assert main([
            "prepare",
            "--transcripts", str(root / "raw" / "transcripts.jsonl"),
            "--embeddings", str(root / "raw" / "embeddings.memb"),
            "--topics", str(root / "raw" / "topics.tsv"),
            "--out", str(tmp_path / "nosrc"),
            "--max-sentences", "6",
            "--distant-top", "6",
            "--seed", "1",
        ]) == 0
        out = tmp_path / "aug_empty"
        code = main([
            "augment", "--model", str(root / "model"),
            "--trace", str(root / "model" / "rounds" / "round1" / "trace"),
            "--source", str(tmp_path / "nosrc"),
            "--out", str(out),
        ])
        assert code == 0
        assert (out / "records.jsonl").read_text() == ""


class TestExplainEvaluate:
    def test_explain_from_records(self, walkthrough, tmp_path):
        root = walkthrough
        out = tmp_path / "expl"
        assert main([
            "explain", "--model", str(root / "model"),
            "--records", str(root / "model" / "explain_records.jsonl"),
            "--out", str(out), "--split", "test",
        ]) == 0
        ours = (out / "explanations.jsonl").read_text()
        pipelines = (root / "model" / "explanations.jsonl").read_text()
        assert ours == pipelines

    def test_evaluate_writes_report(self, walkthrough, tmp_path):
        root = walkthrough
        out = tmp_path / "eval"
        assert main([
            "evaluate", "--model", str(root / "model"), "--split", "test",
            "--out", str(out),
        ]) == 0
        report = json.loads((out / "eval_test.json").read_text())
        assert report["split"] == "test"
        assert "rb" in report["baselines"]
        assert (out / "eval_test.txt").read_text().startswith("split: test")

    def test_digest_mismatch_detected(self, walkthrough, tmp_path, capsys):
        import shutil

        root = walkthrough
        model_copy = tmp_path / "model_copy"
        shutil.copytree(root / "model", model_copy)
        manifest = json.loads((model_copy / "manifest.json").read_text())
        manifest["inputs"]["dataset"] = "0" * 64
        (model_copy / "manifest.json").write_text(json.dumps(manifest))
        code = main([
            "evaluate", "--model", str(model_copy), "--split", "test",
            "--out", str(tmp_path / "ev"),
        ])
        assert code == 1
        assert "error[digest]" in capsys.readouterr().err


class TestCliMisc:
    def test_unknown_config_key_categorized(self, walkthrough, tmp_path, capsys):
        root = walkthrough
        bad = tmp_path / "bad.conf"
        bad.write_text("bogus = 1\n")
        code = main([
            "train", "--config", str(bad), "--data", str(root / "prep"),
            "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        assert "error[data]" in capsys.readouterr().err

    def test_missing_file_categorized(self, tmp_path, capsys):
        code = main([
            "evaluate", "--model", str(tmp_path / "nope"), "--split", "test",
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "error[" in capsys.readouterr().err
