"""Acceptance suite: every release criterion at its stated tolerance.

Each test prints one PASS line so the suite doubles as a checklist
(run with `pytest tests/test_acceptance.py -v -s`).  The synthetic
end-to-end criteria run the real pipeline three times, so this module
takes several minutes; everything else is seconds.
"""

import json
import shutil
import subprocess
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mtca import tensor as T
from mtca.counterfactual import (
    Checkpoint,
    CheckpointTrace,
    EncoderGradModel,
    exact_influence,
    pc,
    tracin_plus,
)
from mtca.data import (
    SyntheticSpec,
    read_ground_truth,
    synth_generate,
    write_embedding_file,
    write_ground_truth,
    write_source_sentences,
    write_transcripts,
)
from mtca.encoder import Encoder, EncoderConfig, build_encoded, probsparse_attention, select_top_queries
from mtca.evaluation import random_baseline, ticker_following_baseline
from mtca.losses import UNIFORM_TARGET, cross_entropy, one_hot
from mtca.pipeline import PreparedDataset, prepare_dataset, run_pipeline
from mtca.topics import TopicSet, write_topic_file
from mtca.training import TrainConfig, kl_regularized_loss
from conftest import central_difference
from toy_models import LogisticModel, gaussian_elimination_solve, spearman_rho


def _report(name: str, detail: str):
    print(f"PASS {name}: {detail}")


# ---------------------------------------------------------------------------
# gradient correctness


class TestGradientCorrectness:
    def test_every_parameter_matches_finite_differences(self):
        """6-sentence, 16-dim, 2-head toy config; 1e-4 relative; < 60 s."""
        start = time.time()
        cfg = EncoderConfig(
            embed_dim=16, max_sentences=6, num_heads=2, top_queries=3, dropout=0.0
        )
        enc = Encoder(cfg, np.random.default_rng(42))
        vecs = np.random.default_rng(7).uniform(-1, 1, (6, 16))
        t = build_encoded(vecs, cfg)
        target = 2

        with T.Tape() as tape:
            probs = enc.forward(t)
            loss = cross_entropy(probs, one_hot(target))
        tape.backward(loss)

        checked = 0
        for name, p in enc.parameters().items():
            base = p.data.copy()

            def scalar(value, p=p, base=base):
                p.data = value.reshape(base.shape)
                out = -np.log(max(enc.predict_probs(t)[target], 1e-300))
                p.data = base
                return out

            fd = central_difference(scalar, base.copy().reshape(-1)).reshape(base.shape)
            np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-8, err_msg=name)
            checked += p.data.size
        elapsed = time.time() - start
        assert elapsed < 60
        _report("gradient-correctness", f"{checked} parameters within 1e-4 in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# attention equivalence


class TestAttentionEquivalence:
    def test_full_sparse_equals_dense_and_selection_matches_brute_force(self):
        """100 random instances, L <= 32: dense parity 1e-10, exact top sets."""
        rng = np.random.default_rng(99)
        for trial in range(100):
            length = int(rng.integers(2, 33))
            head_dim = int(rng.integers(2, 9))
            q, k, v = (rng.normal(size=(length, head_dim)) for _ in range(3))
            mask = np.ones(length)
            scale = float(np.sqrt(head_dim))

            dense = np.zeros((length, head_dim))
            for row in range(length):
                logits = np.array([q[row] @ k[j] / scale for j in range(length)])
                logits -= logits.max()
                w = np.exp(logits)
                dense[row] = (w / w.sum()) @ v
            out = probsparse_attention(
                T.constant(q), T.constant(k), T.constant(v), length, mask, scale=scale
            )
            np.testing.assert_allclose(out.data, dense, atol=1e-10)

            n_top = int(rng.integers(1, length + 1))
            scored = []
            for row in range(length):
                dots = [q[row] @ k[j] / scale for j in range(length)]
                scored.append((-(max(dots) - sum(dots) / length), row))
            scored.sort()
            expected = np.sort([row for _, row in scored[:n_top]])
            got = select_top_queries(q, k, mask, n_top, scale)
            np.testing.assert_array_equal(got, expected)
        _report("attention-equivalence", "100 instances: dense parity and exact selection")


# ---------------------------------------------------------------------------
# influence identities


class TestInfluenceIdentities:
    def test_self_perturbation_scores_zero(self):
        model = LogisticModel(dim=3)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(10, 3))
        y = (X[:, 0] > 0).astype(int)
        theta, ckpts = model.sgd_fit(X, y, epochs=9, checkpoint_every=3)
        trace = CheckpointTrace([Checkpoint(s, p, lr) for s, p, lr in ckpts])
        score = tracin_plus(model, trace, X[0], X[0])
        assert score == 0.0
        _report("tracin-identity-self", "score(E, E) == 0 exactly")

    def test_hand_computed_example(self):
        class Stub:
            def predict_label(self, theta, x):
                return 0

            def loss(self, theta, x, label):
                return 0.0

            def loss_grad(self, theta, x, label):
                return np.array([3.0, 0.0]) if x == "orig" else np.array([1.0, 0.0])

        trace = CheckpointTrace([Checkpoint(1, np.zeros(2), 0.1)])
        score = tracin_plus(Stub(), trace, "orig", "pert")
        assert score == 2.0
        _report("tracin-identity-hand", "gradients (1,0) vs (3,0) -> score 2 exactly")


# ---------------------------------------------------------------------------
# influence oracle correlation


class TestInfluenceOracle:
    def test_rankings_correlate_with_retraining(self):
        """<= 30-parameter logistic model; Spearman rho >= 0.6; < 5 min."""
        start = time.time()
        dim = 4  # 3 * (4 + 1) = 15 parameters
        model = LogisticModel(dim=dim, num_classes=3)
        rng = np.random.default_rng(11)
        X = rng.normal(size=(60, dim))
        y = np.array([int(x[0] > 0) + int(x[1] > 0) for x in X])
        theta, ckpts = model.sgd_fit(X, y, lr=0.8, epochs=30, seed=4, checkpoint_every=10)
        trace = CheckpointTrace([Checkpoint(s, p, lr) for s, p, lr in ckpts])

        orig = X[0]
        perturbations = [orig + rng.normal(scale=0.8, size=dim) for _ in range(20)]
        scores = [tracin_plus(model, trace, orig, pert) for pert in perturbations]

        # oracle: from every checkpoint, take one leave-one-in gradient step
        # on the perturbed instance and measure the pc change it causes
        eta = 1e-3
        oracle = []
        for pert in perturbations:
            delta = 0.0
            for ck in trace:
                label = model.predict_label(ck.params, orig)
                stepped = ck.params - eta * model.loss_grad(ck.params, pert, label)
                delta += pc(model, stepped, orig, pert, label=label) - pc(
                    model, ck.params, orig, pert, label=label
                )
            oracle.append(delta / eta)
        rho = spearman_rho(scores, oracle)
        assert rho >= 0.6
        elapsed = time.time() - start
        assert elapsed < 300
        _report("influence-oracle", f"Spearman rho {rho:.3f} >= 0.6 in {elapsed:.1f}s")

    def test_exact_influence_matches_independent_solve(self):
        model = LogisticModel(dim=3, num_classes=3)  # 12 parameters
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 3))
        y = np.array([int(x[0] > 0) + int(x[1] > 0) for x in X])
        theta, _ = model.sgd_fit(X, y, lr=0.8, epochs=25, seed=2, checkpoint_every=25)
        train = list(zip(X, y))
        damping = 1e-3

        got = exact_influence(model, theta, X[0], X[3], train, damping=damping)

        H = np.mean([model.hessian(theta, x) for x, _ in train], axis=0)
        label = model.predict_label(theta, X[0])
        g = model.loss_grad(theta, X[0], label) - model.loss_grad(theta, X[3], label)
        expected = gaussian_elimination_solve(H + damping * np.eye(theta.size), g)
        np.testing.assert_allclose(got, expected, atol=1e-6)
        _report("influence-exact", "damped solve matches hand-rolled elimination within 1e-6")


# ---------------------------------------------------------------------------
# KL regularization


class TestKlRegularization:
    def test_dropout_zero_kl_exactly_zero(self):
        cfg = EncoderConfig(embed_dim=16, max_sentences=6, num_heads=2, top_queries=3, dropout=0.0)
        enc = Encoder(cfg, np.random.default_rng(1))
        t = build_encoded(np.random.default_rng(2).normal(size=(5, 16)), cfg)
        loss, _ = kl_regularized_loss(enc, t, one_hot(1), alpha=0.7, rng=None)
        base = cross_entropy(enc.forward(t), one_hot(1))
        assert float(loss.data) == float(base.data)
        _report("kl-dropout-zero", "identical passes give a zero KL term")

    def test_alpha_zero_reduces_bitwise(self):
        cfg = EncoderConfig(embed_dim=16, max_sentences=6, num_heads=2, top_queries=3, dropout=0.3)
        enc = Encoder(cfg, np.random.default_rng(1))
        t = build_encoded(np.random.default_rng(2).normal(size=(5, 16)), cfg)
        loss, _ = kl_regularized_loss(enc, t, one_hot(0), alpha=0.0, rng=np.random.default_rng(9))
        plain = cross_entropy(
            enc.forward(t, train=True, rng=np.random.default_rng(9)), one_hot(0)
        )
        assert float(loss.data).hex() == float(plain.data).hex()
        _report("kl-alpha-zero", "alpha=0 loss is bitwise the plain cross-entropy")

    def test_uniform_cross_entropy_is_ln3(self):
        loss = cross_entropy(T.constant(UNIFORM_TARGET.copy()), UNIFORM_TARGET)
        assert abs(float(loss.data) - np.log(3.0)) <= 1e-12
        _report("kl-uniform-ln3", f"uniform CE = {float(loss.data):.15f}")


# ---------------------------------------------------------------------------
# synthetic end-to-end + explanations + determinism (shared fixture)

ACCEPT_SPEC = SyntheticSpec(
    num_transcripts=600,
    sentences_per_transcript=20,
    label_noise=0.1,
    embed_dim=32,
    news_per_topic=120,
    filler_sentence_pool=60,
    contamination_rate=0.55,
    embedding_scale=3.0,
)

ACCEPT_ENC = EncoderConfig(
    embed_dim=32, max_sentences=20, num_heads=2, top_queries=8, dropout=0.2
)

ACCEPT_TRAIN = TrainConfig(
    lr=0.005, batch_size=32, weight_decay=0.01, kl_alpha=0.3, rounds=2,
    epochs_per_round=16, checkpoint_every=8, candidates_per_sentence=10,
    explain_bottom=15, explain_candidates=40,
)

SEEDS = (0, 1, 2)


def _materialize(spec: SyntheticSpec, root: Path, prep_seed: int) -> PreparedDataset:
    raw = root / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    corpus = synth_generate(spec)
    write_transcripts(raw / "transcripts.jsonl", corpus.transcripts)
    write_source_sentences(raw / "news.jsonl", corpus.news)
    write_ground_truth(raw / "truth.jsonl", corpus.ground_truth)
    write_embedding_file(raw / "embeddings.memb", corpus.embed_dim, "hash-v1", corpus.embeddings)
    write_topic_file(raw / "topics.tsv", TopicSet(corpus.topic_names, corpus.topic_terms))
    prepare_dataset(
        raw / "transcripts.jsonl", raw / "embeddings.memb", raw / "topics.tsv",
        root / "prep", source_path=raw / "news.jsonl",
        max_sentences=spec.sentences_per_transcript,
        distant_top=120, head_epochs=800, head_lr=1.0, seed=prep_seed,
    )
    return PreparedDataset.load(root / "prep")


@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    """One 2-round pipeline per seed.

    Training is deterministic for a fixed seed, so the 1-round ablation's
    test accuracy equals the round-1 test metric of the same run (asserted
    separately by the resume/determinism tests); a single run therefore
    yields both arms of the comparison.
    """
    base = tmp_path_factory.mktemp("accept")
    runs = []
    start = time.time()
    for seed in SEEDS:
        root = base / f"seed{seed}"
        dataset = _materialize(replace(ACCEPT_SPEC, seed=7 + seed), root, prep_seed=seed)
        cfg = replace(ACCEPT_TRAIN, seed=seed)
        result = run_pipeline(dataset, ACCEPT_ENC, cfg, root / "model")
        truth = read_ground_truth(root / "raw" / "truth.jsonl")
        runs.append((seed, dataset, result, truth))
    return runs, time.time() - start


class TestSyntheticEndToEnd:
    def test_augmented_round_beats_supervised_ablation(self, synthetic_runs):
        """>= 2 absolute points averaged over 3 seeds; < 15 min."""
        runs, elapsed = synthetic_runs
        gains = []
        for seed, dataset, result, _ in runs:
            by_round = {
                m["round"]: m["accuracy"]
                for m in result.metrics
                if m["split"] == "test"
            }
            gains.append(by_round[2] - by_round[1])
        mean_gain = float(np.mean(gains))
        assert mean_gain >= 0.02
        assert elapsed < 900
        _report(
            "synthetic-end-to-end",
            f"gains {['%+.3f' % g for g in gains]}, mean {mean_gain:+.4f} in {elapsed:.0f}s",
        )

    def test_explanations_localize_decisive_sentence(self, synthetic_runs):
        """top-1 explanation hits the planted sentence for >= 80% of the
        correctly-classified test transcripts (pooled over the seeds)."""
        runs, _ = synthetic_runs
        localized = correct = 0
        for seed, dataset, result, truth in runs:
            decisive = {tid: idx for tid, idx, _ in truth}
            reports = {rep.transcript_id: rep for rep in result.explanations}
            for record in dataset.split_records("test"):
                pred = result.encoder.predict_label(dataset.encode(record, ACCEPT_ENC))
                if pred != record.label:
                    continue
                correct += 1
                rep = reports.get(record.id)
                if rep and rep.entries and rep.entries[0].sentence_index == decisive[record.id]:
                    localized += 1
        rate = localized / correct
        assert rate >= 0.80
        _report("explanation-localization", f"{localized}/{correct} = {rate:.3f} >= 0.80")


class TestBaselines:
    def test_random_baseline_near_third(self):
        labels = np.repeat([0, 1, 2], 10000)
        acc = random_baseline(labels, np.random.default_rng(123))
        assert abs(acc - 1 / 3) <= 0.01
        _report("baseline-random", f"accuracy {acc:.4f} within 0.333 +/- 0.01")

    def test_ticker_following_extremes(self):
        assert ticker_following_baseline({"A": [1] * 10}) == 1.0
        assert ticker_following_baseline({"A": [0, 1] * 5}) == 0.0
        _report("baseline-ticker-following", "constant -> 1.0, alternating -> 0.0")


class TestDeterminism:
    def test_pipeline_repetition_is_byte_identical(self, tmp_path):
        """Identical seeds give identical checkpoints, records and metrics."""
        spec = replace(ACCEPT_SPEC, num_transcripts=60, sentences_per_transcript=8,
                       news_per_topic=20, seed=31, embed_dim=16)
        enc_cfg = EncoderConfig(embed_dim=16, max_sentences=8, num_heads=2,
                                top_queries=4, dropout=0.2)
        cfg = replace(ACCEPT_TRAIN, epochs_per_round=3, checkpoint_every=2,
                      candidates_per_sentence=4, explain_candidates=6,
                      explain_bottom=3, seed=5, batch_size=8)
        out = []
        for tag in ("a", "b"):
            root = tmp_path / tag
            dataset = _materialize(spec, root, prep_seed=5)
            run_pipeline(dataset, enc_cfg, cfg, root / "model")
            out.append(root / "model")
        compared = []
        for rel in ("model.mtca", "records.jsonl", "metrics.jsonl", "explanations.jsonl",
                    "rounds/round1/model.mtca", "rounds/round2/model.mtca",
                    "rounds/round1/trace/checkpoint_00002.mtca"):
            a = (out[0] / rel).read_bytes()
            b = (out[1] / rel).read_bytes()
            assert a == b, rel
            compared.append(rel)
        _report("determinism", f"{len(compared)} artifacts byte-identical across reruns")


# ---------------------------------------------------------------------------
# secondary: exporter round-trip + topic-label agreement


EXPORTER = Path(__file__).resolve().parents[1] / "exporter"


def _node_available() -> bool:
    if not (EXPORTER / "dist" / "cli.js").exists():
        return False
    return shutil.which("node") is not None


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    root = tmp_path_factory.mktemp("secondary")
    spec = replace(ACCEPT_SPEC, num_transcripts=120, sentences_per_transcript=8,
                   news_per_topic=40, seed=13, embedding_scale=1.0)
    dataset = _materialize(spec, root, prep_seed=3)
    emb_out = root / "exported.memb"
    run = subprocess.run(
        [
            "node", str(EXPORTER / "dist" / "cli.js"), "export-embeddings",
            "--in", str(root / "raw" / "transcripts.jsonl"),
            "--source", str(root / "raw" / "news.jsonl"),
            "--out", str(emb_out),
            "--encoder", "hash-v1",
            "--dim", str(spec.embed_dim),
            "--seed", str(spec.seed),
        ],
        capture_output=True, text=True,
    )
    assert run.returncode == 0, run.stderr
    labels_out = root / "exported_labels.tsv"
    run = subprocess.run(
        [
            "node", str(EXPORTER / "dist" / "cli.js"), "export-topic-labels",
            "--samples", str(root / "prep" / "distant_samples.tsv"),
            "--embeddings", str(emb_out),
            "--out", str(labels_out),
            "--seed", "1",
        ],
        capture_output=True, text=True,
    )
    assert run.returncode == 0, run.stderr
    return root, dataset, emb_out, labels_out, spec


@pytest.mark.skipif(not _node_available(), reason="exporter not built (secondary component)")
class TestSecondaryExporter:
    def test_exported_file_parses_bit_exactly(self, exported):
        from mtca.data import read_embedding_file, hash_embed

        root, dataset, emb_out, _, spec = exported
        loaded = read_embedding_file(emb_out)
        assert loaded.dim == spec.embed_dim
        assert loaded.encoder_name == "hash-v1"
        needed = [sid for r in dataset.records for sid in r.sentence_ids()]
        assert loaded.missing_ids(needed) == []
        # spot-check rows against the reference embedder, bit for bit
        for record in dataset.records[:10]:
            for idx, sentence in enumerate(record.sentences):
                expected = hash_embed(sentence, spec.embed_dim, spec.seed).astype(np.float32)
                got = loaded.vectors[record.sentence_id(idx)]
                assert got.tobytes() == expected.tobytes()
        _report("secondary-roundtrip", f"{len(loaded.vectors)} exported rows parse bit-exactly")

    def test_topic_label_agreement(self, exported):
        from mtca.topics import read_assignments

        root, dataset, _, labels_out, spec = exported
        theirs = {sid: topic for sid, topic, _ in read_assignments(labels_out)}
        ours = {sid: topic for sid, (topic, _) in dataset.assignments.items()}
        shared = sorted(set(theirs) & set(ours))
        assert shared
        agree = sum(theirs[sid] == ours[sid] for sid in shared) / len(shared)
        assert agree >= 0.70
        _report("secondary-agreement", f"{agree:.3f} >= 0.70 on {len(shared)} sentences")
