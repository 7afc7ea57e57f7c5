"""Supervised training machinery: loss assembly, AdamW, one training round.

The round loop is deliberately deterministic: shuffling, dropout and
checkpoint schedules all flow from generators the caller seeds, samples are
processed in batch order, and gradients reduce in sample order.  Two runs
from the same seed produce bit-identical parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .counterfactual import Checkpoint, CheckpointTrace
from .encoder import EncodedTranscript, Encoder, EncoderConfig
from .losses import cross_entropy, kl_divergence

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went NaN/Inf; the round is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 64
    weight_decay: float = 0.01
    kl_alpha: float = 0.3
    rounds: int = 2
    epochs_per_round: int = 40
    seed: int = 0
    checkpoint_every: int = 5
    base_loss_pass: str = "first"  # which dropout pass feeds the base CE: first | mean
    early_stop: bool = False
    # augmentation stage
    candidates_per_sentence: int = 10000
    top_positive: int = 1
    bottom_negative: int = 1
    gradient_scope: str = "last"
    include_no_topic: bool = False
    # label source for positive augmentations: the encoder's prediction on
    # the perturbed instance, or on the original transcript (less label noise)
    positive_target: str = "perturbed"
    explain_bottom: int = 5
    explain_candidates: int = 0  # 0 = reuse candidates_per_sentence
    threads: int = 0  # 0 = honor MTCA_THREADS / cpu count

    def validate(self) -> "TrainConfig":
        numeric_positive = {
            "lr": self.lr, "batch_size": self.batch_size,
            "epochs_per_round": self.epochs_per_round, "rounds": self.rounds,
            "checkpoint_every": self.checkpoint_every,
        }
        for name, value in numeric_positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.weight_decay < 0 or self.kl_alpha < 0:
            raise ValueError("weight_decay and kl_alpha must be nonnegative")
        if self.base_loss_pass not in ("first", "mean"):
            raise ValueError("base_loss_pass must be 'first' or 'mean'")
        if self.gradient_scope not in ("last", "all"):
            raise ValueError("gradient_scope must be 'last' or 'all'")
        if self.positive_target not in ("perturbed", "original"):
            raise ValueError("positive_target must be 'perturbed' or 'original'")
        return self


# ---------------------------------------------------------------------------
# config file (key = value lines)


def write_config(path, enc_cfg: EncoderConfig, train_cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cfg in (enc_cfg, train_cfg):
            for f in fields(cfg):
                fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


def read_config(path) -> tuple[EncoderConfig, TrainConfig]:
    enc_fields = {f.name: f.type for f in fields(EncoderConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    enc_kwargs: dict = {}
    train_kwargs: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in enc_fields:
                target, kind = enc_kwargs, enc_fields[key]
            elif key in train_fields:
                target, kind = train_kwargs, train_fields[key]
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            target[key] = _parse_value(raw, kind, key, f"{path}:{lineno}")
    return EncoderConfig(**enc_kwargs).validate(), TrainConfig(**train_kwargs).validate()


def _parse_value(raw: str, kind: str, key: str, where: str):
    kind = str(kind)
    try:
        if "bool" in kind:
            if raw not in ("True", "False", "true", "false"):
                raise ValueError
            return raw in ("True", "true")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{where}: bad value {raw!r} for {key}") from None


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive-moment update with decoupled weight decay.

    betas (0.9, 0.999), eps 1e-8; bias correction applied; the decay term is
    lr * weight_decay * param, separate from the adaptive step.
    """

    def __init__(
        self,
        params: dict[str, T.Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """One update from explicit grads or the tensors' .grad fields."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if grads is not None:
                g = grads.get(name)
            else:
                g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64).reshape(p.data.shape)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            update += self.lr * self.weight_decay * p.data
            if not np.all(np.isfinite(update)):
                raise TrainingDiverged(f"non-finite optimizer update for {name}")
            p.data = p.data - update


# ---------------------------------------------------------------------------
# losses over the encoder


def kl_regularized_loss(
    encoder: Encoder,
    encoded: EncodedTranscript,
    target: np.ndarray,
    alpha: float,
    rng: np.random.Generator | None,
    base_loss_pass: str = "first",
) -> tuple[T.Tensor, np.ndarray]:
    """Cross-entropy plus symmetric KL between two dropout passes.

    With alpha == 0 (or dropout disabled) this is exactly the plain
    cross-entropy of the first pass.  Returns (loss, first-pass probs).
    """
    train = encoder.cfg.dropout > 0
    p1 = encoder.forward(encoded, train=train, rng=rng)
    base = cross_entropy(p1, target)
    if alpha == 0.0:
        return base, p1.data
    p2 = encoder.forward(encoded, train=train, rng=rng)
    if base_loss_pass == "mean":
        base = T.scale(T.add(base, cross_entropy(p2, target)), 0.5)
    kl_sym = T.add(kl_divergence(p1, p2), kl_divergence(p2, p1))
    return T.add(base, T.scale(kl_sym, alpha / 2.0)), p1.data


# ---------------------------------------------------------------------------
# training pool


@dataclass
class TrainingExample:
    key: str
    encoded: EncodedTranscript
    target: np.ndarray
    kind: str  # original | positive | negative


@dataclass
class TrainingPool:
    """Originals plus augmentation records accumulated across rounds."""

    originals: list[TrainingExample] = field(default_factory=list)
    positives: list[TrainingExample] = field(default_factory=list)
    negatives: list[TrainingExample] = field(default_factory=list)
    round_index: int = 1

    def add(self, example: TrainingExample) -> None:
        bucket = {
            "original": self.originals,
            "positive": self.positives,
            "negative": self.negatives,
        }[example.kind]
        if any(e.key == example.key for e in bucket):
            raise ValueError(f"duplicate training example {example.key!r}")
        if example.kind == "negative" and np.max(example.target) == 1.0:
            raise ValueError("negative examples never carry one-hot targets")
        bucket.append(example)

    def examples_for_round(self, round_index: int) -> list[TrainingExample]:
        if round_index <= 1:
            return list(self.originals)
        return list(self.originals) + list(self.positives) + list(self.negatives)

    def __len__(self) -> int:
        return len(self.originals) + len(self.positives) + len(self.negatives)


# ---------------------------------------------------------------------------
# one round


def train_round(
    encoder: Encoder,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    start_step: int = 0,
    metrics: Callable[[dict], None] | None = None,
    round_index: int = 1,
    epoch_hook: Callable[[int, Encoder], None] | None = None,
) -> CheckpointTrace:
    """Runs epochs_per_round epochs of seeded mini-batch AdamW.

    Saves a parameter snapshot every checkpoint_every epochs plus the final
    epoch, and returns them as the round's checkpoint trace.  The encoder is
    updated in place.
    """
    if not examples:
        raise ValueError("train_round: empty pool")
    cfg.validate()
    optimizer = AdamW(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = CheckpointTrace()
    n = len(examples)
    for epoch in range(1, cfg.epochs_per_round + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        hits = 0
        for lo in range(0, n, cfg.batch_size):
            batch = [examples[i] for i in order[lo : lo + cfg.batch_size]]
            try:
                with T.Tape() as tape:
                    total = None
                    for ex in batch:
                        loss_i, probs = kl_regularized_loss(
                            encoder, ex.encoded, ex.target, cfg.kl_alpha, rng,
                            cfg.base_loss_pass,
                        )
                        hits += int(np.argmax(probs) == np.argmax(ex.target))
                        total = loss_i if total is None else T.add(total, loss_i)
                    batch_loss = T.scale(total, 1.0 / len(batch))
                grads = tape.backward(batch_loss)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            epoch_loss += float(batch_loss.data) * len(batch)
            optimizer.step(
                {name: grads.get(id(p)) for name, p in encoder.parameters().items()}
            )
        if metrics is not None:
            metrics(
                {
                    "round": round_index,
                    "epoch": start_step + epoch,
                    "split": "train",
                    "loss": epoch_loss / n,
                    "accuracy": hits / n,
                }
            )
        if epoch_hook is not None:
            epoch_hook(start_step + epoch, encoder)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs_per_round:
            step = start_step + epoch
            if not trace.checkpoints or trace.checkpoints[-1].step != step:
                trace.append(Checkpoint(step=step, params=encoder.flat_vector(), lr=cfg.lr))
    return trace
