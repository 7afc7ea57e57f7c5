"""Transcript encoder: stacked sparse self-attention plus a 3-class head.

Layout per stacked layer i (width w_i = embed_dim / 2^(i-1)):

    x -> Q,K,V projections -> per-head probsparse attention
      -> head concat -> projection to w_i/2 (feature halving)
      -> 1-D conv (width 3, same padding) -> parametric ReLU
      -> stride-2 sequence max-pool (length halving)

Only the queries whose sparsity score (max minus mean of the scaled key dot
products) ranks in the top ``top_queries`` get a full softmax attention row;
every other valid query falls back to the mean of the valid value rows, which
keeps gradients alive.  Padding rows stay exactly zero and masked through all
layers: they never win attention weight or a pooling argmax, so appending or
permuting padding never changes the output.

The final representation is the mean over surviving valid positions, fed to a
softmax classification layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"MTCA"
CHECKPOINT_VERSION = 1

_MASK_BIAS = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 512
    max_sentences: int = 500
    num_heads: int = 8
    top_queries: int = 10
    num_classes: int = 3
    dropout: float = 0.2
    stacked_layers: int = 2

    def validate(self) -> "EncoderConfig":
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by the head count")
        if self.embed_dim % (2 ** (self.stacked_layers - 1)):
            raise ValueError("embed_dim must be divisible by 2^(stacked_layers-1)")
        for i in range(1, self.stacked_layers + 1):
            if self.layer_width(i) % self.num_heads:
                raise ValueError(f"layer {i} width not divisible by the head count")
        if not 0 < self.top_queries <= self.max_sentences:
            raise ValueError("top_queries must be in [1, max_sentences]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    def layer_width(self, i: int) -> int:
        """Feature width entering stacked layer i (1-based)."""
        return self.embed_dim // (2 ** (i - 1))

    @property
    def output_width(self) -> int:
        return self.embed_dim // (2 ** self.stacked_layers)


@dataclass
class EncodedTranscript:
    """Padded (max_sentences, embed_dim) matrix plus row-validity mask."""

    matrix: np.ndarray
    mask: np.ndarray

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())


def position_pair(pos: int, f: int, d: int) -> tuple[float, float]:
    """(sin, cos) components for position ``pos`` at frequency index ``f``."""
    if pos < 0 or not 0 <= f < d:
        raise IndexError(f"position_pair: pos={pos}, f={f}, d={d}")
    angle = pos / (10000.0 ** (2.0 * f / d))
    return float(np.sin(angle)), float(np.cos(angle))


def position_encoding(pos: int, d: int) -> np.ndarray:
    """Full sinusoidal position vector of width d (d even)."""
    out = np.empty(d, dtype=np.float64)
    f = np.arange(d // 2, dtype=np.float64)
    angles = pos / (10000.0 ** (2.0 * f / d))
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def position_matrix(length: int, d: int) -> np.ndarray:
    return np.stack([position_encoding(p, d) for p in range(length)])


def build_encoded(sentence_vectors: np.ndarray, cfg: EncoderConfig) -> EncodedTranscript:
    """Adds position encodings and pads to max_sentences."""
    vecs = np.asarray(sentence_vectors, dtype=np.float64)
    n = vecs.shape[0]
    if n == 0:
        raise T.DimensionError("transcript with zero sentences")
    if n > cfg.max_sentences:
        raise T.DimensionError(f"{n} sentences exceeds max_sentences={cfg.max_sentences}")
    if vecs.shape[1] != cfg.embed_dim:
        raise T.DimensionError(
            f"embedding width {vecs.shape[1]} != embed_dim {cfg.embed_dim}"
        )
    matrix = np.zeros((cfg.max_sentences, cfg.embed_dim), dtype=np.float64)
    matrix[:n] = vecs + position_matrix(n, cfg.embed_dim)
    mask = np.zeros(cfg.max_sentences, dtype=np.uint8)
    mask[:n] = 1
    return EncodedTranscript(matrix=matrix, mask=mask)


def sparsity_score(q: np.ndarray, keys: np.ndarray, scale: float) -> float:
    """Max-minus-mean of the scaled query/key dot products (>= 0)."""
    if keys.shape[0] == 0:
        raise T.DimensionError("sparsity_score: empty key set")
    dots = (keys @ np.asarray(q, dtype=np.float64)) / scale
    return float(dots.max() - dots.mean())


def select_top_queries(
    q_data: np.ndarray, k_data: np.ndarray, mask: np.ndarray, top_queries: int, scale: float
) -> np.ndarray:
    """Indices (ascending) of the valid queries with the highest sparsity score.

    Ties break toward the lower row index.  Selection looks at values only;
    gradients never flow through it.
    """
    valid = np.flatnonzero(mask)
    logits = (q_data[valid] @ k_data[valid].T) / scale
    scores = logits.max(axis=1) - logits.mean(axis=1)
    take = min(top_queries, valid.size)
    order = np.lexsort((valid, -scores))[:take]
    return np.sort(valid[order])


def probsparse_attention(
    q: T.Tensor,
    k: T.Tensor,
    v: T.Tensor,
    top_queries: int,
    mask: np.ndarray,
    scale: float | None = None,
) -> T.Tensor:
    """Sparse attention: full softmax rows for the top queries, value-mean fallback."""
    mask = np.asarray(mask, dtype=np.uint8)
    if not mask.any():
        raise T.DimensionError("probsparse_attention: all positions masked")
    length, head_dim = q.data.shape
    if scale is None:
        scale = float(np.sqrt(head_dim))

    top_idx = select_top_queries(q.data, k.data, mask, top_queries, scale)
    in_top = np.zeros(length, dtype=bool)
    in_top[top_idx] = True
    fallback_idx = np.flatnonzero((mask > 0) & ~in_top)

    key_bias = np.where(mask > 0, 0.0, _MASK_BIAS)
    logits = T.scale(T.matmul(T.gather_rows(q, top_idx), T.transpose(k)), 1.0 / scale)
    logits = T.add(logits, T.constant(np.tile(key_bias, (top_idx.size, 1))))
    attended = T.matmul(T.softmax(logits, axis=1), v)
    fallback = T.mean_valid_rows(v, mask)
    return T.assemble_rows(length, attended, top_idx, fallback, fallback_idx)


@dataclass
class _LayerParams:
    w_query: T.Tensor
    w_key: T.Tensor
    w_value: T.Tensor
    w_heads: T.Tensor
    conv_w: T.Tensor
    conv_b: T.Tensor
    pelu_slope: T.Tensor


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


class Encoder:
    """Holds the parameters and runs forward passes.

    Instances are immutable during inference and may be shared across
    read-only scoring workers; training mutates parameters single-writer.
    """

    CONV_WIDTH = 3

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        d = cfg.embed_dim

        self._params: dict[str, T.Tensor] = {}
        self._add("w_inp", _glorot(rng, (d, d), d, d))
        self._add("b_inp", np.zeros(d))
        self.layers: list[_LayerParams] = []
        for i in range(1, cfg.stacked_layers + 1):
            w = cfg.layer_width(i)
            half = w // 2
            kw = self.CONV_WIDTH
            layer = _LayerParams(
                w_query=self._add(f"sp{i}.w_query", _glorot(rng, (w, w), w, w)),
                w_key=self._add(f"sp{i}.w_key", _glorot(rng, (w, w), w, w)),
                w_value=self._add(f"sp{i}.w_value", _glorot(rng, (w, w), w, w)),
                w_heads=self._add(f"sp{i}.w_heads", _glorot(rng, (w, half), w, half)),
                conv_w=self._add(
                    f"sp{i}.conv_w", _glorot(rng, (kw, half, half), kw * half, kw * half)
                ),
                conv_b=self._add(f"sp{i}.conv_b", np.zeros(half)),
                pelu_slope=self._add(f"sp{i}.pelu_slope", 0.25),
            )
            self.layers.append(layer)
        out_w = cfg.output_width
        self._add("w_pred", _glorot(rng, (out_w, cfg.num_classes), out_w, cfg.num_classes))
        self._add("b_pred", np.zeros(cfg.num_classes))

    def _add(self, name: str, data) -> T.Tensor:
        t = T.param(np.asarray(data, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict[str, T.Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def flat_vector(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self._params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters():
            raise T.DimensionError(
                f"parameter vector has {vec.size} entries, model needs {self.num_parameters()}"
            )
        offset = 0
        for p in self._params.values():
            n = p.data.size
            p.data = vec[offset : offset + n].reshape(p.data.shape).copy()
            offset += n

    def tracked_names(self, scope: str) -> list[str]:
        """Parameter subset used for influence gradients.

        ``last``: the classification layer plus the final head projection.
        ``all``: everything (small models only).
        """
        if scope == "all":
            return list(self._params)
        if scope == "last":
            final = self.cfg.stacked_layers
            return [f"sp{final}.w_heads", "w_pred", "b_pred"]
        raise ValueError(f"unknown gradient scope {scope!r}")

    def grad_vector(self, scope: str = "last") -> np.ndarray:
        parts = []
        for name in self.tracked_names(scope):
            g = self._params[name].grad
            parts.append(
                g.reshape(-1) if g is not None else np.zeros(self._params[name].data.size)
            )
        return np.concatenate(parts)

    # -- forward -----------------------------------------------------------

    def _sp_layer(
        self,
        x: T.Tensor,
        mask: np.ndarray,
        layer: _LayerParams,
        train: bool,
        rng: np.random.Generator | None,
    ) -> tuple[T.Tensor, np.ndarray]:
        cfg = self.cfg
        width = x.data.shape[1]
        head_dim = width // cfg.num_heads
        scale = float(np.sqrt(head_dim))

        q = T.matmul(x, layer.w_query)
        k = T.matmul(x, layer.w_key)
        v = T.matmul(x, layer.w_value)
        heads = []
        for h in range(cfg.num_heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            heads.append(
                probsparse_attention(
                    T.slice_cols(q, lo, hi),
                    T.slice_cols(k, lo, hi),
                    T.slice_cols(v, lo, hi),
                    cfg.top_queries,
                    mask,
                    scale=scale,
                )
            )
        merged = T.matmul(T.concat_cols(heads), layer.w_heads)
        conv = T.add(T.conv1d(merged, layer.conv_w), layer.conv_b)
        act = T.pelu(conv, layer.pelu_slope)
        pooled, pooled_mask = T.maxpool2(act, mask)
        pooled = T.zero_rows(pooled, pooled_mask)
        if train and cfg.dropout > 0:
            pooled = T.dropout(pooled, cfg.dropout, rng)
        return pooled, pooled_mask

    def encode(
        self,
        t: EncodedTranscript,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Pooled transcript representation (mean over surviving positions)."""
        if train and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training forward pass needs an rng for dropout")
        mask = np.asarray(t.mask, dtype=np.uint8)
        x = T.add(T.matmul(T.constant(t.matrix), self._params["w_inp"]), self._params["b_inp"])
        x = T.zero_rows(x, mask)
        if train and self.cfg.dropout > 0:
            x = T.dropout(x, self.cfg.dropout, rng)
        for layer in self.layers:
            x, mask = self._sp_layer(x, mask, layer, train, rng)
        return T.mean_valid_rows(x, mask)

    def forward(
        self,
        t: EncodedTranscript,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Class probability vector (downward, steady, upward)."""
        pooled = self.encode(t, train=train, rng=rng)
        logits = T.add(T.matmul(pooled, self._params["w_pred"]), self._params["b_pred"])
        return T.softmax(logits, axis=-1)

    def predict_probs(self, t: EncodedTranscript) -> np.ndarray:
        return self.forward(t, train=False).data

    def predict_label(self, t: EncodedTranscript) -> int:
        return int(np.argmax(self.predict_probs(t)))

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self._write(fh)

    def _write(self, fh: BinaryIO) -> None:
        cfg = self.cfg
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<5I",
                CHECKPOINT_VERSION,
                cfg.embed_dim,
                cfg.max_sentences,
                cfg.num_heads,
                cfg.top_queries,
            )
        )
        fh.write(struct.pack("<I", len(self._params)))
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, dropout: float = 0.2) -> "Encoder":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {blob[:4]!r})")
        version, d, max_s, heads, top_q = struct.unpack_from("<5I", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = EncoderConfig(
            embed_dim=d,
            max_sentences=max_s,
            num_heads=heads,
            top_queries=top_q,
            dropout=dropout,
        )
        enc = cls(cfg, rng=np.random.default_rng(0))
        offset = 4 + 20
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if count != len(enc._params):
            raise ValueError("checkpoint parameter count mismatch")
        for expected_name, p in enc._params.items():
            (nlen,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + nlen].decode("utf-8")
            offset += nlen
            if name != expected_name:
                raise ValueError(f"checkpoint order mismatch: {name} != {expected_name}")
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
            offset += 4 * ndim
            if tuple(shape) != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            n = int(np.prod(shape)) if shape else 1
            p.data = (
                np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
                .reshape(p.data.shape)
                .astype(np.float64)
            )
            offset += 8 * n
        return enc

    def clone(self) -> "Encoder":
        twin = Encoder(self.cfg, rng=np.random.default_rng(0))
        twin.load_flat(self.flat_vector())
        return twin
