"""Small pre-layer-norm transformer encoder with tied MLM head and CLS classifier.

Everything is built from the ops in :mod:`btlab.numerics`, so a single
``backward`` call differentiates the whole forward pass. Models stay tiny
(layers=2, d=64 by default) so full gradient checks remain affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DEFAULT_DTYPE,
    ModelParameters,
    Tensor,
    add,
    derived_rng,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    swapaxes,
    take_position,
)

# softmax rejects non-finite inputs, so masked positions get a large finite
# negative score instead of -inf; exp underflows to exactly 0 in float32.
MASK_SCORE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_positions: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if min(self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_positions) < 1:
            raise ValueError("all dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.dropout != 0.0:
            raise ValueError("dropout must be 0 at this scale")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def desk_config(vocab_size: int, max_positions: int = 64) -> EncoderConfig:
    return EncoderConfig(layers=2, d_model=64, n_heads=2, d_ff=128,
                         vocab_size=vocab_size, max_positions=max_positions)


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class EncoderModel:
    """Config plus one flat ModelParameters holding every weight.

    Parameter names are fixed by construction order, which both the optimizer
    state and the checkpoint format rely on.
    """

    def __init__(self, config: EncoderConfig, params: ModelParameters):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: EncoderConfig, seed: int) -> "EncoderModel":
        rng = derived_rng(seed, 1)
        p = ModelParameters()
        d, f, V, P = config.d_model, config.d_ff, config.vocab_size, config.max_positions
        p.add("tok_emb", (rng.normal(0.0, 0.02, size=(V, d))).astype(DEFAULT_DTYPE))
        p.add("pos_emb", (rng.normal(0.0, 0.02, size=(P, d))).astype(DEFAULT_DTYPE))
        for i in range(config.layers):
            pre = f"layer{i}"
            p.add(f"{pre}.attn.ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.attn.ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
            for proj in ("wq", "wk", "wv", "wo"):
                p.add(f"{pre}.attn.{proj}", _uniform(rng, d, (d, d)))
                p.add(f"{pre}.attn.b{proj[1]}", np.zeros(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.ff.ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.ff.ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.ff.w1", _uniform(rng, d, (d, f)))
            p.add(f"{pre}.ff.b1", np.zeros(f, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.ff.w2", _uniform(rng, f, (f, d)))
            p.add(f"{pre}.ff.b2", np.zeros(d, dtype=DEFAULT_DTYPE))
        p.add("final_ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
        p.add("final_ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
        p.add("mlm_bias", np.zeros(V, dtype=DEFAULT_DTYPE))
        return cls(config, p)


@dataclass
class ClassifierHead:
    weight: Tensor  # [d, C]
    bias: Tensor    # [C]

    @classmethod
    def build(cls, d_model: int, n_classes: int, seed: int) -> "ClassifierHead":
        rng = derived_rng(seed, 2)
        p = ModelParameters()
        w = p.add("cls_head.weight", _uniform(rng, d_model, (d_model, n_classes)))
        b = p.add("cls_head.bias", np.zeros(n_classes, dtype=DEFAULT_DTYPE))
        head = cls(weight=w, bias=b)
        head._params = p
        return head

    def parameters(self) -> ModelParameters:
        return self._params


def merged_parameters(*collections: ModelParameters) -> ModelParameters:
    """One optimizer-facing view over several parameter sets (tensors shared)."""
    merged = ModelParameters()
    for coll in collections:
        for name, t in coll.items():
            merged.add(name, t)
    return merged


def _attention_block(params: ModelParameters, pre: str, x: Tensor,
                     mask_add: Tensor, config: EncoderConfig,
                     attn_sink: list | None) -> Tensor:
    B, S, d = x.shape
    h, dh = config.n_heads, config.d_head
    xn = layer_norm(x, params[f"{pre}.ln.gain"], params[f"{pre}.ln.bias"])

    def project(w, b):
        t = add(matmul(xn, params[w]), params[b])
        return swapaxes(reshape(t, (B, S, h, dh)), 1, 2)   # [B,h,S,dh]

    q = project(f"{pre}.wq", f"{pre}.bq")
    k = project(f"{pre}.wk", f"{pre}.bk")
    v = project(f"{pre}.wv", f"{pre}.bv")
    scores = scale(matmul(q, swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
    weights = softmax(add(scores, mask_add), axis=-1)
    if attn_sink is not None:
        attn_sink.append(weights.data.copy())
    ctx = reshape(swapaxes(matmul(weights, v), 1, 2), (B, S, d))
    return add(matmul(ctx, params[f"{pre}.wo"]), params[f"{pre}.bo"])


def _feed_forward_block(params: ModelParameters, pre: str, x: Tensor) -> Tensor:
    xn = layer_norm(x, params[f"{pre}.ln.gain"], params[f"{pre}.ln.bias"])
    hidden = gelu(add(matmul(xn, params[f"{pre}.w1"]), params[f"{pre}.b1"]))
    return add(matmul(hidden, params[f"{pre}.w2"]), params[f"{pre}.b2"])


def encode_batch(model: EncoderModel, ids, attention_mask,
                 attn_sink: list | None = None) -> Tensor:
    """Forward pass: [B,S] token ids -> [B,S,d] hidden states.

    ``attention_mask`` is 1 at real positions, 0 at PAD. Padded columns are
    pushed to MASK_SCORE before the softmax, so their attention weight is
    exactly zero and PAD token values cannot leak into real positions.
    Pass a list as ``attn_sink`` to collect per-layer attention weights.
    """
    ids = np.asarray(ids)
    mask = np.asarray(attention_mask)
    cfg = model.config
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ValueError(f"ids {ids.shape} and mask {mask.shape} must be equal 2-d shapes")
    B, S = ids.shape
    if S > cfg.max_positions:
        raise ValueError(f"sequence length {S} exceeds max positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("attention mask entries must be 0 or 1")

    p = model.params
    x = add(embedding(p["tok_emb"], ids), embedding(p["pos_emb"], np.arange(S)))
    mask_add = Tensor(np.where(mask[:, None, None, :] == 1, 0.0, MASK_SCORE)
                      .astype(DEFAULT_DTYPE))
    for i in range(cfg.layers):
        x = add(x, _attention_block(p, f"layer{i}.attn", x, mask_add, cfg, attn_sink))
        x = add(x, _feed_forward_block(p, f"layer{i}.ff", x))
    return layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    """[B,S,d] -> [B,S,V] via the transposed token embedding plus a bias."""
    p = model.params
    return add(matmul(hidden, swapaxes(p["tok_emb"], 0, 1)), p["mlm_bias"])


def classify(model: EncoderModel, head: ClassifierHead, ids, attention_mask) -> Tensor:
    """[B,S] -> class logits [B,C], pooling the hidden state at position 0."""
    hidden = encode_batch(model, ids, attention_mask)
    pooled = take_position(hidden, 0)
    return add(matmul(pooled, head.weight), head.bias)
