"""Toy seq2seq translation over a synthetic, exactly invertible pivot language.

The pivot language is a seeded word-level cipher (lexicon permutation, then
string reversal plus a marker suffix) with optional pairwise local reordering.
Because the mapping is invertible by construction, round-trip fidelity of the
learned translators is measurable without any external reference model, and
back-translation noise comes only from sampling and model error, which is the
mechanism under study.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import (BOS, CLS, EOS, MASK, PAD, SEP, UNK, Vocabulary,
                     build_vocab, encode, normalize, tokenize)

# Structural markers never belong in emitted text; UNK stays, standing in
# for an unknown word.
_NON_TEXT_IDS = frozenset((PAD, MASK, CLS, SEP, BOS, EOS))
from .encoder import MASK_SCORE, EncoderConfig, EncoderModel, encode_batch
from .numerics import (
    DEFAULT_DTYPE,
    LrSchedule,
    ModelParameters,
    NonFiniteError,
    OptimizerState,
    Tensor,
    adamw_step,
    add,
    backward,
    cross_entropy,
    derived_rng,
    embedding,
    gelu,
    layer_norm,
    lr_at,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    swapaxes,
)

DEFAULT_K_PARAPHRASES = 20
_ALNUM_RE = re.compile(r"[a-z0-9]+")
_SENT_FINAL = {".", "!", "?"}

# rng namespace salts (fixed forever; see numerics.derived_rng)
_SPEC_STREAM, _MODEL_STREAM, _SHUFFLE_STREAM, _DECODE_STREAM, _BT_STREAM = 7, 8, 9, 5, 6


# ---------------------------------------------------------------------------
# Pivot language
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PivotLanguageSpec:
    lexicon: dict            # word -> word, a permutation of the known vocabulary
    inverse_lexicon: dict
    marker: str = "ka"
    reverse_words: bool = True
    reorder: bool = True
    seed: int = 0


def identity_spec() -> PivotLanguageSpec:
    return PivotLanguageSpec(lexicon={}, inverse_lexicon={}, marker="",
                             reverse_words=False, reorder=False, seed=0)


def build_pivot_spec(words, seed: int = 0, marker: str = "ka",
                     reorder: bool = True) -> PivotLanguageSpec:
    """Seeded permutation over ``words`` plus the reverse-and-mark transform."""
    words = sorted(set(words))
    perm = derived_rng(seed, _SPEC_STREAM).permutation(len(words))
    lexicon = {words[i]: words[perm[i]] for i in range(len(words))}
    inverse = {v: k for k, v in lexicon.items()}
    return PivotLanguageSpec(lexicon=lexicon, inverse_lexicon=inverse,
                             marker=marker, reverse_words=True,
                             reorder=reorder, seed=seed)


def _cipher_token(spec: PivotLanguageSpec, token: str) -> str:
    if not _ALNUM_RE.fullmatch(token):
        return token
    word = spec.lexicon.get(token, token)
    if spec.reverse_words:
        word = word[::-1]
    return word + spec.marker


def _decipher_token(spec: PivotLanguageSpec, token: str) -> str:
    if not _ALNUM_RE.fullmatch(token):
        return token
    word = token
    if spec.marker:
        if not (word.endswith(spec.marker) and len(word) > len(spec.marker)):
            return token  # not a pivot word; leave untouched
        word = word[: -len(spec.marker)]
    if spec.reverse_words:
        word = word[::-1]
    return spec.inverse_lexicon.get(word, word)


def _reorder_pairs(tokens: list) -> list:
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def to_pivot(spec: PivotLanguageSpec, tokens: list) -> list:
    mapped = [_cipher_token(spec, t) for t in tokens]
    return _reorder_pairs(mapped) if spec.reorder else mapped


def from_pivot(spec: PivotLanguageSpec, tokens: list) -> list:
    ordered = _reorder_pairs(tokens) if spec.reorder else list(tokens)
    return [_decipher_token(spec, t) for t in ordered]


def make_parallel_corpus(corpus, spec: PivotLanguageSpec) -> list:
    """Normalized (source, pivot) text pairs, corpus order preserved."""
    pairs = []
    for text in corpus:
        tokens = tokenize(text)
        pairs.append((" ".join(tokens), " ".join(to_pivot(spec, tokens))))
    return pairs


# ---------------------------------------------------------------------------
# Seq2seq model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Seq2SeqConfig:
    vocab_size: int
    enc_layers: int = 1
    dec_layers: int = 1
    d_model: int = 48
    n_heads: int = 2
    d_ff: int = 96
    max_src_len: int = 24
    max_tgt_len: int = 24

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if min(self.max_src_len, self.max_tgt_len) < 4:
            raise ValueError("sequence budgets must be at least 4")


class Seq2SeqModel:
    """Encoder (reused from the MLM stack) plus a causal cross-attending decoder.

    All weights live in one ModelParameters: encoder names are unprefixed,
    decoder names start with ``dec.``. The output projection is tied to the
    decoder token embedding.
    """

    def __init__(self, config: Seq2SeqConfig, encoder: EncoderModel,
                 params: ModelParameters):
        self.config = config
        self.encoder = encoder
        self.params = params

    @classmethod
    def build(cls, config: Seq2SeqConfig, seed: int, salt: int = 0) -> "Seq2SeqModel":
        enc_cfg = EncoderConfig(layers=config.enc_layers, d_model=config.d_model,
                                n_heads=config.n_heads, d_ff=config.d_ff,
                                vocab_size=config.vocab_size,
                                max_positions=config.max_src_len)
        encoder = EncoderModel.build(enc_cfg, seed=seed * 1000 + salt)
        rng = derived_rng(seed, _MODEL_STREAM, salt)
        p = encoder.params
        d, f, V = config.d_model, config.d_ff, config.vocab_size

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)

        p.add("dec.tok_emb", rng.normal(0.0, 0.02, size=(V, d)).astype(DEFAULT_DTYPE))
        p.add("dec.pos_emb", rng.normal(0.0, 0.02, size=(config.max_tgt_len, d)).astype(DEFAULT_DTYPE))
        for i in range(config.dec_layers):
            for block in ("self", "cross"):
                pre = f"dec.layer{i}.{block}"
                p.add(f"{pre}.ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
                p.add(f"{pre}.ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
                for proj in ("wq", "wk", "wv", "wo"):
                    p.add(f"{pre}.{proj}", uniform(d, (d, d)))
                    p.add(f"{pre}.b{proj[1]}", np.zeros(d, dtype=DEFAULT_DTYPE))
            pre = f"dec.layer{i}.ff"
            p.add(f"{pre}.ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.w1", uniform(d, (d, f)))
            p.add(f"{pre}.b1", np.zeros(f, dtype=DEFAULT_DTYPE))
            p.add(f"{pre}.w2", uniform(f, (f, d)))
            p.add(f"{pre}.b2", np.zeros(d, dtype=DEFAULT_DTYPE))
        p.add("dec.final_ln.gain", np.ones(d, dtype=DEFAULT_DTYPE))
        p.add("dec.final_ln.bias", np.zeros(d, dtype=DEFAULT_DTYPE))
        p.add("dec.out_bias", np.zeros(V, dtype=DEFAULT_DTYPE))
        return cls(config, encoder, p)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    B, S, d = t.shape
    return swapaxes(reshape(t, (B, S, n_heads, d // n_heads)), 1, 2)


def _mha(params: ModelParameters, pre: str, q_in: Tensor, kv_in: Tensor,
         mask_add, n_heads: int) -> Tensor:
    B, Sq, d = q_in.shape
    dh = d // n_heads
    q = _split_heads(add(matmul(q_in, params[f"{pre}.wq"]), params[f"{pre}.bq"]), n_heads)
    k = _split_heads(add(matmul(kv_in, params[f"{pre}.wk"]), params[f"{pre}.bk"]), n_heads)
    v = _split_heads(add(matmul(kv_in, params[f"{pre}.wv"]), params[f"{pre}.bv"]), n_heads)
    scores = scale(matmul(q, swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    if mask_add is not None:
        scores = add(scores, mask_add)
    weights = softmax(scores, axis=-1)
    ctx = reshape(swapaxes(matmul(weights, v), 1, 2), (B, Sq, d))
    return add(matmul(ctx, params[f"{pre}.wo"]), params[f"{pre}.bo"])


def _causal_mask(length: int) -> Tensor:
    rows = np.arange(length)[:, None]
    cols = np.arange(length)[None, :]
    return Tensor(np.where(cols <= rows, 0.0, MASK_SCORE)
                  .astype(DEFAULT_DTYPE)[None, None, :, :])


def encode_source(model: Seq2SeqModel, src_ids: np.ndarray, src_mask: np.ndarray) -> Tensor:
    return encode_batch(model.encoder, src_ids, src_mask)


def decoder_forward(model: Seq2SeqModel, dec_ids: np.ndarray, enc_hidden: Tensor,
                    src_mask: np.ndarray) -> Tensor:
    """Teacher-forced decoder pass: [B,St] target-side ids -> [B,St,V] logits."""
    p = model.params
    cfg = model.config
    dec_ids = np.asarray(dec_ids)
    B, St = dec_ids.shape
    if St > cfg.max_tgt_len:
        raise ValueError(f"target length {St} exceeds budget {cfg.max_tgt_len}")
    x = add(embedding(p["dec.tok_emb"], dec_ids),
            embedding(p["dec.pos_emb"], np.arange(St)))
    causal = _causal_mask(St)
    cross_add = Tensor(np.where(np.asarray(src_mask)[:, None, None, :] == 1,
                                0.0, MASK_SCORE).astype(DEFAULT_DTYPE))
    for i in range(cfg.dec_layers):
        pre = f"dec.layer{i}"
        xn = layer_norm(x, p[f"{pre}.self.ln.gain"], p[f"{pre}.self.ln.bias"])
        x = add(x, _mha(p, f"{pre}.self", xn, xn, causal, cfg.n_heads))
        xn = layer_norm(x, p[f"{pre}.cross.ln.gain"], p[f"{pre}.cross.ln.bias"])
        x = add(x, _mha(p, f"{pre}.cross", xn, enc_hidden, cross_add, cfg.n_heads))
        xn = layer_norm(x, p[f"{pre}.ff.ln.gain"], p[f"{pre}.ff.ln.bias"])
        ff = matmul(gelu(add(matmul(xn, p[f"{pre}.ff.w1"]), p[f"{pre}.ff.b1"])),
                    p[f"{pre}.ff.w2"])
        x = add(x, add(ff, p[f"{pre}.ff.b2"]))
    x = layer_norm(x, p["dec.final_ln.gain"], p["dec.final_ln.bias"])
    return add(matmul(x, swapaxes(p["dec.tok_emb"], 0, 1)), p["dec.out_bias"])


def _frame(ids: list, max_len: int) -> list:
    """BOS + ids + EOS, truncated to fit, PAD-filled to exactly max_len."""
    body = list(ids)[: max_len - 2]
    out = [BOS] + body + [EOS]
    return out + [PAD] * (max_len - len(out))


def _batch_arrays(id_lists, max_len):
    framed = [_frame(ids, max_len) for ids in id_lists]
    arr = np.asarray(framed, dtype=np.int64)
    return arr, (arr != PAD).astype(np.int64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranslatorTrainConfig:
    steps: int
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


@dataclass
class TranslatorPair:
    fwd: Seq2SeqModel          # source -> pivot
    rev: Seq2SeqModel          # pivot -> source
    vocab: Vocabulary          # shared across both sides
    fwd_trace: list = field(default_factory=list)
    rev_trace: list = field(default_factory=list)


def _train_direction(model: Seq2SeqModel, id_pairs, train_cfg: TranslatorTrainConfig,
                     salt: int) -> list:
    cfg = model.config
    if train_cfg.steps == 0:
        return []
    schedule = LrSchedule(total_steps=train_cfg.steps, peak_lr=train_cfg.peak_lr,
                          warmup_fraction=train_cfg.warmup_fraction)
    state = OptimizerState.for_params(model.params,
                                      weight_decay=train_cfg.weight_decay,
                                      peak_lr=train_cfg.peak_lr)
    trace = []
    step, epoch = 0, 0
    n = len(id_pairs)
    while step < train_cfg.steps:
        order = derived_rng(train_cfg.seed, _SHUFFLE_STREAM, salt, epoch).permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            if step >= train_cfg.steps:
                break
            chosen = [id_pairs[i] for i in order[start:start + train_cfg.batch_size]]
            src_arr, src_mask = _batch_arrays([s for s, _ in chosen], cfg.max_src_len)
            tgt_bodies = [t[: cfg.max_tgt_len - 2] for _, t in chosen]
            width = max(len(t) for t in tgt_bodies) + 2
            dec_in = np.full((len(chosen), width), PAD, dtype=np.int64)
            labels = np.full((len(chosen), width), -100, dtype=np.int64)
            for r, body in enumerate(tgt_bodies):
                dec_in[r, 0] = BOS
                dec_in[r, 1:1 + len(body)] = body
                labels[r, :len(body)] = body
                labels[r, len(body)] = EOS

            step += 1
            lr = lr_at(schedule, step)
            model.params.zero_grads()
            try:
                enc_h = encode_source(model, src_arr, src_mask)
                loss = cross_entropy(decoder_forward(model, dec_in, enc_h, src_mask),
                                     labels,
                                     label_smoothing=train_cfg.label_smoothing)
            except NonFiniteError as err:
                raise NonFiniteError(f"non-finite values at step {step}: {err}") from err
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NonFiniteError(f"non-finite translator loss at step {step}")
            backward(loss)
            adamw_step(model.params, model.params.gradients(), state, lr=lr)
            trace.append((step, lr, loss_value))
        epoch += 1
    return trace


def train_translator(pairs, steps: int, seed: int,
                     model_config: Seq2SeqConfig | None = None,
                     batch_size: int = 32, peak_lr: float = 1e-3,
                     weight_decay: float = 0.01,
                     label_smoothing: float = 0.1) -> TranslatorPair:
    """Train src->pivot and pivot->src models on (source, pivot) text pairs.

    Both directions share one vocabulary built over both sides of the corpus.
    ``steps`` optimizer steps are run per direction. steps=0 returns the
    random initializations untouched. Label smoothing keeps the learned
    distributions wide enough that nucleus round trips stay diverse even
    once the cipher itself is mastered.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    vocab = build_vocab([s for s, _ in pairs] + [t for _, t in pairs])
    if model_config is None:
        model_config = Seq2SeqConfig(vocab_size=len(vocab))
    elif model_config.vocab_size != len(vocab):
        raise ValueError("model_config.vocab_size does not match the built vocabulary")
    train_cfg = TranslatorTrainConfig(steps=steps, batch_size=batch_size,
                                      peak_lr=peak_lr, weight_decay=weight_decay,
                                      label_smoothing=label_smoothing, seed=seed)
    fwd = Seq2SeqModel.build(model_config, seed, salt=0)
    rev = Seq2SeqModel.build(model_config, seed, salt=1)
    fwd_ids = [(encode(s, vocab), encode(t, vocab)) for s, t in pairs]
    rev_ids = [(t, s) for s, t in fwd_ids]
    fwd_trace = _train_direction(fwd, fwd_ids, train_cfg, salt=0)
    rev_trace = _train_direction(rev, rev_ids, train_cfg, salt=1)
    return TranslatorPair(fwd=fwd, rev=rev, vocab=vocab,
                          fwd_trace=fwd_trace, rev_trace=rev_trace)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"     # greedy | beam | nucleus
    beam_width: int = 4
    top_p: float = 0.95
    max_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "nucleus"):
            raise ValueError(f"unknown strategy: {self.strategy}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Zero everything outside the top-p nucleus and renormalize inside it.

    The nucleus is the smallest prefix of the distribution sorted descending
    (ties broken toward the smaller token id) whose cumulative mass reaches p.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1]")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probs must sum to 1")
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, p - 1e-9)) + 1
    keep = order[:cut]
    out = np.zeros_like(probs)
    out[keep] = probs[keep] / probs[keep].sum()
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _decode_batch(model: Seq2SeqModel, sources, config: DecodeConfig,
                  rngs=None) -> list:
    """Greedy or nucleus decoding for a batch of id-list sources."""
    cfg = model.config
    B = len(sources)
    if config.strategy == "nucleus":
        if rngs is None:
            rngs = [derived_rng(config.seed, _DECODE_STREAM, i, 0) for i in range(B)]
        if len(rngs) != B:
            raise ValueError("one rng per source required")
    # fixed frame width: a row's result must not depend on its batch-mates
    src_arr, src_mask = _batch_arrays(sources, cfg.max_src_len)
    with no_grad():
        enc_h = encode_source(model, src_arr, src_mask)
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        limit = min(config.max_len, cfg.max_tgt_len - 1)
        for _ in range(limit):
            logits = decoder_forward(model, prefix, enc_h, src_mask).data[:, -1, :]
            nxt = np.full(B, PAD, dtype=np.int64)
            if config.strategy == "greedy":
                nxt[alive] = logits[alive].argmax(axis=-1)
            else:
                probs = _softmax_rows(logits.astype(np.float64))
                for i in range(B):
                    if not alive[i]:
                        continue
                    dist = nucleus_filter(probs[i], config.top_p)
                    u = rngs[i].random()
                    nxt[i] = min(int(np.searchsorted(np.cumsum(dist), u, side="right")),
                                 dist.size - 1)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            alive &= nxt != EOS
            if not alive.any():
                break
    outputs = []
    for row in prefix[:, 1:]:
        body = []
        for tok in row:
            if tok == EOS or tok == PAD:
                break
            if int(tok) in _NON_TEXT_IDS:
                continue
            body.append(int(tok))
        if not body:
            warnings.warn("decoder produced an empty output; substituting UNK")
            body = [UNK]
        outputs.append(body)
    return outputs


def _beam_decode(model: Seq2SeqModel, source, config: DecodeConfig) -> list:
    cfg = model.config
    src_arr, src_mask = _batch_arrays([source], cfg.max_src_len)
    limit = min(config.max_len, cfg.max_tgt_len - 1)
    with no_grad():
        enc_h_one = encode_source(model, src_arr, src_mask)
        # (tokens including EOS if finished, sum logprob, finished)
        live = [((), 0.0)]
        finished = []
        for _ in range(limit):
            prefix = np.asarray([(BOS,) + toks for toks, _ in live], dtype=np.int64)
            enc_rep = Tensor(np.repeat(enc_h_one.data, len(live), axis=0))
            mask_rep = np.repeat(src_mask, len(live), axis=0)
            logits = decoder_forward(model, prefix, enc_rep, mask_rep).data[:, -1, :]
            logz = logits.astype(np.float64)
            logz -= logz.max(axis=-1, keepdims=True)
            logp = logz - np.log(np.exp(logz).sum(axis=-1, keepdims=True))
            candidates = []
            for (toks, score), row in zip(live, logp):
                top = np.argsort(-row, kind="stable")[: config.beam_width]
                for v in top:
                    candidates.append((toks + (int(v),), score + float(row[v])))
            candidates.sort(key=lambda c: (-c[1] / len(c[0]), c[0]))
            selected = candidates[: config.beam_width]
            live = []
            for toks, score in selected:
                if toks[-1] == EOS:
                    finished.append((toks, score))
                else:
                    live.append((toks, score))
            if not live:
                break
        pool = finished + [(toks, score) for toks, score in live if toks]
        if not pool:
            warnings.warn("decoder produced an empty output; substituting UNK")
            return [UNK]
        pool.sort(key=lambda c: (-c[1] / len(c[0]), c[0]))
        best = list(pool[0][0])
    body = [t for t in best if t not in _NON_TEXT_IDS]
    if not body:
        warnings.warn("decoder produced an empty output; substituting UNK")
        body = [UNK]
    return body


def decode(model: Seq2SeqModel, source, config: DecodeConfig,
           rng: np.random.Generator | None = None) -> list:
    """Translate one id-list source into an id-list output (no BOS/EOS)."""
    if len(source) == 0:
        raise ValueError("source must be non-empty")
    if config.strategy == "beam":
        return _beam_decode(model, source, config)
    rngs = None
    if config.strategy == "nucleus":
        rngs = [rng if rng is not None else derived_rng(config.seed, _DECODE_STREAM, 0, 0)]
    return _decode_batch(model, [source], config, rngs)[0]


# ---------------------------------------------------------------------------
# Back-translation
# ---------------------------------------------------------------------------

def _split_token_sentences(tokens: list) -> list:
    """Split a token list at sentence-final punctuation, keeping the mark."""
    pieces, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in _SENT_FINAL:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)
    return pieces


def _round_trip_ids(piece_ids, translators: "TranslatorPair", config: DecodeConfig,
                    rng) -> list:
    pivot = decode(translators.fwd, piece_ids, config, rng)
    return decode(translators.rev, pivot, config, rng)


def back_translate(sentence: str, k: int, translators: "TranslatorPair",
                   config: DecodeConfig, sentence_index: int = 0) -> list:
    """k round-trip paraphrases of one sentence.

    Long inputs are split at sentence-final punctuation and each piece makes
    the round trip separately. Nucleus RNG streams derive from
    (config.seed, sentence_index, sample index), so results do not depend on
    batching or worker layout. Duplicates are kept.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    vocab = translators.vocab
    tokens = tokenize(sentence)
    if not tokens:
        raise ValueError("sentence has no tokens")
    pieces = [[vocab.id_of(t) for t in piece] for piece in _split_token_sentences(tokens)]
    out = []
    for j in range(k):
        ids = []
        for q, piece in enumerate(pieces):
            rng = derived_rng(config.seed, _BT_STREAM, sentence_index, j, q)
            ids.extend(_round_trip_ids(piece, translators, config, rng))
        out.append(" ".join(vocab.token_of(i) for i in ids))
    return out


def back_translate_corpus(sentences, k: int, translators: "TranslatorPair",
                          config: DecodeConfig, batch_rows: int = 256) -> list:
    """Paraphrase a whole corpus; returns {"orig_index","sample","text"} records.

    Equivalent to calling back_translate per sentence with sentence_index=i,
    but rounds of decoding are batched for speed.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    vocab = translators.vocab
    jobs = []   # (orig_index, sample, piece_order, ids)
    for i, sentence in enumerate(sentences):
        tokens = tokenize(sentence)
        if not tokens:
            raise ValueError(f"sentence {i} has no tokens")
        pieces = [[vocab.id_of(t) for t in piece]
                  for piece in _split_token_sentences(tokens)]
        for j in range(k):
            for q, piece in enumerate(pieces):
                jobs.append({"orig_index": i, "sample": j, "piece": q, "ids": piece,
                             "rng": derived_rng(config.seed, _BT_STREAM, i, j, q)})

    results = {}
    for start in range(0, len(jobs), batch_rows):
        window = jobs[start:start + batch_rows]
        if config.strategy == "beam":
            pivots = [_beam_decode(translators.fwd, job["ids"], config)
                      for job in window]
            outs = [_beam_decode(translators.rev, piv, config) for piv in pivots]
        else:
            rngs = [job["rng"] for job in window] if config.strategy == "nucleus" else None
            pivots = _decode_batch(translators.fwd, [job["ids"] for job in window],
                                   config, rngs)
            outs = _decode_batch(translators.rev, pivots, config, rngs)
        for job, ids in zip(window, outs):
            results.setdefault((job["orig_index"], job["sample"]), {})[job["piece"]] = ids

    records = []
    for i in range(len(sentences)):
        for j in range(k):
            pieces = results[(i, j)]
            ids = [t for q in sorted(pieces) for t in pieces[q]]
            records.append({"orig_index": i, "sample": j,
                            "text": " ".join(vocab.token_of(t) for t in ids)})
    return records


def save_augmented(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"orig_index": rec["orig_index"],
                                 "sample": rec["sample"],
                                 "text": rec["text"]}, sort_keys=True) + "\n")


def load_augmented(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if not all(k in rec for k in ("orig_index", "sample", "text")):
                raise ValueError(f"{path}:{line_no}: missing augmented-record field")
            records.append(rec)
    return records
