"""Masked-language-model corruption and the re-pretraining loop.

The same ``pretrain`` entry point serves both adaptation phases: feed it the
raw task text for the first phase, the paraphrased corpus for the second.
Nothing in here knows which phase it is running.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from .corpus import CLS, NUM_SPECIALS, PAD, SEP, Vocabulary, encode, pad_truncate
from .encoder import EncoderModel, encode_batch, mlm_logits
from .numerics import (
    IGNORE_ID,
    LrSchedule,
    NonFiniteError,
    OptimizerState,
    adamw_step,
    backward,
    cross_entropy,
    derived_rng,
    lr_at,
)

_NEVER_MASKED = (PAD, CLS, SEP)
_MASK_STREAM, _SHUFFLE_STREAM = 3, 4  # rng namespace salts, fixed forever
_PACK_THRESHOLD = 5  # sentences with fewer candidate tokens get packed


@dataclass(frozen=True)
class MaskedExample:
    input_ids: np.ndarray    # corrupted sequence fed to the model
    target_ids: np.ndarray   # original token at selected positions, IGNORE_ID elsewhere
    mask_positions: tuple    # sorted indices of the selected positions


@dataclass(frozen=True)
class PretrainConfig:
    steps: int
    batch_size: int = 16
    max_len: int = 32
    mask_rate: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    seed: int = 0
    peak_lr: float = 5e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError(f"mask rate must be in [0,1], got {self.mask_rate}")
        if not (0.0 <= self.mask_prob and 0.0 <= self.random_prob
                and self.mask_prob + self.random_prob <= 1.0):
            raise ValueError("mask_prob/random_prob must be a sub-distribution")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")


def apply_masking(seq, rate: float, rng: np.random.Generator, vocab_size: int,
                  mask_prob: float = 0.8, random_prob: float = 0.1) -> MaskedExample:
    """Corrupt one id sequence for MLM training.

    PAD/CLS/SEP positions are never candidates. Each candidate is selected
    independently with probability ``rate``; a selected position becomes MASK
    with probability ``mask_prob``, a uniformly random non-special token with
    probability ``random_prob``, and stays unchanged otherwise. The target
    records the original token at every selected position.

    Draw order is part of the reproducibility contract: one uniform vector
    over candidates (selection), one over the selected set (arm), then one
    integers call for the replacement tokens.
    """
    ids = np.asarray(seq, dtype=np.int64)
    input_ids = ids.copy()
    targets = np.full_like(ids, IGNORE_ID)

    candidates = np.nonzero(~np.isin(ids, _NEVER_MASKED))[0]
    u_select = rng.random(candidates.size)
    selected = candidates[u_select < rate]
    u_arm = rng.random(selected.size)
    to_mask = selected[u_arm < mask_prob]
    to_random = selected[(u_arm >= mask_prob) & (u_arm < mask_prob + random_prob)]
    replacements = rng.integers(NUM_SPECIALS, vocab_size, size=to_random.size)

    targets[selected] = ids[selected]
    input_ids[to_mask] = corpus_mod.MASK
    input_ids[to_random] = replacements
    return MaskedExample(input_ids=input_ids, target_ids=targets,
                         mask_positions=tuple(int(i) for i in np.sort(selected)))


def pack_corpus(corpus: list, vocab: Vocabulary, max_len: int) -> list:
    """Encode sentences into fixed-length training chunks.

    A sentence with at least 5 maskable tokens gets its own CLS...SEP chunk
    (truncated if needed). Shorter sentences are concatenated, SEP-separated,
    until the chunk fills up, so masking never degenerates on tiny inputs.
    Returns a list of int arrays, each exactly max_len long, PAD-padded.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    chunks = []
    buffer = []  # token ids after CLS, including trailing SEPs

    def flush():
        if buffer:
            ids, _ = pad_truncate([CLS] + buffer, max_len)
            chunks.append(np.asarray(ids, dtype=np.int64))
            buffer.clear()

    for text in corpus:
        body = encode(text, vocab)
        if not body:
            continue
        if len(body) >= _PACK_THRESHOLD:
            flush()
            ids, _ = pad_truncate([CLS] + body + [SEP], max_len)
            chunks.append(np.asarray(ids, dtype=np.int64))
        else:
            if buffer and 1 + len(buffer) + len(body) + 1 > max_len:
                flush()
            buffer.extend(body)
            buffer.append(SEP)
    flush()
    if not chunks:
        raise ValueError("corpus produced no usable text")
    return chunks


def mlm_loss_of_batch(model: EncoderModel, batch: list):
    """Mean cross-entropy at the masked positions of a batch of MaskedExample."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if all(len(ex.mask_positions) == 0 for ex in batch):
        raise ValueError("batch has zero masked positions; nothing to score")
    ids = np.stack([ex.input_ids for ex in batch])
    targets = np.stack([ex.target_ids for ex in batch])
    attention = (ids != PAD).astype(np.int64)
    hidden = encode_batch(model, ids, attention)
    return cross_entropy(mlm_logits(model, hidden), targets)


def _masked_batch(chunks, indices, config, vocab_size, epoch, attempt=0):
    out = []
    for i in indices:
        rng = derived_rng(config.seed, _MASK_STREAM, epoch, int(i), attempt)
        out.append(apply_masking(chunks[i], config.mask_rate, rng, vocab_size,
                                 config.mask_prob, config.random_prob))
    return out


def pretrain(model: EncoderModel, corpus: list, config: PretrainConfig,
             vocab: Vocabulary):
    """Run exactly ``config.steps`` AdamW steps of MLM training on ``corpus``.

    Masks are re-drawn on every visit to a chunk (dynamic masking), from RNG
    streams keyed by (seed, epoch, chunk index) so batch assembly order can
    never change the result. Returns (model, trace) where trace rows are
    (step, lr, loss) with step counting from 1.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if config.steps == 0:
        return model, []
    if config.mask_rate == 0.0:
        raise ValueError("mask rate 0 produces no training signal")

    chunks = pack_corpus(corpus, vocab, config.max_len)
    vocab_size = len(vocab)
    schedule = LrSchedule(total_steps=config.steps, peak_lr=config.peak_lr,
                          warmup_fraction=config.warmup_fraction)
    state = OptimizerState.for_params(model.params,
                                      weight_decay=config.weight_decay,
                                      peak_lr=config.peak_lr)
    trace = []
    step = 0
    epoch = 0
    while step < config.steps:
        order = derived_rng(config.seed, _SHUFFLE_STREAM, epoch).permutation(len(chunks))
        for start in range(0, len(order), config.batch_size):
            if step >= config.steps:
                break
            indices = order[start:start + config.batch_size]
            batch = _masked_batch(chunks, indices, config, vocab_size, epoch)
            attempt = 0
            while all(len(ex.mask_positions) == 0 for ex in batch):
                attempt += 1
                if attempt > 100:
                    raise RuntimeError("could not draw a batch with masked positions")
                batch = _masked_batch(chunks, indices, config, vocab_size, epoch, attempt)

            step += 1
            lr = lr_at(schedule, step)
            model.params.zero_grads()
            try:
                loss = mlm_loss_of_batch(model, batch)
            except NonFiniteError as err:
                raise NonFiniteError(f"non-finite values at step {step}: {err}") from err
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NonFiniteError(f"non-finite MLM loss at step {step}")
            backward(loss)
            adamw_step(model.params, model.params.gradients(), state, lr=lr)
            trace.append((step, lr, loss_value))
        epoch += 1
    return model, trace


def save_loss_trace(trace: list, path) -> None:
    """Write (step, lr, loss) rows as CSV with a header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            writer.writerow([step, repr(float(lr)), repr(float(loss))])


def load_loss_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["step", "lr", "loss"]:
            raise ValueError(f"unexpected loss trace header: {header}")
        return [(int(s), float(lr), float(loss)) for s, lr, loss in reader]
