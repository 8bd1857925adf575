"""Classifier fine-tuning with per-epoch early stopping and grid search."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..corpus import CLS, SEP, Vocabulary, encode, pad_truncate
from ..encoder import ClassifierHead, EncoderModel, classify, merged_parameters
from ..numerics import (
    LrSchedule,
    ModelParameters,
    OptimizerState,
    adamw_step,
    backward,
    cross_entropy,
    derived_rng,
    lr_at,
    no_grad,
)
from .metrics import METRICS, compute_metric

FINE_TUNE_LR = 2e-5
_SHUFFLE_STREAM = 15  # rng namespace salt for batch order


@dataclass(frozen=True)
class FineTuneParams:
    epochs: int
    batch_size: int
    weight_decay: float
    lr: float = FINE_TUNE_LR
    max_len: int = 32
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")


def default_grid(lr: float = FINE_TUNE_LR, max_len: int = 32) -> list:
    """Epochs x batch x weight-decay grid searched during fine-tuning."""
    return [FineTuneParams(epochs=e, batch_size=b, weight_decay=wd, lr=lr,
                           max_len=max_len)
            for e in (2, 3) for b in (8, 16, 32) for wd in (0.0, 0.01)]


def encode_examples(texts, vocab: Vocabulary, max_len: int):
    """[CLS] body [SEP] frames as (ids, attention mask) arrays."""
    ids, masks = [], []
    for text in texts:
        framed, mask = pad_truncate([CLS] + encode(text, vocab) + [SEP], max_len)
        ids.append(framed)
        masks.append(mask)
    return np.asarray(ids, dtype=np.int64), np.asarray(masks, dtype=np.int64)


def _clone_model(model: EncoderModel) -> EncoderModel:
    p = ModelParameters()
    for name, t in model.params.items():
        p.add(name, t.data.copy())
    return EncoderModel(model.config, p)


def _clone_head(head: ClassifierHead) -> ClassifierHead:
    p = ModelParameters()
    w = p.add("cls_head.weight", head.weight.data.copy())
    b = p.add("cls_head.bias", head.bias.data.copy())
    clone = ClassifierHead(weight=w, bias=b)
    clone._params = p
    return clone


def _mean_loss(model, head, ids, masks, labels, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(ids), batch_size):
            hi = min(lo + batch_size, len(ids))
            logits = classify(model, head, ids[lo:hi], masks[lo:hi])
            loss = cross_entropy(logits, labels[lo:hi])
            total += loss.item() * (hi - lo)
            count += hi - lo
    return total / count


def fine_tune(model: EncoderModel, head: ClassifierHead, train, validation,
              hparams: FineTuneParams, vocab: Vocabulary, seed: int = 0):
    """Train a copy of (model, head) on the labeled split.

    Validation loss is checked once per epoch; training stops at the first
    increase and the parameters from the best epoch are returned. The inputs
    are never mutated. Returns (model, head, trace) where trace rows are
    (epoch, validation loss) and epoch 0 is the untrained baseline.
    """
    train = list(train)
    validation = list(validation)
    if not train or not validation:
        raise ValueError("fine_tune needs non-empty train and validation splits")
    labels = [ex.label for ex in train]
    if any(lab is None for lab in labels):
        raise ValueError("fine_tune needs labeled training examples")
    if len(set(labels)) < 2:
        raise ValueError("training split has a single class; nothing to separate")

    model = _clone_model(model)
    head = _clone_head(head)
    train_ids, train_masks = encode_examples(
        [ex.text for ex in train], vocab, hparams.max_len)
    train_labels = np.asarray(labels, dtype=np.int64)
    val_ids, val_masks = encode_examples(
        [ex.text for ex in validation], vocab, hparams.max_len)
    val_labels = np.asarray([ex.label for ex in validation], dtype=np.int64)

    trace = [(0, _mean_loss(model, head, val_ids, val_masks, val_labels))]
    if hparams.epochs == 0:
        return model, head, trace

    params = merged_parameters(model.params, head.parameters())
    n = len(train)
    steps_per_epoch = math.ceil(n / hparams.batch_size)
    schedule = LrSchedule(total_steps=hparams.epochs * steps_per_epoch,
                          peak_lr=hparams.lr,
                          warmup_fraction=hparams.warmup_fraction)
    state = OptimizerState.for_params(params, weight_decay=hparams.weight_decay,
                                      peak_lr=hparams.lr)
    snapshots = {}
    step = 0
    for epoch in range(1, hparams.epochs + 1):
        order = derived_rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)
        for lo in range(0, n, hparams.batch_size):
            batch = order[lo:lo + hparams.batch_size]
            step += 1
            params.zero_grads()
            logits = classify(model, head, train_ids[batch], train_masks[batch])
            loss = cross_entropy(logits, train_labels[batch])
            backward(loss)
            adamw_step(params, params.gradients(), state,
                       lr=lr_at(schedule, step))
        val_loss = _mean_loss(model, head, val_ids, val_masks, val_labels)
        trace.append((epoch, val_loss))
        snapshots[epoch] = (model.params.copy_values(),
                            head.parameters().copy_values())
        if val_loss > trace[-2][1] and epoch > 1:
            break

    best_epoch = min(snapshots, key=lambda e: (trace[e][1], e))
    model.params.load_values(snapshots[best_epoch][0])
    head.parameters().load_values(snapshots[best_epoch][1])
    return model, head, trace


def predict_labels(model, head, texts, vocab: Vocabulary, max_len: int = 32,
                   batch_size: int = 64) -> list:
    ids, masks = encode_examples(texts, vocab, max_len)
    preds = []
    with no_grad():
        for lo in range(0, len(ids), batch_size):
            hi = min(lo + batch_size, len(ids))
            logits = classify(model, head, ids[lo:hi], masks[lo:hi])
            preds.extend(int(i) for i in logits.data.argmax(axis=-1))
    return preds


def evaluate(model, head, examples, metric: str, vocab: Vocabulary,
             max_len: int = 32) -> float:
    """Metric of the classifier's argmax predictions on a labeled split."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    examples = list(examples)
    if not examples:
        raise ValueError("evaluation split must be non-empty")
    references = [ex.label for ex in examples]
    if any(r is None for r in references):
        raise ValueError("evaluation needs labeled examples")
    predictions = predict_labels(model, head, [ex.text for ex in examples],
                                 vocab, max_len)
    return compute_metric(metric, references, predictions)


@dataclass
class GridSearchResult:
    model: EncoderModel
    head: ClassifierHead
    chosen: FineTuneParams
    validation_score: float
    table: list  # (params, validation score) per grid point
    trace: list  # validation-loss trace of the chosen run


def grid_search_fine_tune(model, head, train, validation, grid, metric: str,
                          vocab: Vocabulary, seed: int = 0) -> GridSearchResult:
    """fine_tune at every grid point, selecting by validation metric.

    Ties prefer fewer epochs, then the smaller batch size, which the
    ascending iteration order enforces via strict improvement.
    """
    grid = sorted(grid, key=lambda g: (g.epochs, g.batch_size, g.weight_decay))
    if not grid:
        raise ValueError("grid must be non-empty")
    best = None
    table = []
    for point in grid:
        tuned_model, tuned_head, trace = fine_tune(
            model, head, train, validation, point, vocab, seed)
        score = evaluate(tuned_model, tuned_head, validation, metric, vocab,
                         max_len=point.max_len)
        table.append((point, score))
        if best is None or score > best.validation_score:
            best = GridSearchResult(model=tuned_model, head=tuned_head,
                                    chosen=point, validation_score=score,
                                    table=table, trace=trace)
    best.table = table
    return best
