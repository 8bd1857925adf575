"""Classification metrics and the accuracy-gain statistic."""

from __future__ import annotations

import math

METRICS = ("accuracy", "macro_f1")


def _check_aligned(references, predictions):
    references = list(references)
    predictions = list(predictions)
    if len(references) != len(predictions):
        raise ValueError(f"length mismatch: {len(references)} references "
                         f"vs {len(predictions)} predictions")
    if not references:
        raise ValueError("metrics need at least one example")
    return references, predictions


def accuracy(references, predictions) -> float:
    references, predictions = _check_aligned(references, predictions)
    correct = sum(r == p for r, p in zip(references, predictions))
    return correct / len(references)


def macro_f1(references, predictions) -> float:
    """Unweighted mean of per-class F1.

    A class with precision + recall = 0 contributes F1 = 0. Classes absent
    from both references and predictions are excluded from the mean, so the
    score never divides by a phantom class.
    """
    references, predictions = _check_aligned(references, predictions)
    classes = sorted(set(references) | set(predictions))
    scores = []
    for c in classes:
        tp = sum(1 for r, p in zip(references, predictions) if r == c and p == c)
        fp = sum(1 for r, p in zip(references, predictions) if r != c and p == c)
        fn = sum(1 for r, p in zip(references, predictions) if r == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return sum(scores) / len(scores)


def compute_metric(name: str, references, predictions) -> float:
    if name == "accuracy":
        return accuracy(references, predictions)
    if name == "macro_f1":
        return macro_f1(references, predictions)
    raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")


def accuracy_gain(adapted_score: float, base_score: float) -> float:
    """Score change of an adapted model relative to the base, on the same set."""
    return adapted_score - base_score


def mean_and_std(values) -> tuple:
    """Population mean and standard deviation of per-seed scores."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("need at least one value")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)
