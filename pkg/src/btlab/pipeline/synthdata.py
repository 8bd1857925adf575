"""Bundled synthetic 2-class sentiment task, so every run is hermetic.

Labels are keyword-determined: the label of a sentence is the polarity of
the keywords it contains. The labeled training split draws only from the
first 60% of each keyword list while unlabeled and test text use the full
lists, which gives adaptive pretraining something real to contribute:
distributional exposure to keywords the classifier never sees labeled.
Keyword polarity is recoverable from co-occurrence statistics alone, through
two channels: some sentences carry a compound second clause whose keyword
comes from the same polarity pool, and some end in a polarity-flavored tail
clause. Those are the channels through which masked-LM pretraining can place
held-out keywords on the right side of the class boundary.
"""

from __future__ import annotations

import numpy as np

from ..corpus import DatasetSplit, LabeledExample
from ..numerics import derived_rng

POSITIVE_KEYWORDS = [
    "good", "great", "wonderful", "excellent", "amazing", "delightful",
    "brilliant", "superb", "charming", "uplifting", "fantastic", "lovely",
    "perfect", "fun", "enjoyable", "moving", "fresh", "clever", "strong",
    "beautiful",
]
NEGATIVE_KEYWORDS = [
    "bad", "awful", "terrible", "horrible", "boring", "dull", "weak",
    "poor", "messy", "bland", "tedious", "painful", "annoying", "clumsy",
    "flat", "stale", "ugly", "disappointing", "shallow", "broken",
]
TRAIN_KEYWORD_FRACTION = 0.6

_SUBJECTS = [
    "the movie", "this film", "the plot", "the acting", "her performance",
    "the story", "that show", "the script", "his direction", "the soundtrack",
    "the ending", "the cast",
]
_LINKS = ["was", "felt", "seemed", "looked", "turned out"]
_INTENSIFIERS = ["", "really", "truly", "quite", "rather", "simply"]
_LOCATIONS = ["paris", "berlin", "tokyo", "madrid", "oslo", "cairo", "lima", "dublin"]
_TAILS = [
    "",
    "last night",
    "after dinner",
    "from start to finish",
    "in every scene",
    "despite the hype",
    "according to my friends",
    "at the old cinema in {loc}",
    "during the {num} pm show",
    "for almost {num} minutes",
    "in row {num}",
]
_POSITIVE_TAILS = [
    "and we will surely return",
    "so the evening felt like a gift",
    "which made the whole room smile",
    "and everyone cheered at the end",
    "luckily for all of us",
]
_NEGATIVE_TAILS = [
    "and we will never return",
    "so the evening felt like a chore",
    "which made the whole room groan",
    "and everyone sighed at the end",
    "unluckily for all of us",
]
_POLARITY_TAIL_RATE = 0.5
_COMPOUND_RATE = 0.35


def _sentence(rng: np.random.Generator, keyword: str, label: int,
              pool: list) -> str:
    """One review sentence; every sentiment word in it matches the label.

    Compound sentences pair the keyword with a same-polarity partner, which
    is what lets masked-LM training discover keyword polarity from unlabeled
    text; simple sentences may instead carry a polarity-flavored tail.
    """
    subject = _SUBJECTS[rng.integers(len(_SUBJECTS))]
    link = _LINKS[rng.integers(len(_LINKS))]
    strength = _INTENSIFIERS[rng.integers(len(_INTENSIFIERS))]
    words = [subject, link]
    if strength:
        words.append(strength)
    words.append(keyword)
    if rng.random() < _COMPOUND_RATE:
        partner = pool[rng.integers(len(pool))]
        subject2 = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        link2 = _LINKS[rng.integers(len(_LINKS))]
        words.extend(["and", subject2, link2, partner])
    elif rng.random() < _POLARITY_TAIL_RATE:
        tails = _POSITIVE_TAILS if label == 1 else _NEGATIVE_TAILS
        words.append(tails[rng.integers(len(tails))])
    else:
        tail = _TAILS[rng.integers(len(_TAILS))]
        if "{loc}" in tail:
            tail = tail.format(loc=_LOCATIONS[rng.integers(len(_LOCATIONS))])
        if "{num}" in tail:
            tail = tail.format(num=int(rng.integers(2, 99)))
        if tail:
            words.append(tail)
    return " ".join(words) + " ."


def _train_keyword_count() -> int:
    return int(len(POSITIVE_KEYWORDS) * TRAIN_KEYWORD_FRACTION)


def generate_labeled(n: int, seed: int, train_keywords_only: bool = False) -> list:
    """n alternating-label examples; label 1 = positive keyword present."""
    rng = derived_rng(seed, 21)
    cut = _train_keyword_count() if train_keywords_only else len(POSITIVE_KEYWORDS)
    out = []
    for i in range(n):
        label = i % 2
        pool = POSITIVE_KEYWORDS[:cut] if label == 1 else NEGATIVE_KEYWORDS[:cut]
        keyword = pool[rng.integers(len(pool))]
        out.append(LabeledExample(_sentence(rng, keyword, label, pool), label))
    return out


def generate_corpus(n: int, seed: int) -> list:
    """n unlabeled sentences over the full keyword lists."""
    return [ex.text for ex in generate_labeled(n, seed)]


def make_task_dataset(n_train: int = 200, n_validation: int = 100,
                      n_test: int = 500, n_unlabeled: int = 1000,
                      seed: int = 0) -> DatasetSplit:
    """The benchmark splits. Each split uses an independent derived seed."""
    train = generate_labeled(n_train, derived_rng(seed, 22).integers(2**31),
                             train_keywords_only=True)
    validation = generate_labeled(n_validation, derived_rng(seed, 23).integers(2**31),
                                  train_keywords_only=True)
    test = generate_labeled(n_test, derived_rng(seed, 24).integers(2**31))
    unlabeled = [LabeledExample(t) for t in
                 generate_corpus(n_unlabeled, derived_rng(seed, 25).integers(2**31))]
    return DatasetSplit(train=train, validation=validation, test=test,
                        unlabeled=unlabeled, class_count=2,
                        class_names=["negative", "positive"])


def generator_vocabulary() -> list:
    """Every alphabetic word the generator can emit (numbers excluded)."""
    words = set(POSITIVE_KEYWORDS) | set(NEGATIVE_KEYWORDS) | set(_LOCATIONS)
    words.add("and")
    for phrase in (_SUBJECTS + _LINKS + _INTENSIFIERS + _TAILS
                   + _POSITIVE_TAILS + _NEGATIVE_TAILS):
        for token in phrase.replace("{loc}", "").replace("{num}", "").split():
            words.add(token)
    return sorted(words)
