"""Test-time noise generators and noised test-set construction.

Five noise kinds stress a fine-tuned classifier: synonym replacement,
beam-decoded back-translation, top-p back-translation, character-level
edits, and invariance rewrites of numbers and location names. Noise only
ever applies to evaluation splits.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .augment import eda
from .corpus import LabeledExample, load_jsonl, save_jsonl, tokenize
from .numerics import derived_rng
from .translator import DecodeConfig, back_translate_corpus

NOISE_KINDS = ("synonym", "bt_beam", "bt_topp", "char_swap", "inv_test")
DEFAULT_REPLICATES = 5
_DIGIT_RUN_RE = re.compile(r"[0-9]+")

# rng namespace salts for the noise streams (fixed forever)
_SYNONYM_STREAM = 11
_CHAR_STREAM = 12
_INV_STREAM = 13
_BT_SEED_STREAM = 14

_cached_lexicon = None


@dataclass(frozen=True)
class NoiseSpec:
    """One noise condition: what to apply, how strongly, and which stream."""

    kind: str
    probability: float | None = None
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; "
                             f"expected one of {NOISE_KINDS}")
        if self.probability is None:
            defaults = {"synonym": 0.1, "char_swap": 0.1, "bt_topp": 0.95}
            object.__setattr__(self, "probability", defaults.get(self.kind))
        elif not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        if self.replicate < 0:
            raise ValueError("replicate must be >= 0")


@dataclass(frozen=True)
class EntityLexicon:
    """Location names for invariance rewrites; replacements are uniform."""

    locations: tuple

    def __post_init__(self):
        if not self.locations:
            raise ValueError("lexicon must be non-empty")
        object.__setattr__(self, "locations", tuple(self.locations))
        object.__setattr__(self, "_members", frozenset(self.locations))

    def __contains__(self, word: str) -> bool:
        return word in self._members


def load_lexicon(path) -> EntityLexicon:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip().lower() for line in fh if line.strip()]
    return EntityLexicon(locations=tuple(names))


def default_lexicon() -> EntityLexicon:
    global _cached_lexicon
    if _cached_lexicon is None:
        ref = resources.files("btlab").joinpath("data/locations.txt")
        with resources.as_file(ref) as path:
            _cached_lexicon = load_lexicon(path)
    return _cached_lexicon


# ---------------------------------------------------------------------------
# point noise ops
# ---------------------------------------------------------------------------

def _one_char_edit(word: str, rng: np.random.Generator) -> str:
    """Exactly one edit; single-character words only ever gain a character."""
    if len(word) == 1:
        kind = 1
    else:
        kind = int(rng.integers(3))
    if kind == 0:
        pos = int(rng.integers(len(word)))
        return word[:pos] + word[pos + 1:]
    if kind == 1:
        pos = int(rng.integers(len(word) + 1))
        ch = string.ascii_lowercase[int(rng.integers(26))]
        return word[:pos] + ch + word[pos:]
    pos = int(rng.integers(len(word) - 1))
    return word[:pos] + word[pos + 1] + word[pos] + word[pos + 2:]


def char_swap(sentence: str, p: float, rng: np.random.Generator) -> str:
    """Each word receives one character edit with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    out = []
    for tok in tokenize(sentence):
        if rng.random() < p:
            out.append(_one_char_edit(tok, rng))
        else:
            out.append(tok)
    return " ".join(out)


def _different_digit_run(run: str, rng: np.random.Generator) -> str:
    while True:
        cand = "".join(str(int(rng.integers(10))) for _ in run)
        if cand != run:
            return cand


def inv_test(sentence: str, lexicon: EntityLexicon,
             rng: np.random.Generator) -> str:
    """Rewrite digit runs and location names, leaving everything else alone."""
    out = []
    for tok in tokenize(sentence):
        if tok in lexicon:
            others = [loc for loc in lexicon.locations if loc != tok]
            if others:
                tok = others[int(rng.integers(len(others)))]
        elif _DIGIT_RUN_RE.search(tok):
            tok = _DIGIT_RUN_RE.sub(
                lambda m: _different_digit_run(m.group(0), rng), tok)
        out.append(tok)
    return " ".join(out)


# ---------------------------------------------------------------------------
# test-set construction
# ---------------------------------------------------------------------------

def _derived_seed(base: int, replicate: int) -> int:
    state = np.random.SeedSequence(
        entropy=base, spawn_key=(_BT_SEED_STREAM, replicate)).generate_state(1)
    return int(state[0])


def make_noised_testsets(examples, spec: NoiseSpec, replicates: int = DEFAULT_REPLICATES,
                         translators=None, decode_config=None,
                         lexicon: EntityLexicon | None = None,
                         thesaurus: dict | None = None,
                         split_name: str = "test") -> list:
    """Noised copies of a test split, one list of examples per replicate.

    Labels are copied positionally and never altered. Replicate r derives its
    randomness from (spec.seed, r). bt_beam has no randomness, so it yields
    exactly one set regardless of the requested replicate count.
    """
    if split_name == "train":
        raise ValueError("noise applies only to evaluation splits, not train")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    examples = list(examples)
    for ex in examples:
        if ex.label is None:
            raise ValueError("noised test sets require labeled examples")
    texts = [ex.text for ex in examples]

    if spec.kind in ("bt_beam", "bt_topp") and (
            translators is None or decode_config is None):
        raise ValueError(f"{spec.kind} noise needs translators and a decode config")
    if spec.kind == "bt_beam":
        replicates = 1

    sets = []
    for r in range(replicates):
        if spec.kind == "synonym":
            noised = [
                eda(text, "synonym_replace", spec.probability,
                    derived_rng(spec.seed, _SYNONYM_STREAM, r, i), thesaurus)
                for i, text in enumerate(texts)]
        elif spec.kind == "char_swap":
            noised = [
                char_swap(text, spec.probability,
                          derived_rng(spec.seed, _CHAR_STREAM, r, i))
                for i, text in enumerate(texts)]
        elif spec.kind == "inv_test":
            lex = lexicon if lexicon is not None else default_lexicon()
            noised = [
                inv_test(text, lex, derived_rng(spec.seed, _INV_STREAM, r, i))
                for i, text in enumerate(texts)]
        elif spec.kind == "bt_beam":
            config = DecodeConfig(
                strategy="beam", beam_width=decode_config.beam_width,
                max_len=decode_config.max_len, seed=decode_config.seed)
            records = back_translate_corpus(texts, 1, translators, config)
            noised = [rec["text"] for rec in records]
        else:  # bt_topp
            config = DecodeConfig(
                strategy="nucleus", top_p=spec.probability,
                max_len=decode_config.max_len,
                seed=_derived_seed(spec.seed, r))
            records = back_translate_corpus(texts, 1, translators, config)
            noised = [rec["text"] for rec in records]
        sets.append([LabeledExample(text=text, label=ex.label)
                     for text, ex in zip(noised, examples)])
    return sets


def save_noised_testsets(out_dir, sets, spec: NoiseSpec) -> list:
    """Write each noised set as JSONL plus a provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r, examples in enumerate(sets):
        path = out_dir / f"{spec.kind}_r{r}.jsonl"
        save_jsonl(examples, path)
        sidecar = path.with_suffix(".provenance.json")
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump({"kind": spec.kind, "seed": spec.seed, "replicate": r},
                      fh, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths


def load_noised_testset(path):
    """Read one noised set and its provenance sidecar."""
    path = Path(path)
    examples, malformed = load_jsonl(path)
    if malformed:
        raise ValueError(f"{path}: {malformed} malformed lines in a noised set")
    sidecar = path.with_suffix(".provenance.json")
    with open(sidecar, encoding="utf-8") as fh:
        provenance = json.load(fh)
    for key in ("kind", "seed", "replicate"):
        if key not in provenance:
            raise ValueError(f"{sidecar}: missing provenance key {key!r}")
    return examples, provenance
