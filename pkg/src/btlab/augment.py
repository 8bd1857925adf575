"""Benchmark augmenters that compete with back-translation.

Three families: EDA-style edits driven by a bundled mini-thesaurus,
nearest-neighbor replacement in a small co-occurrence embedding, and
TF-IDF-weighted replacement of uninformative words. All operate on
normalized text and never see labels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .corpus import normalize, tokenize
from .numerics import derived_rng
from .translator import back_translate_corpus

EDA_OPS = ("synonym_replace", "random_insert", "random_swap", "random_delete")
AUGMENT_METHODS = tuple(f"eda.{op}" for op in EDA_OPS) + (
    "embedding", "tfidf", "back_translation")
DEFAULT_P = 0.1
_AUGMENT_STREAM = 10  # rng namespace salt

_cached_thesaurus = None


# ---------------------------------------------------------------------------
# Thesaurus
# ---------------------------------------------------------------------------

def load_thesaurus(path) -> dict:
    """Parse "word<TAB>syn1,syn2,..." lines into a lowercase lookup table."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{line_no}: expected word<TAB>synonyms")
            word, _, rest = line.partition("\t")
            word = word.strip().lower()
            syns = [s.strip().lower() for s in rest.split(",") if s.strip()]
            if word in syns:
                raise ValueError(f"{path}:{line_no}: {word!r} listed as its own synonym")
            if word and syns:
                table[word] = syns
    return table


def default_thesaurus() -> dict:
    global _cached_thesaurus
    if _cached_thesaurus is None:
        ref = resources.files("btlab").joinpath("data/thesaurus.txt")
        with resources.as_file(ref) as path:
            _cached_thesaurus = load_thesaurus(path)
    return _cached_thesaurus


# ---------------------------------------------------------------------------
# EDA
# ---------------------------------------------------------------------------

def eda(sentence: str, op: str, p: float, rng: np.random.Generator,
        thesaurus: dict | None = None) -> str:
    """One EDA operation on normalized text; returns normalized text."""
    if op not in EDA_OPS:
        raise ValueError(f"unknown EDA op: {op}")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if thesaurus is None:
        thesaurus = default_thesaurus()
    tokens = tokenize(sentence)
    if not tokens:
        return ""

    if op == "synonym_replace":
        out = []
        for tok in tokens:
            syns = thesaurus.get(tok)
            if syns and rng.random() < p:
                out.append(syns[rng.integers(len(syns))])
            else:
                out.append(tok)
        return " ".join(out)

    if op == "random_insert":
        out = list(tokens)
        candidates = [t for t in tokens if t in thesaurus]
        if not candidates:
            return " ".join(out)
        for _ in range(math.ceil(p * len(tokens))):
            word = candidates[rng.integers(len(candidates))]
            syns = thesaurus[word]
            syn = syns[rng.integers(len(syns))]
            out.insert(rng.integers(len(out) + 1), syn)
        return " ".join(out)

    if op == "random_swap":
        out = list(tokens)
        for _ in range(math.ceil(p * len(tokens))):
            i = rng.integers(len(out))
            j = rng.integers(len(out))
            out[i], out[j] = out[j], out[i]
        return " ".join(out)

    # random_delete
    kept = [t for t in tokens if rng.random() >= p]
    if not kept:
        kept = [tokens[rng.integers(len(tokens))]]
    return " ".join(kept)


# ---------------------------------------------------------------------------
# Toy embedding
# ---------------------------------------------------------------------------

@dataclass
class ToyEmbedding:
    words: list
    vectors: np.ndarray  # [n, d_e], rows unit-norm

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("embedding vectors must be unit norm")

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self._index[word]]

    def nearest(self, word: str) -> str:
        """Cosine-nearest other word."""
        i = self._index[word]
        sims = self.vectors @ self.vectors[i]
        sims[i] = -np.inf
        return self.words[int(sims.argmax())]


def train_embedding(corpus, d_e: int = 16, window: int = 2) -> ToyEmbedding:
    """Factorize a windowed co-occurrence matrix into unit word vectors."""
    docs = [tokenize(text) for text in corpus]
    words = sorted({t for doc in docs for t in doc})
    if not words:
        raise ValueError("corpus has no tokens")
    index = {w: i for i, w in enumerate(words)}
    n = len(words)
    counts = np.zeros((n, n), dtype=np.float64)
    for doc in docs:
        for i, tok in enumerate(doc):
            for j in range(max(0, i - window), min(len(doc), i + window + 1)):
                if j != i:
                    counts[index[tok], index[doc[j]]] += 1.0
    mat = np.log1p(counts)
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    k = min(d_e, n)
    vecs = u[:, :k] * s[:k]
    if k < d_e:
        vecs = np.pad(vecs, ((0, 0), (0, d_e - k)))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    vecs = vecs / norms
    # rows with zero norm (isolated words) get a deterministic unit fallback
    dead = np.linalg.norm(vecs, axis=1) < 0.5
    vecs[dead, 0] = 1.0
    return ToyEmbedding(words=words, vectors=vecs)


def save_embedding(emb: ToyEmbedding, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in zip(emb.words, emb.vectors):
            fh.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_embedding(path) -> ToyEmbedding:
    words, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise ValueError(f"{path}:{line_no}: expected word plus floats")
            words.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if not words:
        raise ValueError(f"{path}: empty embedding file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent vector widths {sorted(widths)}")
    return ToyEmbedding(words=words, vectors=np.asarray(rows))


def embedding_replace(sentence: str, p: float, emb: ToyEmbedding,
                      rng: np.random.Generator) -> str:
    """Replace each covered word w.p. p by its nearest cosine neighbor."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    out = []
    for tok in tokenize(sentence):
        if tok in emb and rng.random() < p:
            out.append(emb.nearest(tok))
        else:
            out.append(tok)
    return " ".join(out)


# ---------------------------------------------------------------------------
# TF-IDF replacement
# ---------------------------------------------------------------------------

class TfidfTable:
    """Per-word (mean within-document tf) x idf scores over a corpus.

    idf = ln((1+N)/(1+df)) + 1. Low scores mark uninformative words; the
    replacement sampler draws from the unigram distribution restricted to the
    bottom half of the score ordering.
    """

    def __init__(self, corpus):
        docs = [tokenize(text) for text in corpus]
        n_docs = len(docs)
        if n_docs == 0:
            raise ValueError("corpus must be non-empty")
        counts, df = {}, {}
        for doc in docs:
            for tok in doc:
                counts[tok] = counts.get(tok, 0) + 1
            for tok in set(doc):
                df[tok] = df.get(tok, 0) + 1
        self.scores = {}
        for tok, count in counts.items():
            idf = math.log((1 + n_docs) / (1 + df[tok])) + 1.0
            self.scores[tok] = (count / df[tok]) * idf
        self.max_score = max(self.scores.values(), default=0.0)
        ordered = sorted(self.scores, key=lambda w: (self.scores[w], w))
        bottom = ordered[: max(1, len(ordered) // 2)]
        weights = np.array([counts[w] for w in bottom], dtype=np.float64)
        self._pool = bottom
        self._pool_weights = weights / weights.sum()

    def score(self, word: str) -> float:
        return self.scores.get(word, 0.0)

    def sample_low_score_word(self, rng: np.random.Generator) -> str:
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(self._pool_weights), u, side="right"))
        return self._pool[min(idx, len(self._pool) - 1)]


def tfidf_replace(sentence: str, p: float, table: TfidfTable,
                  rng: np.random.Generator) -> str:
    """Replace uninformative words, sparing high-score ones.

    Per-word replacement probability is proportional to (max_score - score),
    scaled so the sentence mean equals p; replacements come from the
    bottom-half unigram pool.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    tokens = tokenize(sentence)
    if not tokens:
        return ""
    if len(table.scores) < 2:
        warnings.warn("tf-idf table has fewer than two words; sentence unchanged")
        return " ".join(tokens)
    gaps = np.array([table.max_score - table.score(t) for t in tokens])
    mean_gap = gaps.mean()
    if mean_gap == 0.0 or p == 0.0:
        return " ".join(tokens)
    q = np.minimum(gaps * (p / mean_gap), 1.0)
    out = []
    for tok, qi in zip(tokens, q):
        if rng.random() < qi:
            out.append(table.sample_low_score_word(rng))
        else:
            out.append(tok)
    return " ".join(out)


# ---------------------------------------------------------------------------
# Corpus-level driver
# ---------------------------------------------------------------------------

def augment_corpus(texts, method: str, p: float = DEFAULT_P, copies: int = 1,
                   seed: int = 0, thesaurus: dict | None = None,
                   embedding: ToyEmbedding | None = None,
                   translators=None, decode_config=None) -> list:
    """copies augmented versions of every text, as ordered
    {"orig_index", "sample", "text"} records.

    The back_translation method routes to the translator module with
    k=copies; the others run the local transforms with RNG streams derived
    per (seed, text index, copy index).
    """
    if method not in AUGMENT_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {AUGMENT_METHODS}")
    if copies < 0:
        raise ValueError("copies must be >= 0")
    texts = list(texts)
    if copies == 0:
        return []

    if method == "back_translation":
        if translators is None or decode_config is None:
            raise ValueError("back_translation needs translators and a decode config")
        return back_translate_corpus(texts, copies, translators, decode_config)

    if method == "embedding" and embedding is None:
        embedding = train_embedding(texts)
    table = TfidfTable(texts) if method == "tfidf" else None

    records = []
    for i, text in enumerate(texts):
        for j in range(copies):
            rng = derived_rng(seed, _AUGMENT_STREAM, i, j)
            if method.startswith("eda."):
                out = eda(text, method[len("eda."):], p, rng, thesaurus)
            elif method == "embedding":
                out = embedding_replace(text, p, embedding, rng)
            else:
                out = tfidf_replace(text, p, table, rng)
            records.append({"orig_index": i, "sample": j, "text": out})
    return records
