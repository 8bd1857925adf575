"""Text ingestion, tokenization, vocabulary, dataset splits, padding/truncation.

Tokenization is word-level: lowercase, alphanumeric runs are words, every
other non-space character is its own token. The same normalization is applied
before training, augmentation, and evaluation, so every downstream transform
operates on normalized word lists.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

# Special tokens occupy the first seven ids, in exactly this order.
PAD, UNK, MASK, CLS, SEP, BOS, EOS = range(7)
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<cls>", "<sep>", "<bos>", "<eos>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

TokenSequence = list  # list[int]; every id < vocab size


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """The canonical surface form: tokens joined by single spaces."""
    return " ".join(tokenize(text))


class Vocabulary:
    """Immutable bijective token<->id map with the seven specials up front."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:NUM_SPECIALS]) != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def words(self) -> list[str]:
        """Non-special tokens, in id order."""
        return list(self._tokens[NUM_SPECIALS:])

    def to_json(self) -> str:
        return json.dumps(list(self._tokens), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


def build_vocab(corpus: list[str], min_freq: int = 1, max_size: int = 2048) -> Vocabulary:
    """Frequency vocabulary: specials, then words by descending count, ties lexicographic."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size < NUM_SPECIALS:
        raise ValueError(f"max_size must leave room for {NUM_SPECIALS} special tokens")
    counts = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, c in ranked if c >= min_freq and tok not in SPECIAL_TOKENS]
    kept = kept[: max_size - NUM_SPECIALS]
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def encode(text: str, vocab: Vocabulary) -> TokenSequence:
    """Token ids for the normalized text; out-of-vocabulary words become UNK."""
    return [vocab.id_of(tok) for tok in tokenize(text)]


def decode(seq: TokenSequence, vocab: Vocabulary, skip_specials: bool = True) -> str:
    toks = []
    for i in seq:
        if skip_specials and i < NUM_SPECIALS:
            continue
        toks.append(vocab.token_of(i))
    return " ".join(toks)


def pad_truncate(seq: TokenSequence, max_len: int) -> tuple[TokenSequence, list[int]]:
    """Fix length to exactly max_len; returns (ids, attention mask).

    Truncation drops interior tokens: position 0 (a leading CLS, when present)
    always survives, and a trailing SEP is re-attached at the cut. Mask is 1
    at real tokens, 0 at PAD.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    if len(seq) > max_len:
        if seq and seq[-1] == SEP:
            out = list(seq[: max_len - 1]) + [SEP]
        else:
            out = list(seq[:max_len])
    else:
        out = list(seq)
    n_real = len(out)
    out = out + [PAD] * (max_len - n_real)
    mask = [1] * n_real + [0] * (max_len - n_real)
    return out, mask


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledExample:
    text: str
    label: int | None = None


@dataclass
class DatasetSplit:
    train: list[LabeledExample] = field(default_factory=list)
    validation: list[LabeledExample] = field(default_factory=list)
    test: list[LabeledExample] = field(default_factory=list)
    unlabeled: list[LabeledExample] = field(default_factory=list)
    class_count: int = 0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.class_count and self.class_count < 2:
            raise ValueError("classification sets need at least 2 classes")


class DatasetError(ValueError):
    pass


def load_jsonl(path: str | Path, labeled: bool = True,
               class_count: int | None = None) -> tuple[list[LabeledExample], int]:
    """Read one example per line; order preserved, duplicates retained.

    Returns (examples, malformed_count). Records that parse as JSON but lack
    a string "text" field are skipped and counted as malformed. Unparseable
    lines raise, as does a missing or non-integer label in a labeled load,
    both naming the 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    out: list[LabeledExample] = []
    malformed = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                malformed += 1
                continue
            label = rec.get("label")
            if labeled:
                if not isinstance(label, int) or isinstance(label, bool):
                    raise DatasetError(f"{path}:{lineno}: missing or non-integer 'label'")
                if class_count is not None and not 0 <= label < class_count:
                    raise DatasetError(f"{path}:{lineno}: label {label} outside 0..{class_count - 1}")
            else:
                label = None
            out.append(LabeledExample(text=rec["text"], label=label))
    return out, malformed


def save_jsonl(examples: list[LabeledExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"text": ex.text}
            if ex.label is not None:
                rec["label"] = ex.label
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_dataset_dir(root: str | Path) -> DatasetSplit:
    """Load header.json plus train/validation/test(/unlabeled) JSONL files."""
    root = Path(root)
    header_path = root / "header.json"
    if not header_path.exists():
        raise DatasetError(f"missing dataset header: {header_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    class_count = int(header["class_count"])
    class_names = list(header.get("class_names", [str(i) for i in range(class_count)]))
    split = DatasetSplit(class_count=class_count, class_names=class_names)
    for name in ("train", "validation", "test"):
        p = root / f"{name}.jsonl"
        if p.exists():
            examples, _ = load_jsonl(p, labeled=True, class_count=class_count)
            setattr(split, name, examples)
    unl = root / "unlabeled.jsonl"
    if unl.exists():
        split.unlabeled, _ = load_jsonl(unl, labeled=False)
    return split


def save_dataset_dir(split: DatasetSplit, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    header = {"class_count": split.class_count, "class_names": split.class_names}
    (root / "header.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    for name in ("train", "validation", "test"):
        examples = getattr(split, name)
        if examples:
            save_jsonl(examples, root / f"{name}.jsonl")
    if split.unlabeled:
        save_jsonl(split.unlabeled, root / "unlabeled.jsonl")
