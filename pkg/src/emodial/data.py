"""Corpus files, tokenization, vocabularies, word vectors and feature files."""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

LABELS = ("happy", "sad", "angry", "others")
EMOTIONS = ("happy", "sad", "angry")
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}

PAD, UNK, SEP = "<pad>", "<unk>", "<sep>"
PAD_ID, UNK_ID, SEP_ID = 0, 1, 2
RESERVED = (PAD, UNK, SEP)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: Tuple[str, str, str]
    label: Optional[str] = None

    def __post_init__(self):
        if len(self.turns) != 3:
            raise DataError(f"dialogue {self.id!r} has {len(self.turns)} turns, expected 3")
        if self.label is not None and self.label not in LABEL_INDEX:
            raise DataError(f"dialogue {self.id!r}: unknown label {self.label!r}")


def parse_label(raw: str) -> str:
    label = raw.strip().lower()
    if label not in LABEL_INDEX:
        raise DataError(f"unknown label {raw!r}")
    return label


def load_tsv(path, labeled: bool = True) -> List[Dialogue]:
    """Read a corpus file with header ``id, turn1, turn2, turn3[, label]``."""
    ncols = 5 if labeled else 4
    dialogues: List[Dialogue] = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].rstrip("\r").split("\t")
    if header[0].strip().lower() != "id" or len(header) != ncols:
        raise DataError(f"{path}: expected a {ncols}-column header starting with 'id', got {header!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        fields = line.split("\t")
        if len(fields) != ncols:
            raise DataError(f"{path}:{lineno}: {len(fields)} columns, expected {ncols}")
        did = fields[0]
        if did in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {did!r}")
        seen.add(did)
        try:
            label = parse_label(fields[4]) if labeled else None
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        dialogues.append(Dialogue(did, (fields[1], fields[2], fields[3]), label))
    return dialogues


def format_tsv(dialogues: Sequence[Dialogue]) -> str:
    labeled = bool(dialogues) and dialogues[0].label is not None
    header = ["id", "turn1", "turn2", "turn3"] + (["label"] if labeled else [])
    out = ["\t".join(header)]
    for d in dialogues:
        if (d.label is not None) != labeled:
            raise DataError("cannot mix labeled and unlabeled dialogues in one file")
        for text in (d.id, *d.turns):
            if any(c in text for c in "\t\n\r"):
                raise DataError(f"dialogue {d.id!r}: field contains a tab or newline")
        row = [d.id, *d.turns] + ([d.label] if labeled else [])
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


def write_tsv(dialogues: Sequence[Dialogue], path) -> None:
    Path(path).write_text(format_tsv(dialogues), encoding="utf-8")


def corpus_stats(dialogues: Sequence[Dialogue]) -> Dict[str, int]:
    counts = Counter(d.label for d in dialogues if d.label is not None)
    stats = {"n": len(dialogues)}
    stats.update({label: counts.get(label, 0) for label in LABELS})
    stats["emotion"] = sum(counts.get(label, 0) for label in EMOTIONS)
    stats["unlabeled"] = sum(1 for d in dialogues if d.label is None)
    return stats


# -- tokenization -----------------------------------------------------------

ZWJ = "‍"


def _is_modifier(ch: str) -> bool:
    cp = ord(ch)
    return 0xFE00 <= cp <= 0xFE0F or 0x1F3FB <= cp <= 0x1F3FF or 0xE0020 <= cp <= 0xE007F


def _is_emoji(ch: str) -> bool:
    cp = ord(ch)
    if 0x1F000 <= cp <= 0x1FAFF or 0x2600 <= cp <= 0x27BF or 0x2300 <= cp <= 0x23FF:
        return True
    if 0x2B00 <= cp <= 0x2BFF:
        return True
    return unicodedata.category(ch) == "So"


def _is_word_char(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "LNM"


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, and split off punctuation and emoji.

    Every non-word, non-space character is its own token, except that an emoji
    keeps its trailing variation selectors and skin-tone modifiers and absorbs
    ZWJ-joined emoji that follow it.
    """
    text = text.lower()
    tokens: List[str] = []
    word: List[str] = []
    i, n = 0, len(text)

    def flush():
        if word:
            tokens.append("".join(word))
            word.clear()

    while i < n:
        ch = text[i]
        if ch.isspace():
            flush()
            i += 1
        elif _is_emoji(ch):
            flush()
            j = i + 1
            while j < n:
                if _is_modifier(text[j]):
                    j += 1
                elif text[j] == ZWJ and j + 1 < n and _is_emoji(text[j + 1]):
                    j += 2
                else:
                    break
            tokens.append(text[i:j])
            i = j
        elif _is_word_char(ch) or (word and _is_modifier(ch)):
            word.append(ch)
            i += 1
        else:
            flush()
            tokens.append(ch)
            i += 1
    flush()
    return tokens


# -- vocabulary -------------------------------------------------------------

class Vocabulary:
    """Token to index map with ``<pad>``, ``<unk>`` and ``<sep>`` at 0, 1, 2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def to_list(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:3]) != RESERVED:
            raise DataError("serialized vocabulary must start with the reserved tokens")
        return cls(itos[3:])


def build_vocab(dialogues: Sequence[Dialogue], min_count: int = 1) -> Vocabulary:
    if not dialogues:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for d in dialogues:
        for turn in d.turns:
            counts.update(tokenize(turn))
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def turn_ids(d: Dialogue, vocab: Vocabulary) -> List[List[int]]:
    return [vocab.lookup(tokenize(t)) for t in d.turns]


def flatten_dialogue(d: Dialogue, vocab: Vocabulary) -> List[int]:
    t1, t2, t3 = turn_ids(d, vocab)
    return t1 + [SEP_ID] + t2 + [SEP_ID] + t3


def load_word_vectors(path, vocab: Vocabulary, dim: int, seed: int = 0,
                      dtype=np.float32) -> np.ndarray:
    """Embedding matrix for ``vocab`` from a text word-vector file.

    Rows for tokens found in the file are copied; the rest are drawn from
    U(-0.05, 0.05) under ``seed``.  The ``<pad>`` row is zero.
    """
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    found = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec-style "count dim" header
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            tok = parts[0]
            idx = vocab.stoi.get(tok)
            if idx is None or idx in found:
                continue
            emb[idx] = np.asarray(parts[1:], dtype=np.float64)
            found.add(idx)
    emb[PAD_ID] = 0.0
    return emb.astype(dtype)


# -- precomputed features ---------------------------------------------------

@dataclass
class FeatureMatrix:
    ids: List[str]
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise DataError(f"feature matrix shape {self.values.shape} does not match {len(self.ids)} ids")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def align(self, dialogues: Sequence[Dialogue]) -> "FeatureMatrix":
        """Reorder rows to follow ``dialogues``."""
        index = {i: r for r, i in enumerate(self.ids)}
        try:
            rows = [index[d.id] for d in dialogues]
        except KeyError as exc:
            raise DataError(f"no feature row for dialogue {exc.args[0]!r}") from None
        return FeatureMatrix([d.id for d in dialogues], self.values[rows])


def load_features(path) -> FeatureMatrix:
    ids, rows = [], []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            try:
                did, vec = line.split("\t")
                values = [float(v) for v in vec.split(",")]
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 'id<TAB>v1,v2,...'") from None
            if rows and len(values) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: {len(values)} values, expected {len(rows[0])}")
            if did in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {did!r}")
            seen.add(did)
            ids.append(did)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no feature rows")
    return FeatureMatrix(ids, np.asarray(rows, dtype=np.float64))


def write_features(fm: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for did, row in zip(fm.ids, fm.values):
            fh.write(did + "\t" + ",".join(repr(float(v)) for v in row) + "\n")


def concat_features(mats: Sequence[FeatureMatrix]) -> FeatureMatrix:
    if not mats:
        raise DataError("nothing to concatenate")
    first = mats[0]
    for m in mats[1:]:
        if len(m.ids) != len(first.ids):
            raise DataError(f"row count mismatch: {len(m.ids)} vs {len(first.ids)}")
        if m.ids != first.ids:
            raise DataError("feature files are not aligned on example ids")
    return FeatureMatrix(list(first.ids), np.concatenate([m.values for m in mats], axis=1))


def split_shuffle(dataset: Sequence, seed: int, val_fraction: float = 0.1):
    """Seeded permutation; the first ``1 - val_fraction`` of it is the train part."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * (1.0 - val_fraction)))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    train = [dataset[i] for i in perm[:n_train]]
    val = [dataset[i] for i in perm[n_train:]]
    return train, val
