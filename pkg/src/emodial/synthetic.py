"""Synthetic three-turn corpus for desk-scale experiments.

Turn 3 carries an emotion keyword that sets the label; the marker ``not`` in
turn 1 flips it (happy<->sad, angry<->others).  Turns are padded with
distractor words to 10-20 tokens and turn 2 sometimes holds a decoy keyword,
so reading the right keyword in the right turn matters.
"""
from __future__ import annotations

from typing import List

import numpy as np

from .data import LABELS, Dialogue

KEYWORDS = {
    "happy": ("happy", "glad", "joyful", "yay", "delighted"),
    "sad": ("sad", "crying", "lonely", "heartbroken", "gloomy"),
    "angry": ("angry", "furious", "hate", "annoyed", "mad"),
    "others": ("table", "tuesday", "weather", "okay", "homework"),
}
FLIP = {"happy": "sad", "sad": "happy", "angry": "others", "others": "angry"}
NEGATION = "not"
N_DISTRACTORS = 20


def _distractors(n: int) -> List[str]:
    consonants, vowels = "bdfgklmnprstvz", "aeiou"
    words = []
    for i in range(n):
        a, b = divmod(i, len(vowels))
        c, d = divmod(a, len(consonants))
        words.append(consonants[d] + vowels[b] + consonants[c % len(consonants)] + "o")
    return words


DISTRACTORS = _distractors(N_DISTRACTORS)


def make_corpus(n: int, seed: int = 0, prefix: str = "s") -> List[Dialogue]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        base = LABELS[rng.integers(len(LABELS))]
        negated = bool(rng.random() < 0.5)
        label = FLIP[base] if negated else base
        turns = []
        for t in range(3):
            length = int(rng.integers(10, 21))
            words = list(rng.choice(DISTRACTORS, size=length))
            if t == 0 and negated:
                words[rng.integers(length)] = NEGATION
            if t == 1 and rng.random() < 0.5:
                decoy = LABELS[rng.integers(len(LABELS))]
                words[rng.integers(length)] = str(rng.choice(KEYWORDS[decoy]))
            if t == 2:
                words[rng.integers(length)] = str(rng.choice(KEYWORDS[base]))
            turns.append(" ".join(words))
        out.append(Dialogue(f"{prefix}{k}", tuple(turns), label))
    return out


def make_splits(n_train: int = 2000, n_test: int = 500, seed: int = 0):
    return (make_corpus(n_train, seed, "train"),
            make_corpus(n_test, seed + 10_000, "test"))
