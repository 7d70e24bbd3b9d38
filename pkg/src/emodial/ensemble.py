"""Hard majority voting over prediction sets; any tie for the top count yields ``others``."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import LABELS, DataError, parse_label

TIE_LABEL = "others"


@dataclass
class PredictionSet:
    name: str
    ids: List[str]
    labels: List[str]
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.ids) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.ids)} ids but {len(self.labels)} labels")
        if self.probs is not None and self.probs.shape != (len(self.ids), len(LABELS)):
            raise DataError(f"{self.name}: probability block has shape {self.probs.shape}")


def majority_vote(votes: Sequence[str]) -> str:
    if not votes:
        raise ValueError("majority_vote needs at least one vote")
    counts = Counter(votes).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return TIE_LABEL
    return counts[0][0]


def vote_committee(sets: Sequence[PredictionSet], name: str = "vote") -> PredictionSet:
    """Per-example majority vote; ``probs`` holds each label's vote share."""
    if not sets:
        raise ValueError("no prediction sets to vote over")
    ids = sets[0].ids
    for s in sets[1:]:
        if s.ids != ids:
            raise DataError(f"prediction set {s.name!r} is not aligned with {sets[0].name!r}")
    labels = []
    shares = np.zeros((len(ids), len(LABELS)))
    for i in range(len(ids)):
        votes = [s.labels[i] for s in sets]
        labels.append(majority_vote(votes))
        for v in votes:
            shares[i, LABELS.index(v)] += 1.0
    return PredictionSet(name, list(ids), labels, shares / len(sets))


def final_ensemble(sets: Sequence[PredictionSet], name: str = "ensemble") -> PredictionSet:
    """Same rule as :func:`vote_committee`; ensembles and single models mix freely."""
    return vote_committee(sets, name)


def format_predictions(ps: PredictionSet) -> str:
    with_probs = ps.probs is not None
    header = ["id", "label"] + ([f"p_{label}" for label in LABELS] if with_probs else [])
    lines = ["\t".join(header)]
    for i, (did, label) in enumerate(zip(ps.ids, ps.labels)):
        row = [did, label]
        if with_probs:
            row += [f"{p:.6f}" for p in ps.probs[i]]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def read_predictions(path, name: Optional[str] = None) -> PredictionSet:
    ids, labels, probs = [], [], []
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n").rstrip("\r").split("\t") for line in fh if line.strip()]
    if rows and rows[0][0] == "id":
        rows = rows[1:]
    width = None
    for lineno, row in enumerate(rows, start=2):
        if len(row) not in (2, 2 + len(LABELS)):
            raise DataError(f"{path}:{lineno}: expected 2 or {2 + len(LABELS)} columns")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"{path}:{lineno}: inconsistent column count")
        ids.append(row[0])
        labels.append(parse_label(row[1]))
        if len(row) > 2:
            probs.append([float(v) for v in row[2:]])
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return PredictionSet(name or Path(path).stem, ids, labels,
                         np.asarray(probs) if probs else None)
