"""Micro-F1 over the three emotion classes, per-class scores, and model agreement."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .data import EMOTIONS, LABEL_INDEX, LABELS


def _prf(tp: int, fp: int, fn: int):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_class: Dict[str, ClassScore] = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def _check(gold: Sequence[str], pred: Sequence[str]):
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} labels, predictions {len(pred)}")
    if not gold:
        raise ValueError("cannot score an empty prediction set")
    for y in list(gold) + list(pred):
        if y not in LABEL_INDEX:
            raise ValueError(f"unknown label {y!r}")


def per_class_f1(gold: Sequence[str], pred: Sequence[str]) -> Dict[str, ClassScore]:
    _check(gold, pred)
    scores = {}
    for c in EMOTIONS:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if p == c and g != c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        scores[c] = ClassScore(tp, fp, fn, *_prf(tp, fp, fn))
    return scores


def micro_f1(gold: Sequence[str], pred: Sequence[str]) -> EvalReport:
    """Shared-task score: TP/FP/FN summed over happy, sad and angry; others ignored."""
    per = per_class_f1(gold, pred)
    tp = sum(s.tp for s in per.values())
    fp = sum(s.fp for s in per.values())
    fn = sum(s.fn for s in per.values())
    return EvalReport(tp, fp, fn, *_prf(tp, fp, fn), per_class=per, n=len(gold))


def one_hot(pred: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(pred), len(LABELS)))
    out[np.arange(len(pred)), [LABEL_INDEX[p] for p in pred]] = 1.0
    return out


def pearson_agreement(pred_a: Sequence[str], pred_b: Sequence[str]) -> float:
    """Pearson r between the flattened one-hot encodings of two prediction lists."""
    if len(pred_a) != len(pred_b):
        raise ValueError("prediction lists differ in length")
    if len(pred_a) < 2:
        raise ValueError("need at least two predictions")
    a = one_hot(pred_a).ravel()
    b = one_hot(pred_b).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0.0:
        warnings.warn("zero-variance predictions; correlation undefined", RuntimeWarning)
        return float("nan")
    return float(np.dot(a, b) / denom)


def agreement_matrix(preds: Sequence[Sequence[str]]) -> np.ndarray:
    k = len(preds)
    M = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            M[i, j] = M[j, i] = pearson_agreement(preds[i], preds[j])
    return M


def format_matrix_tsv(names: List[str], M: np.ndarray) -> str:
    lines = ["\t".join(["model"] + list(names))]
    for name, row in zip(names, M):
        lines.append("\t".join([name] + [f"{v:.6f}" for v in row]))
    return "\n".join(lines) + "\n"
