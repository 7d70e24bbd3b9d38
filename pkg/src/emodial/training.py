"""Loss, mini-batch training with early stopping, and the shuffle-split committee."""
from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LABEL_INDEX, LABELS, Dialogue, Vocabulary, split_shuffle
from .evaluation import micro_f1
from .models import DialogueClassifier, ModelConfig, build_model
from .numerics import Adam, NonFiniteError, Schedule, log_softmax

log = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, gold: str) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[LABEL_INDEX[gold]])


def batch_cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), y]))
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / logits.dtype.type(n)


@dataclass
class TrainOptions:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    schedule: str = "fixed"
    d_model: Optional[int] = None
    warmup: int = 4000
    patience: int = 5
    clip_norm: Optional[float] = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ValueError("epochs and batch_size must be >= 1 and patience >= 0")
        Schedule(self.schedule)  # validates the name

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainOptions":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train option keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_f1: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def predict_labels(model: DialogueClassifier, dialogues: Sequence[Dialogue],
                   batch_size: int = 64) -> Tuple[List[str], np.ndarray]:
    probs = model.predict_proba(dialogues, batch_size)
    return [LABELS[i] for i in probs.argmax(axis=1)], probs


def train(model: DialogueClassifier, train_set: Sequence[Dialogue], val_set: Sequence[Dialogue],
          opts: TrainOptions = TrainOptions()) -> Tuple[DialogueClassifier, TrainReport]:
    """Mini-batch Adam with per-epoch validation micro-F1 and early stopping.

    The model is left holding the parameters of the best epoch (earliest on
    ties).  Raises :class:`NonFiniteError` if the loss diverges.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if any(d.label is None for d in train_set) or any(d.label is None for d in val_set):
        raise ValueError("training needs labeled dialogues")
    start = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    drop_rng = np.random.default_rng([opts.seed, 1])
    encoded = model.encode(train_set)
    y = np.array([LABEL_INDEX[d.label] for d in train_set])
    gold_val = [d.label for d in val_set]
    schedule = Schedule(opts.schedule, opts.lr, opts.d_model or model.config.hidden_size, opts.warmup)
    optim = Adam(schedule, clip_norm=opts.clip_norm)
    params = model.param_dict()
    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(encoded))
        total = 0.0
        for s in range(0, len(order), opts.batch_size):
            idx = order[s:s + opts.batch_size]
            logits, cache = model.forward([encoded[i] for i in idx], training=True, rng=drop_rng)
            loss, dlogits = batch_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss became non-finite at epoch {epoch}, batch {s // opts.batch_size}")
            grads = model.backward(dlogits, cache)
            optim.step(params, grads)
            total += loss * len(idx)
        report.train_loss.append(total / len(encoded))
        pred, _ = predict_labels(model, val_set)
        f1 = micro_f1(gold_val, pred).f1
        report.val_f1.append(f1)
        log.debug("epoch %d loss %.4f val F1 %.4f", epoch, report.train_loss[-1], f1)
        if epoch == 1 or f1 > report.best_val_f1:
            report.best_epoch, report.best_val_f1 = epoch, f1
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
            if f1 >= 1.0:
                break  # nothing later can beat it
        else:
            stale += 1
            if stale > opts.patience:
                break
    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - start
    return model, report


@dataclass
class CommitteeMember:
    seed: int
    model: DialogueClassifier
    report: TrainReport


def _train_member(args) -> CommitteeMember:
    dataset, config, opts, vocab, embeddings, seed, val_fraction = args
    tr, va = split_shuffle(dataset, seed, val_fraction)
    model = build_model(replace(config, seed=seed), vocab, embeddings)
    model, report = train(model, tr, va, replace(opts, seed=seed))
    return CommitteeMember(seed, model, report)


def train_committee(dataset: Sequence[Dialogue], config: ModelConfig, vocab: Vocabulary,
                    opts: TrainOptions = TrainOptions(), k: int = 10, val_fraction: float = 0.1,
                    base_seed: int = 0, embeddings: Optional[np.ndarray] = None,
                    jobs: int = 1) -> List[CommitteeMember]:
    """Train ``k`` models, member ``i`` on the split drawn with seed ``base_seed + i``.

    Members are independent; with ``jobs > 1`` they train in worker processes
    and come back in seed order.
    """
    if k < 1:
        raise ValueError("a committee needs k >= 1")
    tasks = [(list(dataset), config, opts, vocab, embeddings, base_seed + i, val_fraction)
             for i in range(k)]
    if jobs > 1 and k > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, k)) as pool:
            return list(pool.map(_train_member, tasks))
    return [_train_member(t) for t in tasks]
