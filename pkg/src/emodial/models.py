"""Flat and hierarchical dialogue classifiers, the feature LR, and checkpoints."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .data import (LABEL_INDEX, SEP_ID, UNK_ID, Dialogue, FeatureMatrix, Vocabulary,
                   turn_ids)
from .layers import (BiLSTM, Embedding, LSTM, AttentionPool, Layer, Linear, MLPHead,
                     UTRSBlock)
from .numerics import ShapeError, dropout, log_softmax, softmax

ARCHITECTURES = ("flat", "hierarchical")
ENCODERS = ("lstm", "utrs")


@dataclass
class ModelConfig:
    architecture: str = "hierarchical"
    encoder: str = "lstm"
    hidden_size: int = 64
    embed_dim: int = 64
    dropout: float = 0.2
    n_heads: int = 4
    head_dim: Optional[int] = None
    hops: int = 1
    n_filters: int = 50
    bidirectional: bool = False
    mlp_hidden: Optional[int] = None
    word_vectors: Optional[str] = None
    freeze_embeddings: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.hidden_size < 1 or self.embed_dim < 1 or self.hops < 1 or self.n_heads < 1:
            raise ValueError("hidden_size, embed_dim, hops and n_heads must be >= 1")
        if self.encoder == "utrs" and self.head_dim is None and self.hidden_size % self.n_heads:
            raise ValueError(f"hidden_size {self.hidden_size} does not split into {self.n_heads} heads; "
                             "set head_dim to decouple the attention width")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> Dict:
        return asdict(self)


# Configurations named in the original experiments; too large for desk-scale runs.
PRESETS: Dict[str, Dict] = {
    "hlstm-1000": dict(architecture="hierarchical", encoder="lstm", hidden_size=1000, dropout=0.5),
    "hlstm-glove-1500": dict(architecture="hierarchical", encoder="lstm", hidden_size=1500,
                             dropout=0.2, embed_dim=300, bidirectional=True),
    "hlstm-glove-emo2vec-1000": dict(architecture="hierarchical", encoder="lstm", hidden_size=1000,
                                     dropout=0.4, embed_dim=400),
    "hutrs-gp": dict(architecture="hierarchical", encoder="utrs", hidden_size=488, hops=1,
                     n_heads=10, head_dim=48, dropout=0.2),
    "hbert-context": dict(architecture="hierarchical", encoder="utrs", hidden_size=40, hops=6,
                          n_heads=4, head_dim=10, n_filters=50, dropout=0.3),
}


class SequenceEncoder(Layer):
    """LSTM (optionally bidirectional) or projection + UTRS block over a masked batch.

    ``forward`` returns the per-position states and a final summary vector:
    the last hidden state for LSTMs, the output at the last valid position
    for UTRS.
    """

    def __init__(self, kind: str, d_in: int, cfg: ModelConfig, rng, dtype):
        super().__init__(dtype)
        self.kind = kind
        h = cfg.hidden_size
        if kind == "lstm":
            self.bidirectional = cfg.bidirectional
            rnn = BiLSTM(d_in, h, rng, dtype) if cfg.bidirectional else LSTM(d_in, h, rng, dtype)
            self.children = {"rnn": rnn}
            self.out_dim = 2 * h if cfg.bidirectional else h
        else:
            self.children = {"proj": Linear(d_in, h, rng, dtype),
                             "block": UTRSBlock(h, cfg.n_heads, cfg.n_filters, cfg.hops, rng,
                                                cfg.head_dim, dtype)}
            self.out_dim = h

    def forward(self, X, mask):
        if self.kind == "lstm":
            (H, hT, _), cache = self.children["rnn"].forward(X, mask)
            return H, hT, cache
        P, cp = self.children["proj"].forward(X)
        H, cb = self.children["block"].forward(P, mask)
        last = mask.sum(axis=1) - 1
        rows = np.arange(X.shape[0])
        return H, H[rows, last], (cp, cb, last)

    def backward(self, dH, dfinal, cache):
        if self.kind == "lstm":
            dX, grads = self.children["rnn"].backward((dH, dfinal, None), cache)
            if not self.bidirectional:
                dX = dX[0]
            return dX, {f"rnn.{k}": v for k, v in grads.items()}
        cp, cb, last = cache
        B = last.shape[0]
        dH = np.zeros((B, cp.shape[1], self.out_dim), self.dtype) if dH is None else dH.copy()
        if dfinal is not None:
            dH[np.arange(B), last] += dfinal
        dP, gb = self.children["block"].backward(dH, cb)
        dX, gp = self.children["proj"].backward(dP, cp)
        grads = {f"block.{k}": v for k, v in gb.items()}
        grads.update({f"proj.{k}": v for k, v in gp.items()})
        return dX, grads


def pad_batch(seqs: Sequence[Sequence[int]]):
    T = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


class DialogueClassifier(Layer):
    """Common machinery for the flat and hierarchical end-to-end models."""

    architecture = ""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 embeddings: Optional[np.ndarray] = None):
        super().__init__(config.dtype)
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        if embeddings is not None and embeddings.shape != (len(vocab), config.embed_dim):
            raise ShapeError(f"embedding matrix {embeddings.shape} does not match "
                             f"vocab {len(vocab)} x embed_dim {config.embed_dim}")
        self.children["embed"] = Embedding(len(vocab), config.embed_dim, rng, embeddings,
                                           config.freeze_embeddings, self.dtype)
        self._build(rng)

    def _build(self, rng):
        raise NotImplementedError

    def encode(self, dialogues: Sequence[Dialogue]) -> List[List[List[int]]]:
        """Token ids per turn; empty turns become a single ``<unk>``."""
        return [[ids or [UNK_ID] for ids in turn_ids(d, self.vocab)] for d in dialogues]

    def forward(self, encoded, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dlogits, cache):
        raise NotImplementedError

    def state_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.named_params(include_frozen=True))

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError(f"checkpoint parameters differ: missing {sorted(set(own) - set(state))}, "
                             f"unexpected {sorted(set(state) - set(own))}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def logits(self, dialogues: Sequence[Dialogue], batch_size: int = 64) -> np.ndarray:
        encoded = self.encode(dialogues)
        out = []
        for start in range(0, len(encoded), batch_size):
            lg, _ = self.forward(encoded[start:start + batch_size])
            out.append(lg)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 4), self.dtype)

    def predict_proba(self, dialogues, batch_size: int = 64) -> np.ndarray:
        return softmax(self.logits(dialogues, batch_size), axis=1)

    def _head(self, pooled, training, rng):
        x, keep = dropout(pooled, self.config.dropout, rng, training)
        logits, ch = self.children["head"].forward(x)
        return logits, (keep, ch)

    def _head_backward(self, dlogits, cache, grads):
        keep, ch = cache
        dx, g = self.children["head"].backward(dlogits, ch)
        grads.update({f"head.{k}": v for k, v in g.items()})
        return dx if keep is None else dx * keep


class FlatClassifier(DialogueClassifier):
    """Turns joined with ``<sep>`` into one sequence, attention-pooled, then an MLP."""

    architecture = "flat"

    def _build(self, rng):
        cfg = self.config
        enc = SequenceEncoder(cfg.encoder, cfg.embed_dim, cfg, rng, self.dtype)
        self.children["encoder"] = enc
        self.children["pool"] = AttentionPool(enc.out_dim, rng, self.dtype)
        self.children["head"] = MLPHead(enc.out_dim, cfg.mlp_hidden or cfg.hidden_size, rng,
                                        dtype=self.dtype)

    def forward(self, encoded, training=False, rng=None):
        seqs = [t1 + [SEP_ID] + t2 + [SEP_ID] + t3 for t1, t2, t3 in encoded]
        ids, mask = pad_batch(seqs)
        c = self.children
        X, ce = c["embed"].forward(ids)
        H, _, cenc = c["encoder"].forward(X, mask)
        s, cp = c["pool"].forward(H, mask)
        logits, chead = self._head(s, training, rng)
        return logits, {"ids": ce, "enc": cenc, "pool": cp, "head": chead, "pooled": s}

    def backward(self, dlogits, cache):
        c = self.children
        grads: Dict[str, np.ndarray] = {}
        ds = self._head_backward(dlogits, cache["head"], grads)
        dH, g = c["pool"].backward(ds, cache["pool"])
        grads.update({f"pool.{k}": v for k, v in g.items()})
        dX, g = c["encoder"].backward(dH, None, cache["enc"])
        grads.update({f"encoder.{k}": v for k, v in g.items()})
        _, g = c["embed"].backward(dX, cache["ids"])
        grads.update({f"embed.{k}": v for k, v in g.items()})
        return grads


class HierarchicalClassifier(DialogueClassifier):
    """Word-level encoder + attention per turn, then a turn-level encoder of the
    same family over the three turn vectors; its final state feeds the MLP."""

    architecture = "hierarchical"

    def _build(self, rng):
        cfg = self.config
        word = SequenceEncoder(cfg.encoder, cfg.embed_dim, cfg, rng, self.dtype)
        turn = SequenceEncoder(cfg.encoder, word.out_dim, cfg, rng, self.dtype)
        self.children["word_encoder"] = word
        self.children["pool"] = AttentionPool(word.out_dim, rng, self.dtype)
        self.children["turn_encoder"] = turn
        self.children["head"] = MLPHead(turn.out_dim, cfg.mlp_hidden or cfg.hidden_size, rng,
                                        dtype=self.dtype)

    def forward(self, encoded, training=False, rng=None):
        B = len(encoded)
        ids, mask = pad_batch([turn for d in encoded for turn in d])
        c = self.children
        X, ce = c["embed"].forward(ids)
        H, _, cw = c["word_encoder"].forward(X, mask)
        s, cp = c["pool"].forward(H, mask)
        turns = s.reshape(B, 3, -1)
        turn_mask = np.ones((B, 3), dtype=bool)
        _, final, ct = c["turn_encoder"].forward(turns, turn_mask)
        logits, chead = self._head(final, training, rng)
        return logits, {"ids": ce, "word": cw, "pool": cp, "turn": ct, "head": chead,
                        "turn_vectors": turns, "final": final}

    def backward(self, dlogits, cache):
        c = self.children
        grads: Dict[str, np.ndarray] = {}
        dfinal = self._head_backward(dlogits, cache["head"], grads)
        dturns, g = c["turn_encoder"].backward(None, dfinal, cache["turn"])
        grads.update({f"turn_encoder.{k}": v for k, v in g.items()})
        ds = dturns.reshape(-1, dturns.shape[-1])
        dH, g = c["pool"].backward(ds, cache["pool"])
        grads.update({f"pool.{k}": v for k, v in g.items()})
        dX, g = c["word_encoder"].backward(dH, None, cache["word"])
        grads.update({f"word_encoder.{k}": v for k, v in g.items()})
        _, g = c["embed"].backward(dX, cache["ids"])
        grads.update({f"embed.{k}": v for k, v in g.items()})
        return grads


def build_model(config: ModelConfig, vocab: Vocabulary,
                embeddings: Optional[np.ndarray] = None) -> DialogueClassifier:
    cls = FlatClassifier if config.architecture == "flat" else HierarchicalClassifier
    return cls(config, vocab, embeddings)


# -- feature-based logistic regression ---------------------------------------

def lr_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"feature width {x.shape[-1]} does not match weights {W.shape}")
    return x @ W + b


def lr_loss_and_grads(X, Y, W, b, l2):
    """Mean cross-entropy plus ``l2/2 * ||W||^2``; ``Y`` holds label indices."""
    n = X.shape[0]
    logits = lr_forward(X, W, b)
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(n), Y].mean() + 0.5 * l2 * np.sum(W * W)
    d = np.exp(logp)
    d[np.arange(n), Y] -= 1.0
    d /= n
    return loss, {"W": X.T @ d + l2 * W, "b": d.sum(axis=0)}


@dataclass
class LogisticRegression:
    W: np.ndarray
    b: np.ndarray
    l2: float
    losses: List[float]
    grad_norm: float

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    def logits(self, X: np.ndarray) -> np.ndarray:
        return lr_forward(X, self.W, self.b)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X), axis=1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


def lr_train(features: FeatureMatrix | np.ndarray, labels: Sequence[str], l2: Optional[float] = None,
             max_iter: int = 5000, tol: float = 1e-6) -> LogisticRegression:
    """Fit multinomial LR with L-BFGS on the analytic gradient.

    ``l2`` defaults to ``1/n``.  The loss is strictly convex, so the optimum
    is unique; iteration stops once the gradient norm falls below ``tol``.
    ``losses`` records the loss after every accepted iterate.
    """
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, np.float64)
    n, k = X.shape
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} feature rows")
    if n == 0:
        raise ValueError("no training rows")
    Y = np.array([LABEL_INDEX[y] for y in labels])
    if l2 is None:
        l2 = 1.0 / n

    def unpack(theta):
        return theta[:4 * k].reshape(k, 4), theta[4 * k:]

    def objective(theta):
        W, b = unpack(theta)
        loss, g = lr_loss_and_grads(X, Y, W, b, l2)
        return loss, np.concatenate([g["W"].ravel(), g["b"]])

    losses: List[float] = [float(objective(np.zeros(4 * k + 4))[0])]

    def record(intermediate_result):
        losses.append(float(intermediate_result.fun))

    # gtol bounds the largest component, so the norm test below is the real stopping rule
    res = minimize(objective, np.zeros(4 * k + 4), jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": max_iter, "gtol": tol / np.sqrt(4 * k + 4), "ftol": 0.0,
                            "maxcor": 20})
    W, b = unpack(res.x)
    _, grad = objective(res.x)
    return LogisticRegression(W.copy(), b.copy(), l2, losses, float(np.linalg.norm(grad)))


# -- checkpoints --------------------------------------------------------------

MAGIC = "emodial-checkpoint 1"


def _serialize(kind: str, header: Dict, state: Dict[str, np.ndarray]) -> bytes:
    lines = [MAGIC, json.dumps(dict(header, kind=kind), sort_keys=True, ensure_ascii=False)]
    payloads = []
    for name, arr in state.items():
        lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}\tfloat32")
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    lines.append("---")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payloads)


def checkpoint_bytes(model) -> bytes:
    if isinstance(model, LogisticRegression):
        return _serialize("lr", {"l2": model.l2}, model.state_dict())
    return _serialize("neural", {"config": model.config.to_dict(), "vocab": model.vocab.to_list()},
                      model.state_dict())


def save_checkpoint(model, path) -> None:
    from .io import atomic_write_bytes
    atomic_write_bytes(path, checkpoint_bytes(model))


def parse_checkpoint(blob: bytes):
    buf = io.BytesIO(blob)
    if buf.readline().decode("utf-8").rstrip("\n") != MAGIC:
        raise ValueError("not an emodial checkpoint")
    header = json.loads(buf.readline().decode("utf-8"))
    entries = []
    while True:
        line = buf.readline().decode("utf-8").rstrip("\n")
        if line == "---":
            break
        if not line:
            raise ValueError("truncated checkpoint manifest")
        name, shape, dtype = line.split("\t")
        if dtype != "float32":
            raise ValueError(f"unsupported dtype {dtype!r}")
        entries.append((name, tuple(int(s) for s in shape.split(",") if s)))
    state = {}
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"truncated payload for {name}")
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return header, state


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header, state = parse_checkpoint(fh.read())
    if header["kind"] == "lr":
        return LogisticRegression(state["W"].astype(np.float64), state["b"].astype(np.float64),
                                  header["l2"], [], float("nan"))
    config = ModelConfig.from_dict(header["config"])
    config.word_vectors = None  # weights come from the checkpoint
    model = build_model(config, Vocabulary.from_list(header["vocab"]))
    model.load_state_dict(state)
    model.config = ModelConfig.from_dict(header["config"])
    return model
