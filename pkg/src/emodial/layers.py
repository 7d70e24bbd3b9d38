"""Trainable building blocks with hand-written backward passes.

Each layer keeps its weights in ``self.params`` and exposes ``forward(...)``
returning ``(output, cache)`` and ``backward(grad_output, cache)`` returning
``(grad_input, grads)`` where ``grads`` is keyed like ``named_params()``.
Sequence inputs are batched as ``[B, T, d]`` with a boolean mask ``[B, T]``.
"""
from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .numerics import ShapeError, relu, sigmoid, softmax


def _prefixed(prefix: str, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


class Layer:
    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self.children: Dict[str, "Layer"] = {}

    def named_params(self, prefix: str = "", include_frozen: bool = False
                     ) -> Iterator[Tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_params(f"{prefix}{cname}.", include_frozen)

    def param_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.named_params())

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def _init(self, rng, shape, scale):
        return rng.uniform(-scale, scale, size=shape).astype(self.dtype)


def lengths_from_mask(mask: np.ndarray) -> np.ndarray:
    lengths = mask.sum(axis=1)
    prefix = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(prefix, mask):
        raise ValueError("mask must be a right-padded prefix mask")
    return lengths


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64):
        super().__init__(dtype)
        scale = np.sqrt(6.0 / (d_in + d_out))
        self.params = {"W": self._init(rng, (d_in, d_out), scale),
                       "b": np.zeros(d_out, dtype=self.dtype)}

    def forward(self, x):
        W = self.params["W"]
        if x.shape[-1] != W.shape[0]:
            raise ShapeError(f"Linear expects last dim {W.shape[0]}, got {x.shape}")
        return x @ W + self.params["b"], x

    def backward(self, dy, x):
        W = self.params["W"]
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads = {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}
        return dy @ W.T, grads


class Embedding(Layer):
    """Row lookup; the ``<pad>`` row (index 0) stays zero and receives no gradient."""

    def __init__(self, vocab_size: int, dim: int, rng=None, weights=None, freeze=False,
                 dtype=np.float64):
        super().__init__(dtype)
        if weights is None:
            weights = rng.normal(0.0, 0.1, size=(vocab_size, dim))
        weights = np.array(weights, dtype=self.dtype)
        weights[0] = 0.0
        self.freeze = freeze
        self.params = {"E": weights}

    def named_params(self, prefix="", include_frozen=False):
        if self.freeze and not include_frozen:
            return iter(())
        return super().named_params(prefix, include_frozen)

    def forward(self, ids):
        E = self.params["E"]
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
            raise IndexError(f"token id out of range [0, {E.shape[0]})")
        return E[ids], ids

    def backward(self, dy, ids):
        if self.freeze:
            return None, {}
        dE = np.zeros_like(self.params["E"])
        np.add.at(dE, ids.reshape(-1), dy.reshape(-1, dy.shape[-1]))
        dE[0] = 0.0
        return None, {"E": dE}


class LSTM(Layer):
    """Single-direction LSTM; gates packed as [input, forget, output, candidate].

    Masked steps carry ``(h, c)`` through unchanged and emit zero outputs.
    """

    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float64):
        super().__init__(dtype)
        self.hidden = hidden
        scale = 1.0 / np.sqrt(hidden)
        b = np.zeros(4 * hidden, dtype=self.dtype)
        b[hidden:2 * hidden] = 1.0
        self.params = {"W": self._init(rng, (d_in, 4 * hidden), scale),
                       "U": self._init(rng, (hidden, 4 * hidden), scale),
                       "b": b}

    def forward(self, X, mask=None, h0=None, c0=None):
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        B, T, d = X.shape
        if d != W.shape[0]:
            raise ShapeError(f"LSTM expects input dim {W.shape[0]}, got {d}")
        h = self.hidden
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        m = mask.astype(self.dtype)[:, :, None]
        h_t = np.zeros((B, h), self.dtype) if h0 is None else h0
        c_t = np.zeros((B, h), self.dtype) if c0 is None else c0
        XW = (X.reshape(B * T, d) @ W).reshape(B, T, 4 * h) + b
        H = np.zeros((B, T, h), self.dtype)
        steps = []
        for t in range(T):
            z = XW[:, t] + h_t @ U
            i = sigmoid(z[:, :h])
            f = sigmoid(z[:, h:2 * h])
            o = sigmoid(z[:, 2 * h:3 * h])
            g = np.tanh(z[:, 3 * h:])
            c_new = f * c_t + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            mt = m[:, t]
            steps.append((h_t, c_t, i, f, o, g, tc))
            H[:, t] = mt * h_new
            h_t = mt * h_new + (1 - mt) * h_t
            c_t = mt * c_new + (1 - mt) * c_t
        cache = (X, m, steps)
        return (H, h_t, c_t), cache

    def backward(self, douts, cache):
        dH, dhT, dcT = douts
        X, m, steps = cache
        W, U = self.params["W"], self.params["U"]
        B, T, d = X.shape
        h = self.hidden
        dh = np.zeros((B, h), self.dtype) if dhT is None else dhT.copy()
        dc = np.zeros((B, h), self.dtype) if dcT is None else dcT.copy()
        dZ = np.zeros((B, T, 4 * h), self.dtype)
        dU = np.zeros_like(U)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, i, f, o, g, tc = steps[t]
            mt = m[:, t]
            dh_new = mt * dh
            if dH is not None:
                dh_new = dh_new + mt * dH[:, t]
            dc_new = mt * dc
            dc_new = dc_new + dh_new * o * (1 - tc * tc)
            dz = np.concatenate([dc_new * g * i * (1 - i),
                                 dc_new * c_prev * f * (1 - f),
                                 dh_new * tc * o * (1 - o),
                                 dc_new * i * (1 - g * g)], axis=1)
            dZ[:, t] = dz
            dU += h_prev.T @ dz
            dh = dz @ U.T + (1 - mt) * dh
            dc = dc_new * f + (1 - mt) * dc
        dZ2 = dZ.reshape(B * T, 4 * h)
        grads = {"W": X.reshape(B * T, d).T @ dZ2, "U": dU, "b": dZ2.sum(axis=0)}
        dX = (dZ2 @ W.T).reshape(B, T, d)
        return (dX, dh, dc), grads


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


class BiLSTM(Layer):
    """Forward and backward LSTMs over right-padded sequences, outputs concatenated."""

    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float64):
        super().__init__(dtype)
        self.hidden = hidden
        self.children = {"fwd": LSTM(d_in, hidden, rng, dtype), "bwd": LSTM(d_in, hidden, rng, dtype)}

    def forward(self, X, mask=None):
        B, T, _ = X.shape
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        lengths = lengths_from_mask(mask)
        rev = _reverse_index(lengths, T)
        rows = np.arange(B)[:, None]
        (Hf, hf, _), cf = self.children["fwd"].forward(X, mask)
        (Hr, hr, _), cr = self.children["bwd"].forward(X[rows, rev], mask)
        H = np.concatenate([Hf, Hr[rows, rev]], axis=2)
        return (H, np.concatenate([hf, hr], axis=1), None), (cf, cr, rev)

    def backward(self, douts, cache):
        dH, dhT, _ = douts
        cf, cr, rev = cache
        h = self.hidden
        B = rev.shape[0]
        rows = np.arange(B)[:, None]
        dHf = dHr = None
        if dH is not None:
            dHf = dH[:, :, :h]
            dHr = dH[:, :, h:][rows, rev]
        dhf = dhr = None
        if dhT is not None:
            dhf, dhr = dhT[:, :h], dhT[:, h:]
        (dXf, _, _), gf = self.children["fwd"].backward((dHf, dhf, None), cf)
        (dXr, _, _), gr = self.children["bwd"].backward((dHr, dhr, None), cr)
        grads = _prefixed("fwd", gf)
        grads.update(_prefixed("bwd", gr))
        return dXf + dXr[rows, rev], grads


class AttentionPool(Layer):
    """Additive attention: score_t = v . tanh(W h_t), softmax over unmasked t."""

    def __init__(self, hidden: int, rng, dtype=np.float64):
        super().__init__(dtype)
        scale = np.sqrt(3.0 / hidden)
        self.params = {"W": self._init(rng, (hidden, hidden), scale),
                       "v": self._init(rng, (hidden,), scale)}

    def forward(self, H, mask=None):
        W, v = self.params["W"], self.params["v"]
        B, T, h = H.shape
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        if not np.all(mask.any(axis=1)):
            raise ValueError("attention_pool: a sequence has every position masked")
        u = np.tanh(H @ W.T)
        e = u @ v
        e = np.where(mask, e, -np.inf)
        alpha = softmax(e, axis=1)
        s = np.einsum("bt,bth->bh", alpha, H)
        return s, (H, mask, u, alpha)

    def backward(self, ds, cache):
        H, mask, u, alpha = cache
        W, v = self.params["W"], self.params["v"]
        h = H.shape[2]
        dalpha = np.einsum("bth,bh->bt", H, ds)
        dH = alpha[:, :, None] * ds[:, None, :]
        de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        de = np.where(mask, de, 0.0)
        dv = np.einsum("bt,bth->h", de, u)
        da = de[:, :, None] * v * (1 - u * u)
        dW = da.reshape(-1, h).T @ H.reshape(-1, h)
        dH = dH + da @ W
        return dH, {"W": dW, "v": dv}


class MultiHeadSelfAttention(Layer):
    """Scaled dot-product self-attention with ``n_heads`` heads.

    The attention width is ``n_heads * head_dim``; it defaults to the model
    width, which must then split evenly across heads.
    """

    def __init__(self, d_model: int, n_heads: int, rng, head_dim: Optional[int] = None,
                 dtype=np.float64):
        super().__init__(dtype)
        if head_dim is None:
            if d_model % n_heads:
                raise ShapeError(f"model width {d_model} is not divisible into {n_heads} heads")
            head_dim = d_model // n_heads
        self.n_heads, self.head_dim = n_heads, head_dim
        inner = n_heads * head_dim
        s_in = np.sqrt(6.0 / (d_model + inner))
        self.params = {
            "Wq": self._init(rng, (d_model, inner), s_in), "bq": np.zeros(inner, self.dtype),
            "Wk": self._init(rng, (d_model, inner), s_in), "bk": np.zeros(inner, self.dtype),
            "Wv": self._init(rng, (d_model, inner), s_in), "bv": np.zeros(inner, self.dtype),
            "Wo": self._init(rng, (inner, d_model), s_in), "bo": np.zeros(d_model, self.dtype),
        }

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, _, T, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, self.n_heads * self.head_dim)

    def forward(self, X, mask=None):
        p = self.params
        B, T, d = X.shape
        if d != p["Wq"].shape[0]:
            raise ShapeError(f"attention expects width {p['Wq'].shape[0]}, got {d}")
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        if not np.all(mask.any(axis=1)):
            raise ValueError("self-attention: a sequence has every position masked")
        Q = self._split(X @ p["Wq"] + p["bq"])
        K = self._split(X @ p["Wk"] + p["bk"])
        V = self._split(X @ p["Wv"] + p["bv"])
        scale = self.dtype.type(1.0 / np.sqrt(self.head_dim))
        S = (Q @ K.transpose(0, 1, 3, 2)) * scale
        S = np.where(mask[:, None, None, :], S, -np.inf)
        A = softmax(S, axis=-1)
        O = self._merge(A @ V)
        Y = O @ p["Wo"] + p["bo"]
        return Y, (X, Q, K, V, A, O, scale)

    def backward(self, dY, cache):
        X, Q, K, V, A, O, scale = cache
        p = self.params
        B, T, d = X.shape
        inner = self.n_heads * self.head_dim
        dY2 = dY.reshape(-1, d)
        grads = {"Wo": O.reshape(-1, inner).T @ dY2, "bo": dY2.sum(axis=0)}
        dO = self._split(dY @ p["Wo"].T)
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dO
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        X2 = X.reshape(-1, d)
        dX = np.zeros_like(X)
        for name, dP in (("q", dQ), ("k", dK), ("v", dV)):
            dP2 = self._merge(dP).reshape(-1, inner)
            grads["W" + name] = X2.T @ dP2
            grads["b" + name] = dP2.sum(axis=0)
            dX += (dP2 @ p["W" + name].T).reshape(B, T, d)
        return dX, grads


class LayerNorm(Layer):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float64):
        super().__init__(dtype)
        self.eps = eps
        self.params = {"gamma": np.ones(dim, self.dtype), "beta": np.zeros(dim, self.dtype)}

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        return xhat * self.params["gamma"] + self.params["beta"], (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        d = xhat.shape[-1]
        grads = {"gamma": (dy * xhat).reshape(-1, d).sum(axis=0),
                 "beta": dy.reshape(-1, d).sum(axis=0)}
        dxhat = dy * self.params["gamma"]
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, grads


class FeedForward(Layer):
    """Position-wise relu feed-forward; equivalent to a width-1 convolution with ``n_filters`` filters."""

    def __init__(self, d_model: int, n_filters: int, rng, dtype=np.float64):
        super().__init__(dtype)
        self.children = {"inner": Linear(d_model, n_filters, rng, dtype),
                         "outer": Linear(n_filters, d_model, rng, dtype)}

    def forward(self, x):
        a, c1 = self.children["inner"].forward(x)
        r = relu(a)
        y, c2 = self.children["outer"].forward(r)
        return y, (c1, a, c2)

    def backward(self, dy, cache):
        c1, a, c2 = cache
        dr, g2 = self.children["outer"].backward(dy, c2)
        dx, g1 = self.children["inner"].backward(dr * (a > 0), c1)
        grads = _prefixed("inner", g1)
        grads.update(_prefixed("outer", g2))
        return dx, grads


def timing_signal(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encoding of positions ``0..length-1``: sin on even, cos on odd columns."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


class UTRSBlock(Layer):
    """Universal-transformer block: one post-norm transformer layer applied ``hops`` times
    with the same weights, adding position and hop encodings before every hop."""

    def __init__(self, d_model: int, n_heads: int, n_filters: int, hops: int, rng,
                 head_dim: Optional[int] = None, dtype=np.float64):
        super().__init__(dtype)
        if hops < 1:
            raise ValueError("a universal-transformer block needs hops >= 1")
        self.d_model, self.hops = d_model, hops
        self.children = {
            "attn": MultiHeadSelfAttention(d_model, n_heads, rng, head_dim, dtype),
            "ln1": LayerNorm(d_model, dtype=dtype),
            "ffn": FeedForward(d_model, n_filters, rng, dtype),
            "ln2": LayerNorm(d_model, dtype=dtype),
        }
        self._hop_signal = timing_signal(hops + 1, d_model, dtype)

    def layer_forward(self, X, mask):
        """One transformer layer without encodings."""
        c = self.children
        a, ca = c["attn"].forward(X, mask)
        X1, cl1 = c["ln1"].forward(X + a)
        f, cf = c["ffn"].forward(X1)
        X2, cl2 = c["ln2"].forward(X1 + f)
        return X2, (ca, cl1, cf, cl2)

    def layer_backward(self, dX2, cache):
        c = self.children
        ca, cl1, cf, cl2 = cache
        dsum2, g_ln2 = c["ln2"].backward(dX2, cl2)
        df, g_ffn = c["ffn"].backward(dsum2, cf)
        dX1 = dsum2 + df
        dsum1, g_ln1 = c["ln1"].backward(dX1, cl1)
        da, g_attn = c["attn"].backward(dsum1, ca)
        grads = {}
        for name, g in (("attn", g_attn), ("ln1", g_ln1), ("ffn", g_ffn), ("ln2", g_ln2)):
            grads.update(_prefixed(name, g))
        return dsum1 + da, grads

    def forward(self, X, mask=None):
        B, T, d = X.shape
        if d != self.d_model:
            raise ShapeError(f"UTRS block expects width {self.d_model}, got {d}")
        pos = timing_signal(T, d, self.dtype)
        caches = []
        for hop in range(1, self.hops + 1):
            X = X + pos + self._hop_signal[hop]
            X, cache = self.layer_forward(X, mask)
            caches.append(cache)
        return X, caches

    def backward(self, dY, caches):
        grads: Dict[str, np.ndarray] = {}
        for cache in reversed(caches):
            dY, g = self.layer_backward(dY, cache)
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        return dY, grads


class MLPHead(Layer):
    """One relu hidden layer followed by a linear map to the four class logits."""

    def __init__(self, d_in: int, hidden: int, rng, n_out: int = 4, dtype=np.float64):
        super().__init__(dtype)
        self.children = {"hidden": Linear(d_in, hidden, rng, dtype),
                         "out": Linear(hidden, n_out, rng, dtype)}

    def forward(self, x):
        a, c1 = self.children["hidden"].forward(x)
        logits, c2 = self.children["out"].forward(relu(a))
        return logits, (c1, a, c2)

    def backward(self, dlogits, cache):
        c1, a, c2 = cache
        dr, g2 = self.children["out"].backward(dlogits, c2)
        dx, g1 = self.children["hidden"].backward(dr * (a > 0), c1)
        grads = _prefixed("hidden", g1)
        grads.update(_prefixed("out", g2))
        return dx, grads
