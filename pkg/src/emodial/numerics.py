"""Dense array primitives, the gradient-check harness, Adam and the Noam schedule.

numpy arrays serve as the tensor type throughout the package.  Every layer in
:mod:`emodial.layers` is built from the functions here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # expit is overflow-safe and keeps relative precision in both tails
    return expit(x)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def elementwise(x: np.ndarray, f: str) -> np.ndarray:
    try:
        fn = ACTIVATIONS[f]
    except KeyError:
        raise ValueError(f"unknown activation {f!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(np.asarray(x))


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout.

    Returns the output and the scaled keep-mask (``None`` when the call is an
    identity), so the backward pass is ``grad * mask``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def grad_check(fn: Callable[[], Tuple[float, Dict[str, np.ndarray]]],
               arrays: Dict[str, np.ndarray], epsilon: float = 1e-4,
               floor: float = 1e-6) -> float:
    """Compare analytic gradients with central finite differences.

    ``fn()`` evaluates the scalar loss at the current contents of ``arrays``
    and returns ``(loss, grads)`` with ``grads`` keyed like ``arrays``.  Each
    coordinate of each array is perturbed in place and restored.  Returns the
    largest ``|a - n| / max(|a| + |n|, floor)`` seen.
    """
    loss, analytic = fn()
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite at the check point")
    worst = 0.0
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64 arrays")
        grad = analytic[name]
        if grad.shape != arr.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus, _ = fn()
            flat[i] = orig - epsilon
            minus, _ = fn()
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(f"{name}[{i}]: non-finite loss under perturbation")
            numeric = (plus - minus) / (2.0 * epsilon)
            a = gflat[i]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected Adam update, applied to ``param`` in place."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


def noam_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    if step < 1:
        raise ValueError("noam_lr is defined for step >= 1")
    if warmup < 1 or d_model < 1:
        raise ValueError("d_model and warmup must be positive")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class Schedule:
    """Learning-rate schedule: ``fixed`` uses ``lr``; ``noam`` scales by ``lr`` as a factor."""

    kind: str = "fixed"
    lr: float = 1e-3
    d_model: int = 512
    warmup: int = 4000

    def __post_init__(self):
        if self.kind not in ("fixed", "noam"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    def __call__(self, step: int) -> float:
        if self.kind == "fixed":
            return self.lr
        return noam_lr(step, self.d_model, self.warmup, factor=self.lr)


@dataclass
class Adam:
    """Adam over a dict of named parameters."""

    schedule: Schedule = field(default_factory=Schedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    states: Dict[str, AdamState] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
        self.step_count += 1
        lr = self.schedule(self.step_count)
        scale = 1.0
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, g in grads.items():
            state = self.states.get(name)
            if state is None:
                state = self.states[name] = AdamState.like(
                    params[name], beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            adam_step(params[name], g * g.dtype.type(scale) if scale != 1.0 else g, state, lr)
        return lr
