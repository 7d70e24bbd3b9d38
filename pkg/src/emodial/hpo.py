"""Gaussian-process Bayesian optimization with Expected Improvement.

Search points live in the unit hypercube.  Continuous dimensions are min-max
scaled, discrete ones sit on evenly spaced grid points and decode to the
nearest grid value.  The surrogate is an ARD squared-exponential GP whose
hyper-parameters maximize the log marginal likelihood.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import erfcx, ndtr
from scipy.stats import qmc

log = logging.getLogger(__name__)


# -- search space -------------------------------------------------------------

@dataclass(frozen=True)
class Continuous:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"{self.name}: need low < high, got [{self.low}, {self.high}]")

    def encode(self, value) -> float:
        return (float(value) - self.low) / (self.high - self.low)

    def decode(self, u: float) -> float:
        return self.low + float(np.clip(u, 0.0, 1.0)) * (self.high - self.low)

    def snap(self, u: float) -> float:
        return float(np.clip(u, 0.0, 1.0))


@dataclass(frozen=True)
class Discrete:
    name: str
    values: tuple

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError(f"{self.name}: discrete dimension needs at least one value")

    @property
    def grid(self) -> np.ndarray:
        n = len(self.values)
        return np.array([0.5]) if n == 1 else np.linspace(0.0, 1.0, n)

    def index(self, u: float) -> int:
        return int(np.argmin(np.abs(self.grid - u)))

    def encode(self, value) -> float:
        try:
            return float(self.grid[self.values.index(value)])
        except ValueError:
            raise ValueError(f"{self.name}: {value!r} is not one of {self.values}") from None

    def decode(self, u: float):
        return self.values[self.index(u)]

    def snap(self, u: float) -> float:
        return float(self.grid[self.index(u)])


def Integer(name: str, low: int, high: int) -> Discrete:
    if not low < high:
        raise ValueError(f"{name}: need low < high")
    return Discrete(name, tuple(range(int(low), int(high) + 1)))


Dimension = Union[Continuous, Discrete]


class SearchSpace:
    def __init__(self, dims: Sequence[Dimension]):
        if not dims:
            raise ValueError("search space has no dimensions")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")
        self.dims = list(dims)

    def __len__(self) -> int:
        return len(self.dims)

    def encode(self, config: Dict[str, Any]) -> np.ndarray:
        return np.array([d.encode(config[d.name]) for d in self.dims])

    def decode(self, x) -> Dict[str, Any]:
        return {d.name: d.decode(u) for d, u in zip(self.dims, x)}

    def snap(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float)
        flat = X.reshape(-1, len(self.dims))
        for j, d in enumerate(self.dims):
            flat[:, j] = [d.snap(u) for u in flat[:, j]]
        return X

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.snap(rng.random((n, len(self.dims))))

    @classmethod
    def from_dict(cls, definition: Dict[str, Dict]) -> "SearchSpace":
        """Build from ``{name: {"type": "continuous"|"int"|"discrete", ...}}``."""
        dims: List[Dimension] = []
        for name, d in definition.items():
            kind = d.get("type")
            extra = set(d) - {"type", "low", "high", "values"}
            if extra:
                raise ValueError(f"{name}: unknown keys {sorted(extra)}")
            if kind == "continuous":
                dims.append(Continuous(name, float(d["low"]), float(d["high"])))
            elif kind == "int":
                dims.append(Integer(name, d["low"], d["high"]))
            elif kind == "discrete":
                dims.append(Discrete(name, tuple(d["values"])))
            else:
                raise ValueError(f"{name}: unknown dimension type {kind!r}")
        return cls(dims)


DEFAULT_SPACE = {
    "hidden_size": {"type": "int", "low": 64, "high": 512},
    "hops": {"type": "int", "low": 1, "high": 4},
    "n_heads": {"type": "discrete", "values": [2, 4, 10]},
    "dropout": {"type": "continuous", "low": 0.1, "high": 0.6},
    "warmup": {"type": "int", "low": 500, "high": 4000},
}


# -- Gaussian process -----------------------------------------------------------

def kernel(x, x2, lengthscales, signal_var: float) -> float:
    ls = np.asarray(lengthscales, dtype=float)
    if np.any(ls <= 0) or signal_var <= 0:
        raise ValueError("lengthscales and signal variance must be positive")
    r = (np.asarray(x, float) - np.asarray(x2, float)) / ls
    return float(signal_var * np.exp(-0.5 * np.dot(r, r)))


def kernel_matrix(X1: np.ndarray, X2: np.ndarray, lengthscales, signal_var: float) -> np.ndarray:
    ls = np.asarray(lengthscales, dtype=float)
    if np.any(ls <= 0) or signal_var <= 0:
        raise ValueError("lengthscales and signal variance must be positive")
    A = X1 / ls
    B = X2 / ls
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def stable_cholesky(K: np.ndarray, max_jitter: float = 1e-2):
    """Cholesky factor of ``K + jitter*I``; jitter starts at 0, then 1e-10 rising tenfold."""
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter:
                raise


@dataclass
class GPModel:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    mean: float = 0.0
    L: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    jitter: float = 0.0
    lml: float = float("nan")

    def factorize(self) -> "GPModel":
        K = kernel_matrix(self.X, self.X, self.lengthscales, self.signal_var)
        K[np.diag_indices_from(K)] += self.noise_var
        self.L, self.jitter = stable_cholesky(K)
        yc = self.y - self.mean
        self.alpha = solve_triangular(self.L.T, solve_triangular(self.L, yc, lower=True), lower=False)
        self.lml = float(-0.5 * yc @ self.alpha - np.sum(np.log(np.diag(self.L)))
                         - 0.5 * len(yc) * math.log(2 * math.pi))
        return self


def unpack_theta(theta: np.ndarray, dim: int):
    return np.exp(theta[:dim]), float(np.exp(theta[dim])), float(np.exp(theta[dim + 1]))


def log_marginal_likelihood(theta: np.ndarray, X: np.ndarray, yc: np.ndarray,
                            noise_var: Optional[float] = None):
    """LML of mean-centered targets and its gradient w.r.t. ``theta``.

    ``theta = [log lengthscale_1..D, log signal_var, log noise_var]``; when
    ``noise_var`` is given it is held fixed and the last entry is dropped.
    """
    n, D = X.shape
    ls, sf2 = np.exp(theta[:D]), float(np.exp(theta[D]))
    sn2 = float(np.exp(theta[D + 1])) if noise_var is None else noise_var
    Kf = kernel_matrix(X, X, ls, sf2)
    K = Kf + sn2 * np.eye(n)
    L, _ = stable_cholesky(K)
    alpha = solve_triangular(L.T, solve_triangular(L, yc, lower=True), lower=False)
    lml = -0.5 * yc @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    W = np.outer(alpha, alpha) - Linv.T @ Linv
    grad = np.empty(D + 1 if noise_var is not None else D + 2)
    for d in range(D):
        diff2 = (X[:, d][:, None] - X[:, d][None, :]) ** 2
        grad[d] = 0.5 * np.sum(W * Kf * diff2) / ls[d] ** 2
    grad[D] = 0.5 * np.sum(W * Kf)
    if noise_var is None:
        grad[D + 1] = 0.5 * sn2 * np.trace(W)
    return float(lml), grad


FALLBACK = dict(lengthscale=0.2, signal_var=1.0, noise_var=1e-6)

# Lengthscales in unit-cube coordinates; variances relative to the target variance.
# Capping signal/noise at 1e8 keeps K well enough conditioned for accurate posterior variances.
LOG_BOUNDS = dict(lengthscale=(math.log(1e-2), math.log(1e1)),
                  signal_var=(math.log(1e-3), math.log(1e2)),
                  noise_var=(math.log(1e-9), math.log(1e1)))


def gp_fit(X, y, restarts: int = 3, rng: Optional[np.random.Generator] = None,
           noise_var: Optional[float] = None) -> GPModel:
    """Maximize the LML over log hyper-parameters from several starting points.

    The first start is a data-driven guess, the rest are drawn uniformly in
    log space within bounds scaled by the target variance.  ``noise_var``
    pins the noise instead of fitting it.  Targets that are all equal give a
    fixed fallback model.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, D = X.shape
    if n < 2:
        raise ValueError("gp_fit needs at least two observations")
    if len(y) != n:
        raise ValueError("X and y differ in length")
    if noise_var is not None and noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    rng = rng or np.random.default_rng(0)
    mean = float(y.mean())
    yc = y - mean
    if np.allclose(yc, 0.0):
        return GPModel(X, y, np.full(D, FALLBACK["lengthscale"]), FALLBACK["signal_var"],
                       FALLBACK["noise_var"] if noise_var is None else noise_var, mean).factorize()

    log_var = math.log(float(np.var(yc)))
    bounds = [LOG_BOUNDS["lengthscale"]] * D
    bounds.append(tuple(b + log_var for b in LOG_BOUNDS["signal_var"]))
    if noise_var is None:
        bounds.append(tuple(b + log_var for b in LOG_BOUNDS["noise_var"]))

    def objective(t):
        try:
            lml, g = log_marginal_likelihood(t, X, yc, noise_var)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(t)
        return -lml, -g

    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    starts = [np.array([math.log(0.3)] * D + [log_var]
                       + ([log_var + math.log(1e-2)] if noise_var is None else []))]
    for _ in range(max(restarts, 1) - 1):
        starts.append(lo + rng.random(len(bounds)) * (hi - lo))
    best = None
    for t0 in starts:
        res = minimize(objective, np.clip(t0, lo, hi), jac=True, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    ls, sf2 = np.exp(best.x[:D]), float(np.exp(best.x[D]))
    sn2 = float(np.exp(best.x[D + 1])) if noise_var is None else noise_var
    return GPModel(X, y, ls, sf2, sn2, mean).factorize()


def gp_posterior(model: GPModel, Xs):
    """Posterior mean and latent-function variance (clamped at 0) at ``Xs``."""
    if model.L is None:
        raise ValueError("GP model has not been fitted")
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    Ks = kernel_matrix(Xs, model.X, model.lengthscales, model.signal_var)
    mu = Ks @ model.alpha + model.mean
    v = solve_triangular(model.L, Ks.T, lower=True)
    var = model.signal_var - np.sum(v * v, axis=0)
    return mu, np.maximum(var, 0.0)


# -- acquisition ------------------------------------------------------------------

def expected_improvement(mu, sigma, f_best: float, xi: float = 0.05):
    """EI for maximization, ``E[max(f - f_best - xi, 0)]``; zero where ``sigma == 0``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    gain = mu - f_best - xi
    safe = np.where(sigma > 0, sigma, 1.0)
    z = gain / safe
    # EI = sigma * h(z) with h(u) = u Phi(u) + phi(u), and h(z) = z + h(-z).  For z > 0
    # the gain is added to a small positive correction instead of being scaled by a
    # Phi(z) that has rounded to just below 1.
    ei = np.where(z > 0, gain + safe * _h(-np.abs(z)), safe * _h(-np.abs(z)))
    ei = np.where(sigma > 0, np.maximum(ei, 0.0), 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _h(u):
    """``u * Phi(u) + phi(u)`` for ``u <= 0``, without cancellation in the left tail."""
    phi = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
    with np.errstate(invalid="ignore"):
        mills = math.sqrt(math.pi / 2) * erfcx(-u / math.sqrt(2))  # Phi(u) / phi(u)
        tail = phi * (1.0 + u * mills)
    return np.where(u > -1.0, u * ndtr(u) + phi, np.maximum(tail, 0.0))


def log_expected_improvement(mu, sigma, f_best: float, xi: float = 0.05):
    """``log EI``, accurate where EI itself underflows (``-inf`` where ``sigma == 0``).

    Uses ``EI = sigma * phi(z) * (1 + z * Phi(z) / phi(z))`` with the Mills ratio
    taken from ``erfcx`` so the bracket keeps its relative precision for very
    negative ``z``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    z = (mu - f_best - xi) / safe
    log_phi = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        mills = math.sqrt(math.pi / 2) * erfcx(-z / math.sqrt(2))  # Phi(z) / phi(z)
        tail = log_phi + np.log1p(z * mills)
        # beyond ~1e6 standard deviations the bracket is 1/z^2 to double precision
        tail = np.where(z < -1e6, log_phi - 2.0 * np.log(np.abs(z)), tail)
        head = np.log(np.maximum(z * ndtr(z) + np.exp(log_phi), 1e-300))
    out = np.where(z > -1.0, head, tail) + np.log(safe)
    out = np.where(pos, out, -np.inf)
    return float(out) if out.ndim == 0 else out


def _ei_at(model, X, f_best, xi):
    """Log EI at ``X``; ranking on the log keeps candidates distinguishable when EI underflows."""
    mu, var = gp_posterior(model, X)
    return log_expected_improvement(mu, np.sqrt(var), f_best, xi)


def _refine(model, space, x, ei, f_best, xi, steps=(0.05, 0.01, 0.002), max_passes=20):
    x = x.copy()
    for _ in range(max_passes):
        improved = False
        for j, dim in enumerate(space.dims):
            if isinstance(dim, Discrete):
                k = dim.index(x[j])
                moves = [dim.grid[i] for i in (k - 1, k + 1) if 0 <= i < len(dim.grid)]
            else:
                moves = [float(np.clip(x[j] + s, 0.0, 1.0)) for st in steps for s in (st, -st)]
            trial = np.repeat(x[None, :], len(moves), axis=0)
            trial[:, j] = moves
            if not len(moves):
                continue
            vals = np.atleast_1d(_ei_at(model, trial, f_best, xi))
            b = int(np.argmax(vals))
            if vals[b] > ei:
                x, ei, improved = trial[b], float(vals[b]), True
        if not improved:
            break
    return x, ei


def propose_next(model: GPModel, space: SearchSpace, rng: np.random.Generator,
                 f_best: Optional[float] = None, xi: float = 0.05,
                 n_candidates: int = 1000, n_refine: int = 10) -> np.ndarray:
    """Maximize EI over random candidates, polishing the best few coordinate-wise."""
    if f_best is None:
        f_best = float(np.max(model.y))
    cands = space.sample(rng, n_candidates)
    ei = np.atleast_1d(_ei_at(model, cands, f_best, xi))
    for i in np.argsort(-ei, kind="stable")[:n_refine]:
        cands[i], ei[i] = _refine(model, space, cands[i], float(ei[i]), f_best, xi)
    return cands[int(np.argmax(ei))]


# -- optimization loop --------------------------------------------------------------

@dataclass
class Trial:
    x: np.ndarray
    config: Dict[str, Any]
    y: float
    f_best: float = float("nan")
    failed: bool = False
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"x": [float(v) for v in self.x], "config": _jsonable(self.config), "y": self.y,
                "f_best": self.f_best, "failed": self.failed, "error": self.error}


def _jsonable(config):
    return {k: (v.item() if hasattr(v, "item") else v) for k, v in config.items()}


@dataclass
class BOResult:
    best: Trial
    history: List[Trial] = field(default_factory=list)

    @property
    def best_so_far(self) -> List[float]:
        return [t.f_best for t in self.history]


def _evaluate(objective, space, x, history):
    config = space.decode(x)
    try:
        y = float(objective(config))
        if not math.isfinite(y):
            raise FloatingPointError(f"objective returned {y}")
        trial = Trial(x, config, y)
    except Exception as exc:  # a failed evaluation is data, not a crash
        log.warning("objective failed at %s: %s", config, exc)
        trial = Trial(x, config, 0.0, failed=True, error=f"{type(exc).__name__}: {exc}")
    prev = history[-1].f_best if history else -math.inf
    trial.f_best = max(prev, trial.y)
    history.append(trial)
    return trial


def latin_hypercube(space: SearchSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    return space.snap(qmc.LatinHypercube(d=len(space), seed=rng).random(n))


def bo_loop(objective: Callable[[Dict[str, Any]], float], space: SearchSpace, n_iter: int = 100,
            n_init: int = 5, seed: int = 0, xi: float = 0.05, restarts: int = 3,
            callback: Optional[Callable[[Trial], None]] = None) -> BOResult:
    """Latin-hypercube start, then ``n_iter`` rounds of fit / propose / evaluate."""
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if n_iter > 0 and n_init < 2:
        raise ValueError("the GP needs n_init >= 2 before iterating")
    rng = np.random.default_rng(seed)
    history: List[Trial] = []
    for x in latin_hypercube(space, n_init, rng):
        t = _evaluate(objective, space, x, history)
        if callback:
            callback(t)
    for _ in range(n_iter):
        X = np.array([t.x for t in history])
        y = np.array([t.y for t in history])
        # standardized targets: xi is measured in standard deviations of the observations
        z = (y - y.mean()) / (y.std() or 1.0)
        model = gp_fit(X, z, restarts=restarts, rng=rng)
        x = propose_next(model, space, rng, float(z.max()), xi)
        t = _evaluate(objective, space, x, history)
        if callback:
            callback(t)
    best = max(history, key=lambda t: t.y)
    return BOResult(best, history)


def random_search(objective, space: SearchSpace, n: int, seed: int = 0) -> BOResult:
    """Uniform random baseline with the same bookkeeping as :func:`bo_loop`."""
    rng = np.random.default_rng(seed)
    history: List[Trial] = []
    for x in space.sample(rng, n):
        _evaluate(objective, space, x, history)
    return BOResult(max(history, key=lambda t: t.y), history)
