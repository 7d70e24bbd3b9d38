"""Acceptance gate.

Each test prints one ``CRITERION n PASS|FAIL`` line (visible in ``pytest -v``
output and when the file is run directly) and then asserts the same verdict.
Runtime budgets are checked alongside correctness.

    python3 tests/test_acceptance.py      # just the eight verdict lines
"""
import itertools
import json
import sys
import time

import mpmath
import numpy as np
import pytest

from emodial.cli import main as cli
from emodial.data import LABELS, FeatureMatrix, build_vocab, concat_features, load_features, \
    split_shuffle, write_features
from emodial.ensemble import PredictionSet, majority_vote, vote_committee
from emodial.evaluation import micro_f1
from emodial.hpo import (Continuous, GPModel, SearchSpace, bo_loop, expected_improvement,
                         gp_posterior, kernel_matrix, log_marginal_likelihood, random_search)
from emodial.layers import LSTM, AttentionPool, MLPHead, MultiHeadSelfAttention, UTRSBlock
from emodial.models import ModelConfig, build_model, lr_loss_and_grads, lr_train
from emodial.numerics import grad_check
from emodial.synthetic import make_splits
from emodial.training import TrainOptions, predict_labels, train, train_committee

_printer = None


def report(n, ok, detail):
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    if _printer is not None:
        with _printer.disabled():
            print(line)
    else:
        print(line)
    sys.stdout.flush()
    return ok


@pytest.fixture(autouse=True)
def _verdict_printer(capsys):
    global _printer
    _printer = capsys
    yield
    _printer = None


# -- 1. metric oracle ---------------------------------------------------------

def confusion_f1(gold, pred):
    C = np.zeros((4, 4), dtype=np.int64)
    for g, p in zip(gold, pred):
        C[LABELS.index(g), LABELS.index(p)] += 1
    tp = sum(C[c, c] for c in range(3))
    fp = sum(C[:, c].sum() - C[c, c] for c in range(3))
    fn = sum(C[c, :].sum() - C[c, c] for c in range(3))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def test_criterion_1_metric_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2019)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        gold = [LABELS[i] for i in rng.integers(0, 4, n)]
        pred = [LABELS[i] for i in rng.integers(0, 4, n)]
        rep = micro_f1(gold, pred)
        worst = max(worst, *(abs(a - b) for a, b in
                             zip((rep.precision, rep.recall, rep.f1), confusion_f1(gold, pred))))
    ex = micro_f1(["happy", "sad", "angry", "others"], ["happy", "happy", "others", "others"])
    example_ok = (abs(ex.precision - 0.5) <= 1e-12 and abs(ex.recall - 1 / 3) <= 1e-12
                  and abs(ex.f1 - 0.4) <= 1e-12)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and example_ok and elapsed < 1.0
    assert report(1, ok, f"max |diff| {worst:.1e} over 1000 vectors, worked example "
                         f"P={ex.precision:.4f} R={ex.recall:.4f} F1={ex.f1:.4f}, {elapsed:.2f}s")


# -- 2. gradient suite --------------------------------------------------------

def _prefix_mask(rng, B, T):
    lengths = rng.integers(1, T + 1, size=B)
    lengths[0] = T
    return np.arange(T)[None, :] < lengths[:, None]


def _layer_error(layer, x, forward, backward, rng):
    """Grad-check params and input under the loss sum(R * out)."""
    R = rng.normal(size=forward(x)[0].shape)

    def fn():
        out, cache = forward(x)
        dx, grads = backward(R, cache)
        return float(np.sum(out * R)), dict(grads, __x=dx)

    return grad_check(fn, dict(layer.param_dict(), __x=x))


def _lstm_case(rng):
    layer, B, T = LSTM(3, 4, rng), 3, 4
    mask = _prefix_mask(rng, B, T)

    def fwd(x):
        (H, hT, cT), cache = layer.forward(x, mask)
        return np.concatenate([H.ravel(), hT.ravel(), cT.ravel()]), (cache, H.shape)

    def bwd(d, c):
        cache, shape = c
        n, h = int(np.prod(shape)), shape[0] * shape[2]
        dH, dh, dc = d[:n].reshape(shape), d[n:n + h].reshape(shape[0], -1), d[n + h:].reshape(shape[0], -1)
        (dx, _, _), grads = layer.backward((dH, dh, dc), cache)
        return dx, grads
    return layer, rng.normal(size=(B, T, 3)), fwd, bwd


def _masked_case(layer, rng, B, T, width):
    mask = _prefix_mask(rng, B, T)
    return layer, rng.normal(size=(B, T, width)), lambda x: layer.forward(x, mask), layer.backward


def _mha_case(rng):
    layer = MultiHeadSelfAttention(4, 2, rng, head_dim=3)
    for k in ("bq", "bk", "bv", "bo"):
        layer.params[k] = rng.normal(size=layer.params[k].shape)
    return _masked_case(layer, rng, 2, 4, 4)


def _mlp_case(rng):
    layer = MLPHead(3, 6, rng)
    return layer, rng.normal(size=(4, 3)), layer.forward, layer.backward


GRAD_CASES = {
    "lstm": _lstm_case,
    "attention_pool": lambda rng: _masked_case(AttentionPool(4, rng), rng, 3, 5, 4),
    "multi_head_attention": _mha_case,
    "utrs_block": lambda rng: _masked_case(UTRSBlock(4, 2, 5, hops=2, rng=rng), rng, 2, 3, 4),
    "mlp_head": _mlp_case,
}


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for name, make in GRAD_CASES.items():
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            errs.append(_layer_error(*make(rng), rng))
        worst[name] = max(errs)
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(7, 3)), rng.integers(0, 4, 7)
        W, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        errs.append(grad_check(lambda: lr_loss_and_grads(X, Y, W, b, 0.3), {"W": W, "b": b}))
    worst["logistic_regression"] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(2, ok, f"max relative error over 20 seeds: {detail}; {elapsed:.1f}s")


# -- 3. hierarchical vs flat ----------------------------------------------------

C3_MODEL = dict(encoder="lstm", hidden_size=64, embed_dim=32, dropout=0.2)
C3_TRAIN = dict(epochs=30, batch_size=32, lr=3e-3, patience=30)


def _test_f1(architecture, seed, train_all, test, vocab):
    tr, va = split_shuffle(train_all, seed, 0.1)
    model = build_model(ModelConfig(architecture=architecture, seed=seed, **C3_MODEL), vocab)
    model, _ = train(model, tr, va, TrainOptions(seed=seed, **C3_TRAIN))
    labels, _ = predict_labels(model, test)
    return micro_f1([d.label for d in test], labels).f1


def test_criterion_3_hierarchical_vs_flat():
    start = time.perf_counter()
    train_all, test = make_splits(2000, 500, seed=0)
    vocab = build_vocab(train_all)
    hier = [_test_f1("hierarchical", s, train_all, test, vocab) for s in range(3)]
    flat = [_test_f1("flat", s, train_all, test, vocab) for s in range(3)]
    elapsed = time.perf_counter() - start
    ok = min(hier) >= 0.90 and np.median(hier) >= np.median(flat) and elapsed < 300
    assert report(3, ok, f"hierarchical test F1 {np.round(hier, 4).tolist()} (median "
                         f"{np.median(hier):.4f}), flat {np.round(flat, 4).tolist()} (median "
                         f"{np.median(flat):.4f}); {elapsed:.0f}s")


# -- 4. voting --------------------------------------------------------------------

def vote_oracle(votes):
    counts = {lab: votes.count(lab) for lab in set(votes)}
    top = max(counts.values())
    winners = [lab for lab, c in counts.items() if c == top]
    return winners[0] if len(winners) == 1 else "others"


def test_criterion_4_voting():
    start = time.perf_counter()
    cases = mismatches = 0
    for k in range(1, 5):
        for votes in itertools.product(LABELS, repeat=k):
            cases += 1
            mismatches += majority_vote(list(votes)) != vote_oracle(list(votes))
    tie = majority_vote(["happy", "sad", "angry"])
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and tie == "others" and elapsed < 1.0
    assert report(4, ok, f"{cases} vote tuples, {mismatches} mismatches, "
                         f"[happy,sad,angry] -> {tie}; {elapsed:.3f}s")


# -- 5. GP correctness ----------------------------------------------------------

def test_criterion_5_gp():
    mpmath.mp.dps = 40
    post_err = 0.0
    for n in range(1, 21):
        rng = np.random.default_rng(n)
        X = rng.random((n, 2))
        y = np.sin(5 * X[:, 0]) + X[:, 1]
        ls, sf2, sn2, mean = np.array([0.4, 0.7]), 1.3, 1e-3, float(y.mean())
        Xs = rng.random((25, 2))
        mu, var = gp_posterior(GPModel(X, y, ls, sf2, sn2, mean).factorize(), Xs)
        K = kernel_matrix(X, X, ls, sf2) + sn2 * np.eye(n)
        Ks = kernel_matrix(Xs, X, ls, sf2)
        mu_d = Ks @ np.linalg.solve(K, y - mean) + mean
        var_d = sf2 - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
        post_err = max(post_err, np.abs(mu - mu_d).max(), np.abs(var - var_d).max())

    grad_err = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.random((9, 2))
        yc = np.sin(4 * X[:, 0]) * X[:, 1] + 0.05 * rng.normal(size=9)
        yc -= yc.mean()
        theta = np.log([0.3 + rng.random(), 0.3 + rng.random(), 0.5 + rng.random(), 0.01 + 0.1 * rng.random()])
        _, grad = log_marginal_likelihood(theta, X, yc)
        for i in range(len(theta)):
            step = np.zeros_like(theta)
            step[i] = 1e-6
            fd = (log_marginal_likelihood(theta + step, X, yc)[0]
                  - log_marginal_likelihood(theta - step, X, yc)[0]) / 2e-6
            grad_err = max(grad_err, abs(fd - grad[i]) / max(1.0, abs(fd)))

    phi0 = expected_improvement(0.55, 1.0, 0.5, 0.05)
    ref = expected_improvement(1.0, 0.5, 0.5, 0.05)
    z = (mpmath.mpf(1) - mpmath.mpf("0.5") - mpmath.mpf("0.05")) / mpmath.mpf("0.5")
    oracle = float(mpmath.mpf("0.45") * mpmath.ncdf(z) + mpmath.mpf("0.5") * mpmath.npdf(z))
    zero = expected_improvement(3.0, 0.0, 0.5, 0.05)
    ok = (post_err <= 1e-8 and grad_err <= 1e-5 and abs(phi0 - 0.398942) < 5e-7
          and abs(ref - oracle) <= 1e-14 and abs(ref - 0.50022) < 5e-6 and zero == 0.0)
    assert report(5, ok, f"posterior max err {post_err:.1e} (n<=20), LML grad err {grad_err:.1e}, "
                         f"EI phi(0) {phi0:.6f}, reference case {ref:.6f} vs oracle {oracle:.6f}, "
                         f"EI(sigma=0) {zero}")


# -- 6. BO efficacy -------------------------------------------------------------

def objective_1d(config):
    return 1.0 - (config["x"] - 0.3) ** 2


def test_criterion_6_bo_efficacy():
    start = time.perf_counter()
    space = SearchSpace([Continuous("x", 0.0, 1.0)])
    located, bo_best, rs_best = 0, [], []
    for seed in range(10):
        bo = bo_loop(objective_1d, space, n_iter=20, n_init=5, seed=seed, xi=0.05)
        assert len(bo.history) == 25
        located += any(abs(t.config["x"] - 0.3) < 0.05 for t in bo.history)
        bo_best.append(bo.best_so_far[-1])
        rs_best.append(random_search(objective_1d, space, 25, seed=seed).best_so_far[-1])
    elapsed = time.perf_counter() - start
    ok = located >= 9 and np.median(bo_best) > np.median(rs_best) and elapsed < 30
    assert report(6, ok, f"located in {located}/10 seeds, median best BO {np.median(bo_best):.7f} vs "
                         f"random {np.median(rs_best):.7f}; {elapsed:.1f}s")


# -- 7. reproducibility and committee ---------------------------------------------

C7_MODEL = dict(architecture="hierarchical", encoder="lstm", hidden_size=16, embed_dim=16, dropout=0.1)
C7_TRAIN = dict(epochs=12, lr=3e-3, patience=12)


def test_criterion_7_reproducibility_and_committee(tmp_path):
    start = time.perf_counter()
    data = tmp_path / "data"
    assert cli(["prepare", "--out", str(data), "--n-train", "300", "--n-test", "100"]) == 0
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"data": {"train": str(data / "train.tsv")},
                                  "model": {"hidden_size": 16, "embed_dim": 16},
                                  "train": {"epochs": 3}}))
    preds = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli(["train", "--config", str(config), "--seed", "11", "--out", str(out)]) == 0
        assert cli(["predict", "--checkpoint", str(out / "model.ckpt"), "--corpus",
                    str(data / "test.tsv"), "--out", str(out / "test.pred.tsv")]) == 0
        preds.append((out / "test.pred.tsv").read_bytes())
    identical = preds[0] == preds[1]

    train_all, test = make_splits(600, 200, seed=0)
    vocab = build_vocab(train_all)
    gold = [d.label for d in test]
    rows = []
    for seed in range(3):
        members = train_committee(train_all, ModelConfig(seed=seed, **C7_MODEL), vocab,
                                  TrainOptions(**C7_TRAIN), k=10, base_seed=100 * seed)
        sets, scores = [], []
        for m in members:
            labels, probs = predict_labels(m.model, test)
            sets.append(PredictionSet(str(m.seed), [d.id for d in test], labels, probs))
            scores.append(micro_f1(gold, labels).f1)
        committee = micro_f1(gold, vote_committee(sets).labels).f1
        rows.append((committee, float(np.median(scores))))
    elapsed = time.perf_counter() - start
    ok = identical and all(c >= m for c, m in rows)
    detail = "; ".join(f"seed {s}: committee {c:.4f} vs member median {m:.4f}"
                       for s, (c, m) in enumerate(rows))
    assert report(7, ok, f"train->predict byte-identical: {identical}; {detail}; {elapsed:.0f}s")


# -- 8. feature LR ----------------------------------------------------------------

def test_criterion_8_feature_lr(tmp_path):
    rng = np.random.default_rng(8)
    n = 240
    y = rng.integers(0, 4, n)
    ids = [f"ex{i}" for i in range(n)]
    # two "encoders": each alone is separable, with different widths
    for name, width in (("elmo", 6), ("deepmoji", 4)):
        centers = rng.normal(size=(4, width)) * 4
        write_features(FeatureMatrix(ids, centers[y] + 0.3 * rng.normal(size=(n, width))),
                       tmp_path / f"{name}.tsv")
    parts = [load_features(tmp_path / f"{name}.tsv") for name in ("elmo", "deepmoji")]
    fm = concat_features(parts)
    labels = [LABELS[i] for i in y]
    first, second = lr_train(fm, labels), lr_train(fm, labels)
    pred = [LABELS[i] for i in first.predict_proba(fm.values).argmax(1)]
    accuracy = float(np.mean([p == g for p, g in zip(pred, labels)]))
    deterministic = np.array_equal(first.W, second.W) and np.array_equal(first.b, second.b)
    shape_ok = fm.values.shape == (n, 10) and first.W.shape == (10, 4) and fm.ids == ids
    ok = accuracy == 1.0 and first.grad_norm < 1e-6 and deterministic and shape_ok
    assert report(8, ok, f"train accuracy {accuracy:.3f}, grad norm {first.grad_norm:.1e}, "
                         f"concat shape {fm.values.shape}, deterministic: {deterministic}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
