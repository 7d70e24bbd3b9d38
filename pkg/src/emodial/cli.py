"""Command-line entry point: ``emodial <command> ...``.

Every command exits 0 on success.  Failures print one JSON object
``{"error": ..., "message": ...}`` on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as D
from .ensemble import (PredictionSet, final_ensemble, format_predictions, read_predictions,
                       vote_committee)
from .evaluation import agreement_matrix, format_matrix_tsv, micro_f1
from .hpo import DEFAULT_SPACE, SearchSpace, bo_loop
from .io import atomic_write_text, write_json, write_manifest
from .models import (PRESETS, LogisticRegression, ModelConfig, build_model, load_checkpoint,
                     lr_train, save_checkpoint)
from .training import TrainOptions, predict_labels, train, train_committee

log = logging.getLogger("emodial")

SECTIONS = {
    "data": {"train", "dev", "test", "val_fraction", "min_count"},
    "model": None,  # checked by ModelConfig
    "train": None,  # checked by TrainOptions
    "committee": {"k", "base_seed"},
    "hpo": {"space", "n_iter", "n_init", "seed", "xi", "restarts"},
    "out_dir": None,
    "preset": None,
}


class ConfigError(ValueError):
    pass


def resolve_path(p: str) -> Path:
    """Relative paths that do not exist are retried under ``$DEL_DATA_DIR``."""
    path = Path(p)
    if not path.is_absolute() and not path.exists() and os.environ.get("DEL_DATA_DIR"):
        alt = Path(os.environ["DEL_DATA_DIR"]) / path
        if alt.exists():
            return alt
    return path


def load_run_config(path) -> Dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTIONS.items():
        if allowed is not None and section in cfg:
            extra = set(cfg[section]) - allowed
            if extra:
                raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")
    if "preset" in cfg:
        if cfg["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
        cfg["model"] = dict(PRESETS[cfg["preset"]], **cfg.get("model", {}))
    ModelConfig.from_dict(cfg.get("model", {}))
    TrainOptions.from_dict(cfg.get("train", {}))
    data = cfg.setdefault("data", {})
    if "train" not in data:
        raise ConfigError("data.train is required")
    for key in ("train", "dev", "test"):
        if data.get(key) is not None:
            resolved = resolve_path(data[key])
            if not resolved.exists():
                raise ConfigError(f"data.{key}: {data[key]} does not exist")
            data[key] = str(resolved)
    wv = cfg.get("model", {}).get("word_vectors")
    if wv is not None:
        resolved = resolve_path(wv)
        if not resolved.exists():
            raise ConfigError(f"model.word_vectors: {wv} does not exist")
        cfg["model"]["word_vectors"] = str(resolved)
    return cfg


def _apply_seed(cfg: Dict, seed: Optional[int]) -> Dict:
    if seed is not None:
        cfg.setdefault("model", {})["seed"] = seed
        cfg.setdefault("train", {})["seed"] = seed
        cfg.setdefault("committee", {})["base_seed"] = seed
        cfg.setdefault("hpo", {})["seed"] = seed
    return cfg


def _out_dir(args, cfg: Dict) -> Path:
    out = Path(args.out or cfg.get("out_dir") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare_data(cfg: Dict):
    data = cfg["data"]
    train_all = D.load_tsv(data["train"], labeled=True)
    vf = data.get("val_fraction", 0.1)
    split_seed = cfg.get("train", {}).get("seed", 0)
    if data.get("dev"):
        tr, va = train_all, D.load_tsv(data["dev"], labeled=True)
    else:
        tr, va = D.split_shuffle(train_all, split_seed, vf)
    vocab = D.build_vocab(train_all, data.get("min_count", 1))
    return train_all, tr, va, vocab


def _embeddings(mcfg: ModelConfig, vocab):
    if mcfg.word_vectors is None:
        return None
    return D.load_word_vectors(mcfg.word_vectors, vocab, mcfg.embed_dim, seed=mcfg.seed,
                               dtype=np.dtype(mcfg.dtype))


def _prediction_set(name, dialogues, labels, probs) -> PredictionSet:
    return PredictionSet(name, [d.id for d in dialogues], labels, probs)


def cmd_prepare(args) -> List[str]:
    from .synthetic import make_splits
    out = Path(args.out)
    tr, te = make_splits(args.n_train, args.n_test, args.seed)
    atomic_write_text(out / "train.tsv", D.format_tsv(tr))
    atomic_write_text(out / "test.tsv", D.format_tsv(te))
    outputs = ["train.tsv", "test.tsv"]
    write_manifest(out, "prepare", vars_of(args), {"seed": args.seed}, outputs)
    return outputs


def cmd_stats(args):
    stats = D.corpus_stats(D.load_tsv(resolve_path(args.corpus), labeled=not args.unlabeled))
    text = json.dumps(stats, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_train(args):
    cfg = _apply_seed(load_run_config(args.config), args.seed)
    out = _out_dir(args, cfg)
    train_all, tr, va, vocab = _prepare_data(cfg)
    mcfg = ModelConfig.from_dict(cfg.get("model", {}))
    opts = TrainOptions.from_dict(cfg.get("train", {}))
    model = build_model(mcfg, vocab, _embeddings(mcfg, vocab))
    model, report = train(model, tr, va, opts)
    save_checkpoint(model, out / "model.ckpt")
    write_json(out / "report.json", _report_dict(report))
    from .plotting import plot_training
    plot_training(report, out / "training.png")
    outputs = ["model.ckpt", "report.json", "training.png"]
    if cfg["data"].get("test"):
        outputs += _predict_and_score(model, cfg["data"]["test"], out, "test")
    write_manifest(out, "train", cfg, {"model": mcfg.seed, "train": opts.seed}, outputs,
                   timing={"train_seconds": report.wall_time})
    log.info("best epoch %d, validation micro-F1 %.4f", report.best_epoch, report.best_val_f1)


def _report_dict(report) -> Dict:
    d = report.to_dict()
    d.pop("wall_time")  # kept in the manifest so reports are reproducible
    return d


def _predict_and_score(model, corpus_path, out: Path, stem: str) -> List[str]:
    corpus = D.load_tsv(corpus_path, labeled=True)
    labels, probs = predict_labels(model, corpus)
    ps = _prediction_set(stem, corpus, labels, probs)
    atomic_write_text(out / f"{stem}.pred.tsv", format_predictions(ps))
    write_json(out / f"{stem}.eval.json", micro_f1([d.label for d in corpus], labels).to_dict())
    return [f"{stem}.pred.tsv", f"{stem}.eval.json"]


def cmd_committee(args):
    cfg = _apply_seed(load_run_config(args.config), args.seed)
    out = _out_dir(args, cfg)
    data = cfg["data"]
    train_all = D.load_tsv(data["train"], labeled=True)
    vocab = D.build_vocab(train_all, data.get("min_count", 1))
    mcfg = ModelConfig.from_dict(cfg.get("model", {}))
    opts = TrainOptions.from_dict(cfg.get("train", {}))
    com = cfg.get("committee", {})
    k, base_seed = com.get("k", 10), com.get("base_seed", 0)
    members = train_committee(train_all, mcfg, vocab, opts, k, data.get("val_fraction", 0.1),
                              base_seed, _embeddings(mcfg, vocab), jobs=args.jobs)
    outputs = []
    test = D.load_tsv(data["test"], labeled=True) if data.get("test") else None
    sets = []
    summary = {"members": []}
    for m in members:
        sub = f"member_{m.seed:03d}"
        save_checkpoint(m.model, out / sub / "model.ckpt")
        write_json(out / sub / "report.json", _report_dict(m.report))
        outputs += [f"{sub}/model.ckpt", f"{sub}/report.json"]
        entry = {"seed": m.seed, "best_epoch": m.report.best_epoch, "val_f1": m.report.best_val_f1}
        if test is not None:
            labels, probs = predict_labels(m.model, test)
            ps = _prediction_set(sub, test, labels, probs)
            atomic_write_text(out / sub / "test.pred.tsv", format_predictions(ps))
            outputs.append(f"{sub}/test.pred.tsv")
            entry["test_f1"] = micro_f1([d.label for d in test], labels).f1
            sets.append(ps)
        summary["members"].append(entry)
    if sets:
        voted = vote_committee(sets, "committee")
        atomic_write_text(out / "committee.pred.tsv", format_predictions(voted))
        summary["committee_test_f1"] = micro_f1([d.label for d in test], voted.labels).f1
        outputs.append("committee.pred.tsv")
    write_json(out / "committee.json", summary)
    outputs.append("committee.json")
    write_manifest(out, "committee", cfg, {"base_seed": base_seed, "k": k}, outputs,
                   timing={f"member_{m.seed:03d}_seconds": m.report.wall_time for m in members})


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    if isinstance(model, LogisticRegression):
        if not args.features:
            raise ConfigError("a logistic-regression checkpoint needs --features")
        fm = D.concat_features([D.load_features(resolve_path(p)) for p in args.features])
        probs = model.predict_proba(fm.values)
        ps = PredictionSet(Path(args.out).stem, fm.ids, [D.LABELS[i] for i in probs.argmax(1)], probs)
    else:
        if not args.corpus:
            raise ConfigError("a neural checkpoint needs --corpus")
        corpus = D.load_tsv(resolve_path(args.corpus), labeled=not args.unlabeled)
        labels, probs = predict_labels(model, corpus)
        ps = _prediction_set(Path(args.out).stem, corpus, labels, probs)
    atomic_write_text(args.out, format_predictions(ps))


def cmd_eval(args):
    pred = read_predictions(args.pred)
    gold = D.load_tsv(resolve_path(args.gold), labeled=True)
    by_id = {d.id: d.label for d in gold}
    missing = [i for i in pred.ids if i not in by_id]
    if missing or len(pred.ids) != len(gold):
        raise D.DataError(f"prediction ids do not match the gold corpus ({len(missing)} unknown, "
                          f"{len(pred.ids)} predictions for {len(gold)} dialogues)")
    report = micro_f1([by_id[i] for i in pred.ids], pred.labels).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def _combine(args, fn):
    sets = [read_predictions(p) for p in args.predictions]
    result = fn(sets, Path(args.out).stem)
    atomic_write_text(args.out, format_predictions(result))


def cmd_vote(args):
    _combine(args, vote_committee)


def cmd_ensemble(args):
    _combine(args, final_ensemble)


def cmd_correlate(args):
    sets = [read_predictions(p) for p in args.predictions]
    for s in sets[1:]:
        if s.ids != sets[0].ids:
            raise D.DataError(f"{s.name} is not aligned with {sets[0].name}")
    names = [s.name for s in sets]
    M = agreement_matrix([s.labels for s in sets])
    atomic_write_text(args.out, format_matrix_tsv(names, M))
    figure = args.figure or str(Path(args.out).with_suffix(".png"))
    from .plotting import plot_agreement
    plot_agreement(M, names, figure)


def hidden_for_heads(hidden: int, heads: int) -> int:
    return max(heads, int(round(hidden / heads)) * heads)


def make_hpo_objective(cfg: Dict):
    """Validation micro-F1 of a model built from the base config plus decoded overrides."""
    _, tr, va, vocab = _prepare_data(cfg)
    base_model = cfg.get("model", {"architecture": "hierarchical", "encoder": "utrs"})
    base_train = dict({"schedule": "noam", "lr": 1.0}, **cfg.get("train", {}))
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainOptions.__dataclass_fields__)

    def objective(params: Dict) -> float:
        m = dict(base_model)
        t = dict(base_train)
        for key, value in params.items():
            value = value.item() if hasattr(value, "item") else value
            if key in model_keys:
                m[key] = value
            elif key in train_keys:
                t[key] = value
            else:
                raise ConfigError(f"search dimension {key!r} is neither a model nor a train option")
        if m.get("encoder", "lstm") == "utrs" and m.get("head_dim") is None:
            m["hidden_size"] = hidden_for_heads(m.get("hidden_size", 64), m.get("n_heads", 4))
        mcfg = ModelConfig.from_dict(m)
        opts = TrainOptions.from_dict(t)
        model = build_model(mcfg, vocab, _embeddings(mcfg, vocab))
        _, report = train(model, tr, va, opts)
        return report.best_val_f1

    return objective


def cmd_hpo(args):
    cfg = _apply_seed(load_run_config(args.config), args.seed)
    out = _out_dir(args, cfg)
    h = cfg.get("hpo", {})
    space = SearchSpace.from_dict(h.get("space", DEFAULT_SPACE))
    objective = make_hpo_objective(cfg)
    result = bo_loop(objective, space, n_iter=h.get("n_iter", 100), n_init=h.get("n_init", 5),
                     seed=h.get("seed", 0), xi=h.get("xi", 0.05), restarts=h.get("restarts", 3),
                     callback=lambda t: log.info("trial y=%.4f best=%.4f %s", t.y, t.f_best, t.config))
    write_json(out / "trials.json", [dict(t.to_dict(), iteration=i)
                                     for i, t in enumerate(result.history)])
    write_json(out / "best.json", result.best.to_dict())
    from .plotting import plot_search
    plot_search(result.history, out / "search.png")
    write_manifest(out, "hpo", cfg, {"hpo": h.get("seed", 0)},
                   ["trials.json", "best.json", "search.png"])


def cmd_features_lr(args):
    out = Path(args.out)
    fm = D.concat_features([D.load_features(resolve_path(p)) for p in args.features])
    corpus = D.load_tsv(resolve_path(args.labels), labeled=True)
    fm = fm.align(corpus)
    labels = [d.label for d in corpus]
    model = lr_train(fm, labels, l2=args.l2, max_iter=args.max_iter)
    save_checkpoint(model, out / "lr.ckpt")
    probs = model.predict_proba(fm.values)
    pred = [D.LABELS[i] for i in probs.argmax(1)]
    report = {"dim": fm.dim, "n": len(labels), "l2": model.l2, "iterations": len(model.losses) - 1,
              "final_loss": model.losses[-1], "grad_norm": model.grad_norm,
              "train_accuracy": float(np.mean([p == g for p, g in zip(pred, labels)])),
              "train_micro_f1": micro_f1(labels, pred).f1}
    write_json(out / "report.json", report)
    write_manifest(out, "features-lr", vars_of(args), {}, ["lr.ckpt", "report.json"])


def vars_of(args) -> Dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emodial", description="Emotion classification of three-turn dialogues.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="write the synthetic train/test corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("stats", help="label counts of a corpus file")
    s.add_argument("corpus")
    s.add_argument("--unlabeled", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    for name, fn, hlp in (("train", cmd_train, "train one model"),
                          ("committee", cmd_committee, "train a k-split voting committee"),
                          ("hpo", cmd_hpo, "Gaussian-process hyper-parameter search")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=fn)

    s = sub.add_parser("predict", help="write a prediction file from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus")
    s.add_argument("--unlabeled", action="store_true")
    s.add_argument("--features", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="micro-F1 of a prediction file against gold labels")
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    for name, fn in (("vote", cmd_vote), ("ensemble", cmd_ensemble)):
        s = sub.add_parser(name, help="majority vote over prediction files (ties -> others)")
        s.add_argument("predictions", nargs="+")
        s.add_argument("--out", required=True)
        s.set_defaults(func=fn)

    s = sub.add_parser("correlate", help="pairwise Pearson agreement matrix + heatmap")
    s.add_argument("predictions", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--figure")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("features-lr", help="logistic regression on precomputed feature files")
    s.add_argument("--features", nargs="+", required=True)
    s.add_argument("--labels", required=True, help="labeled corpus TSV supplying gold labels")
    s.add_argument("--l2", type=float)
    s.add_argument("--max-iter", type=int, default=5000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features_lr)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
