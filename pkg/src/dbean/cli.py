"""Command-line entry point: ``dbean <command> [options]``.

Settings resolve as built-in defaults < ``--config`` JSON file < command-line
flags. The resolved settings are embedded, with their fingerprint, in every
report. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .baselines import (
    BowVocab,
    bom_matrix,
    bow_matrix,
    frequent_words,
    kmeans_fit,
    logreg_predict,
    logreg_train,
    tfidf_transform,
)
from .data import find_agnews, load_agnews_csv, subsample, synthetic_agnews
from .model import ModelParams, backward_batch, batch_loss, forward_batch, make_batch
from .report import ClassificationReport, emit_report, fingerprint
from .tensor import NumericError, ShapeError, finite_diff_grad_check
from .text import (
    DataError,
    Vocabulary,
    bpe_train,
    clean_text,
    encode_example,
    load_word2vec_text,
    load_word_vectors,
    pad_truncate,
)
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainState,
    evaluate,
    final_learning_rate,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .ttt import AdaptConfig, adapt_evaluate

log = logging.getLogger("dbean")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DESK_PER_CLASS = 3000
BOM_K, DESK_BOM_K = 5000, 500

# flat config keys beyond TrainConfig, with their defaults
EXTRA_DEFAULTS = {
    "train_path": None,
    "test_path": None,
    "synthetic": 0,
    "desk": False,
    "strict": False,
    "subsample_seed": 0,
    "embeddings": None,
    "bow_max_size": 50_000,
    "logreg_epochs": 10,
    "logreg_lr": 0.5,
    "logreg_batch": 64,
    "bom_k": None,
    "bom_min_count": 5,
    "adapt_steps": 2,
    "adapt_lr": None,
    "lr_search": False,
    "limit": 0,
    "backend": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# argument parsing


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--config", metavar="PATH", help="JSON file of flat config keys")
    g.add_argument("--seed", type=int)
    g.add_argument("--desk", action="store_true", default=None,
                   help=f"desk scale: {DESK_PER_CLASS}/class train subsample, BoM k={DESK_BOM_K}")
    g.add_argument("--strict", action="store_true", default=None, help="validate official split counts")
    g.add_argument("--out", metavar="PATH", help="output file (report, vocabulary or checkpoint)")
    g.add_argument("--backend", choices=["cython", "numpy"])
    g.add_argument("-v", "--verbose", action="store_true")


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--train", dest="train_path", metavar="CSV")
    g.add_argument("--test", dest="test_path", metavar="CSV")
    g.add_argument("--data-dir", metavar="DIR",
                   help="directory holding train.csv and test.csv (default $DBEAN_AGNEWS_DIR)")
    g.add_argument("--synthetic", type=int, metavar="PER_CLASS",
                   help="use a generated four-topic corpus instead of AG News")
    g.add_argument("--limit", type=int, metavar="N", help="evaluate on the first N test records only")


def _train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", dest="lr_initial", type=float)
    g.add_argument("--lr-decay", dest="lr_decay", type=float)
    g.add_argument("--clip-norm", dest="clip_norm", type=float)
    g.add_argument("--ssl-weight", dest="ssl_weight", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--att-hidden", dest="att_hidden", type=int)
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--num-merges", dest="num_merges", type=int)
    g.add_argument("--embeddings", metavar="PATH", help="word2vec text file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dbean", description="DBEAN text classification: training, evaluation, baselines.")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("tokenize-train", help="learn a BPE vocabulary from the training split")
    _common(p)
    _data_args(p)
    p.add_argument("--num-merges", dest="num_merges", type=int)

    p = sub.add_parser("train", help="train DBEAN and write a checkpoint")
    _common(p)
    _data_args(p)
    _train_args(p)
    p.add_argument("--vocab", metavar="PATH", help="vocabulary to use; learned and saved here if missing")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--log", metavar="PATH", help="append per-epoch JSON lines here")

    for name, text in (("eval", "evaluate a checkpoint"),
                       ("adapt-eval", "evaluate a checkpoint with test-time adaptation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _data_args(p)
        p.add_argument("--vocab", metavar="PATH", required=True)
        p.add_argument("--checkpoint", metavar="PATH", required=True)
        if name == "adapt-eval":
            p.add_argument("--steps", dest="adapt_steps", type=int)
            p.add_argument("--adapt-lr", dest="adapt_lr", type=float,
                           help="default: the final training learning rate")
            p.add_argument("--lr-search", dest="lr_search", action="store_true", default=None,
                           help="halve the step size until the auxiliary loss is non-increasing")

    p = sub.add_parser("baseline", help="bag-of-words, TFIDF or bag-of-means baseline")
    p.add_argument("kind", choices=["bow", "tfidf", "bom"])
    _common(p)
    _data_args(p)
    p.add_argument("--embeddings", metavar="PATH", help="word2vec text file (bom)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--bom-k", dest="bom_k", type=int)
    p.add_argument("--logreg-epochs", dest="logreg_epochs", type=int)
    p.add_argument("--logreg-lr", dest="logreg_lr", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("bench-scaling", help="forward time at T=512 vs T=256")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-ratio", type=float, default=2.4)
    return ap


_NOT_CONFIG = {"command", "config", "out", "verbose", "data_dir", "vocab", "checkpoint", "log",
               "tol", "trials", "max_ratio"}


def resolve_config(args) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = {**TrainConfig().to_dict(), **EXTRA_DEFAULTS}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise DataError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise DataError(f"{args.config}: unknown keys {unknown}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            cfg[k] = v
    data_dir = getattr(args, "data_dir", None) or os.environ.get("DBEAN_AGNEWS_DIR")
    if data_dir and not cfg["train_path"] and not cfg["synthetic"]:
        found = find_agnews(data_dir)
        if found is None:
            raise DataError(f"{data_dir}: train.csv/test.csv not found")
        cfg["train_path"], cfg["test_path"] = str(found[0]), str(found[1])
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg)


# --------------------------------------------------------------------------
# data


def load_splits(cfg: dict, need_train: bool = True, need_test: bool = True):
    """(train, test) record lists per the resolved config."""
    if cfg["synthetic"]:
        n = int(cfg["synthetic"])
        train = synthetic_agnews(n, seed=cfg["seed"])
        test = synthetic_agnews(max(1, n // 4), seed=cfg["seed"] + 10_000)
    else:
        train = test = None
        if need_train:
            if not cfg["train_path"]:
                raise DataError("no training data: pass --train, --data-dir or --synthetic")
            train = load_agnews_csv(cfg["train_path"], strict=cfg["strict"], split="train")
        if need_test:
            if not cfg["test_path"]:
                raise DataError("no test data: pass --test, --data-dir or --synthetic")
            test = load_agnews_csv(cfg["test_path"], strict=cfg["strict"], split="test")
    if train is not None and cfg["desk"]:
        train = subsample(train, DESK_PER_CLASS, seed=cfg["subsample_seed"])
    if test is not None and cfg["limit"]:
        test = test[:cfg["limit"]]
    return train, test


def _words(records):
    return [clean_text(r.text).split() for r in records]


def _encode(records, vocab, max_len):
    return [encode_example(r.text, r.label, vocab, max_len) for r in records]


def _finish(report: ClassificationReport, cfg: dict, out, model: str, **extra) -> ClassificationReport:
    report.config = cfg
    report.config_fingerprint = fingerprint(cfg)
    report.extra.setdefault("model", model)
    report.extra.update(extra)
    emit_report(report, out)
    return report


# --------------------------------------------------------------------------
# commands


def cmd_tokenize_train(args, cfg) -> int:
    train, _ = load_splits(cfg, need_test=False)
    vocab = bpe_train((clean_text(r.text) for r in train), cfg["num_merges"])
    out = args.out or "vocab.txt"
    vocab.save(out)
    print(f"vocabulary: {len(vocab)} tokens, {len(vocab.merges)} merges -> {out} [{fingerprint(cfg)}]")
    return EXIT_OK


def _load_or_train_vocab(path, train, cfg):
    if path and Path(path).exists():
        return Vocabulary.load(path)
    vocab = bpe_train((clean_text(r.text) for r in train), cfg["num_merges"])
    if path:
        vocab.save(path)
    return vocab


def cmd_train(args, cfg) -> int:
    train, test = load_splits(cfg, need_test=bool(cfg["test_path"] or cfg["synthetic"]))
    tc = _train_config(cfg)
    vocab = _load_or_train_vocab(args.vocab, train, cfg)
    emb = load_word2vec_text(cfg["embeddings"], vocab, tc.embed_dim, seed=tc.seed) if cfg["embeddings"] else None
    data = _encode(train, vocab, tc.max_len)
    state = TrainState.create(tc, len(vocab), embeddings=emb)
    t0 = time.perf_counter()
    summaries = fit(state, data, log_path=args.log, backend=cfg["backend"])
    save_checkpoint(state, args.checkpoint)
    train_seconds = time.perf_counter() - t0
    extra = {
        "epochs": [s.__dict__ for s in summaries],
        "final_learning_rate": final_learning_rate(tc),
        "train_seconds": train_seconds,
        "n_train": len(data),
        "vocab_size": len(vocab),
    }
    if test is not None:
        report = evaluate(state.params, _encode(test, vocab, tc.max_len), backend=cfg["backend"])
    else:
        report = evaluate(state.params, data, backend=cfg["backend"])
        extra["evaluated_on"] = "train"
    _finish(report, cfg, args.out, "DBEAN", **extra)
    return EXIT_OK


def _load_model(args, cfg):
    state = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    if state.params.E.rows != len(vocab):
        raise DataError(f"{args.vocab}: {len(vocab)} tokens but checkpoint has {state.params.E.rows} embedding rows")
    return state, vocab


def cmd_eval(args, cfg) -> int:
    state, vocab = _load_model(args, cfg)
    _, test = load_splits(cfg, need_train=False)
    data = _encode(test, vocab, state.config.max_len)
    report = evaluate(state.params, data, backend=cfg["backend"])
    _finish(report, cfg, args.out, "DBEAN", checkpoint_fingerprint=fingerprint(state.config.to_dict()))
    return EXIT_OK


def cmd_adapt_eval(args, cfg) -> int:
    state, vocab = _load_model(args, cfg)
    _, test = load_splits(cfg, need_train=False)
    data = _encode(test, vocab, state.config.max_len)
    lr = cfg["adapt_lr"] if cfg["adapt_lr"] is not None else final_learning_rate(state.config)
    acfg = AdaptConfig(steps=cfg["adapt_steps"], lr=lr, clip_norm=state.config.clip_norm,
                       lr_search=bool(cfg["lr_search"]))
    report = adapt_evaluate(state.params, data, acfg, backend=cfg["backend"])
    _finish(report, cfg, args.out, "DBEAN+TTT", checkpoint_fingerprint=fingerprint(state.config.to_dict()))
    return EXIT_OK if report.extra["restore_verified"] else EXIT_NUMERIC


def baseline_report(kind: str, cfg: dict, train, test) -> ClassificationReport:
    """Fit one baseline on ``train`` and report on ``test``."""
    t0 = time.perf_counter()
    tr_words, te_words = _words(train), _words(test)
    y_tr = np.array([r.label for r in train])
    extra = {}
    if kind in ("bow", "tfidf"):
        vocab = BowVocab.build(tr_words, cfg["bow_max_size"])
        X_tr, X_te = bow_matrix(tr_words, vocab), bow_matrix(te_words, vocab)
        if kind == "tfidf":
            X_tr, X_te = tfidf_transform(X_tr, X_te)
        extra["n_features"] = len(vocab)
    else:
        k = cfg["bom_k"] or (DESK_BOM_K if cfg["desk"] else BOM_K)
        frequent = frequent_words(tr_words, cfg["bom_min_count"])
        if cfg["embeddings"]:
            words, vectors = load_word_vectors(cfg["embeddings"], frequent, cfg["embed_dim"])
            if not words:
                raise DataError(f"{cfg['embeddings']}: no frequent training word has a vector")
        else:
            # no pretrained vectors: seeded random ones, so only the pipeline is exercised
            log.warning("bom: no --embeddings given, clustering seeded random vectors")
            words = frequent
            vectors = np.random.default_rng(cfg["seed"]).uniform(-1, 1, size=(len(words), cfg["embed_dim"]))
            if not words:
                raise DataError(f"bom: no training word occurs more than {cfg['bom_min_count']} times")
        extra["embeddings"] = "word2vec" if cfg["embeddings"] else "random"
        km = kmeans_fit(vectors, k, seed=cfg["seed"], words=words)
        X_tr, X_te = bom_matrix(tr_words, km), bom_matrix(te_words, km)
        extra.update(n_features=km.k, n_clustered_words=len(words), kmeans_iterations=km.n_iter)
    model = logreg_train(X_tr, y_tr, epochs=cfg["logreg_epochs"], lr=cfg["logreg_lr"],
                         batch_size=cfg["logreg_batch"], seed=cfg["seed"])
    report = ClassificationReport.from_predictions([r.label for r in test], logreg_predict(model, X_te))
    report.wall_clock_seconds = time.perf_counter() - t0
    report.extra.update(model={"bow": "BoW", "tfidf": "BoW+TFIDF", "bom": "BoM"}[kind],
                        n_train=len(train), **extra)
    return report


def cmd_baseline(args, cfg) -> int:
    train, test = load_splits(cfg)
    report = baseline_report(args.kind, cfg, train, test)
    _finish(report, cfg, args.out, report.extra["model"])
    return EXIT_OK


def gradcheck_tiny(seed: int = 0, backend=None):
    """f64 finite-difference check at hidden 4, length 5, vocabulary 10."""
    rng = np.random.default_rng(seed)
    params = ModelParams.init(10, embed_dim=3, hidden=4, att_hidden=3, seed=seed, dtype=np.float64)
    # larger weights than the default init so every term is exercised
    for _, t in params.named():
        t.data[...] = rng.uniform(-0.8, 0.8, size=t.shape)
    params.E.data[0] = 0
    # one full-length and one padded sequence
    batch = make_batch([pad_truncate(rng.integers(2, 10, size=n).tolist(), label, max_len=5)
                        for n, label in ((5, 1), (3, 3))])

    def loss_fn(_params):
        tr = forward_batch(params, batch, backend=backend)
        return batch_loss(tr, 0.1), backward_batch(params, tr, ssl_weight=0.1, backend=backend)

    return finite_diff_grad_check(loss_fn, params, epsilon=1e-5)


def cmd_gradcheck(args, cfg) -> int:
    rep = gradcheck_tiny(cfg["seed"], cfg["backend"])
    print(f"gradcheck: max relative error {rep.max_relative_error:.3e} "
          f"(worst {rep.worst_parameter}, {rep.n_checked} entries, tol {args.tol:g})")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "max_relative_error": rep.max_relative_error, "worst_parameter": rep.worst_parameter,
            "per_parameter_errors": rep.per_parameter_errors, "n_checked": rep.n_checked,
            "config": cfg, "config_fingerprint": fingerprint(cfg)}, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if rep.passed(args.tol) else EXIT_NUMERIC


def cmd_bench_scaling(args, cfg) -> int:
    from .bench import scaling_ratio
    res = scaling_ratio(trials=args.trials, hidden=128, seed=cfg["seed"], backend=cfg["backend"])
    ok = res["ratio"] <= args.max_ratio
    print(f"bench-scaling: median forward {1e3 * res['median_small_s']:.3f} ms at T=256, "
          f"{1e3 * res['median_large_s']:.3f} ms at T=512, ratio {res['ratio']:.3f} "
          f"({'<=' if ok else '>'} {args.max_ratio}) [{res['backend']}]")
    if args.out:
        Path(args.out).write_text(json.dumps({**res, "passed": ok}, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "tokenize-train": cmd_tokenize_train,
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt-eval": cmd_adapt_eval,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "bench-scaling": cmd_bench_scaling,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        if cfg["backend"] is not None and cfg["backend"] not in kernels.available_backends():
            raise UsageError(f"backend {cfg['backend']!r} not available; have {kernels.available_backends()}")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        print(f"dbean: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"dbean: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
