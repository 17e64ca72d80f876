"""Command-line entry points.

Exit codes: 0 ok, 1 usage or configuration, 2 data or format, 3 numerical.
Logs go to stderr as one JSON object per line; results go to stdout or to
the files named by the flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgio
from .dataio import SplitSpec, SyntheticSpec, generate_synthetic_corpus, load_corpus, save_corpus
from .errors import ConfigError, DataError, MXMLError
from .evalkit import IOUS, KS, bootstrap_test, correctness, evaluate
from .gradcheck import TOLERANCE, run_gradcheck
from .model import ModelParams, load_checkpoint, save_checkpoint
from .retrieval import MomentRetriever, read_dump, retrieve_many, write_dump
from .training import encode_corpus, encode_queries, train

log = logging.getLogger("mxml")


class _JsonLines(logging.Formatter):
    def format(self, record):
        out = {"level": record.levelname.lower(), "event": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, sort_keys=True, default=str)


def _emit(event, level=logging.INFO, **fields):
    log.log(level, event, extra={"fields": fields})


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _csv(kind):
    return lambda s: tuple(kind(x) for x in s.split(",") if x.strip())


# generate ---------------------------------------------------------------------

def cmd_generate(args):
    spec = SyntheticSpec(n_videos=args.n_videos, clips=args.clips, d_v=args.d_v, d_t=args.d_t,
                         queries_per_video=args.queries_per_video, query_len=args.query_len,
                         noise=args.noise, n_shows=args.n_shows, seed=args.seed)
    corpus = generate_synthetic_corpus(spec)
    if args.all_train:
        corpus.splits = SplitSpec({"train": [q.query_id for q in corpus.queries]})
    save_corpus(corpus, args.out)
    _emit("generated", out=str(args.out), videos=len(corpus.videos), queries=len(corpus.queries))
    return 0


# train ------------------------------------------------------------------------

def _train_overrides(args):
    o = {
        "train.max_epochs": args.epochs, "train.batch_size": args.batch_size, "train.lr": args.lr,
        "train.seed": args.seed, "train.patience": args.patience, "train.val_split": args.val_split,
        "model.d": args.d, "model.inputs": args.inputs, "model.seed": args.seed,
    }
    if args.no_share_encoders:
        o["model.share_encoders"] = False
    if args.no_nc:
        o["train.use_nc"] = False
    if args.frozen:
        o["train.frozen"] = tuple(args.frozen)
    for item in args.set or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        o[key.strip()] = val.strip()
    return o


def cmd_train(args):
    corpus = load_corpus(args.corpus)
    model_cfg, train_cfg = cfgio.load(args.config, _train_overrides(args))
    model_cfg = type(model_cfg).from_dict({**model_cfg.to_dict(), "d_v": corpus.d_v, "d_t": corpus.d_t,
                                           "languages": list(corpus.languages),
                                           "clip_seconds": corpus.clip_seconds})
    if model_cfg.l_max < max(v.l for v in corpus.videos.values()):
        raise ConfigError(f"model.l_max={model_cfg.l_max} is shorter than the longest video")
    if model_cfg.lq_max < max(q.tokens.shape[0] for q in corpus.queries):
        raise ConfigError(f"model.lq_max={model_cfg.lq_max} is shorter than the longest query")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgio.save(out / "config.txt", model_cfg, train_cfg)
    params = ModelParams(model_cfg)
    with open(out / "train_log.jsonl", "w") as logf:
        def log_fn(record):
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            _emit("epoch", **record)

        result = train(params, corpus, train_cfg, log_fn)
    extra = {"train": train_cfg.to_dict(), "best_epoch": result.best_epoch,
             "best_metric": result.best_metric if np.isfinite(result.best_metric) else None}
    save_checkpoint(result.best_params, out / "checkpoint.mxml", extra)
    _emit("trained", out=str(out), epochs=len(result.history), best_epoch=result.best_epoch,
          params=params.param_count())
    return 0


# retrieve ---------------------------------------------------------------------

def _split_queries(corpus, split, languages=None):
    if split is None:
        qs = list(corpus.queries)
    else:
        if split not in corpus.splits.partitions:
            raise DataError(f"unknown split {split!r}; have {sorted(corpus.splits.partitions)}")
        ids = set(corpus.splits[split])
        qs = [q for q in corpus.queries if q.query_id in ids]
    if languages is not None:
        qs = [q for q in qs if q.language in languages]
    return qs


def cmd_retrieve(args):
    params, extra = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    c = params.config
    if (corpus.d_v, corpus.d_t) != (c.d_v, c.d_t):
        raise ConfigError(f"checkpoint dims (d_v={c.d_v}, d_t={c.d_t}) do not match corpus "
                          f"(d_v={corpus.d_v}, d_t={corpus.d_t})")
    tcfg = extra.get("train", {})
    alpha = args.alpha if args.alpha is not None else tcfg.get("alpha", 20.0)
    L_max = args.L_max if args.L_max is not None else tcfg.get("L_max", 16)
    n_videos = args.n_videos if args.n_videos is not None else tcfg.get("n_videos", 100)
    queries = _split_queries(corpus, args.split, c.languages)
    start = time.perf_counter()
    retriever = MomentRetriever(params, encode_corpus(params, corpus), alpha, L_max, n_videos)
    results = retrieve_many(retriever, encode_queries(params, queries), args.k, args.n_jobs, args.nms)
    wall = time.perf_counter() - start
    write_dump(args.out, results, c.clip_seconds)
    _emit("retrieved", queries=len(queries), k=args.k, wall_s=round(wall, 4),
          queries_per_s=round(len(queries) / wall, 2) if wall > 0 else None, out=str(args.out))
    return 0


# eval -------------------------------------------------------------------------

def _ground_truth(args):
    corpus = load_corpus(args.corpus, load_query_features=False)
    return _split_queries(corpus, args.split)


def cmd_eval(args):
    queries = _ground_truth(args)
    preds = read_dump(args.dump)
    ids = {q.query_id for q in queries}
    extra = sorted(set(preds) - ids)
    if extra:
        raise DataError(f"dump has queries without ground truth: {extra[:5]}")
    missing = sorted(ids - set(preds))
    if missing:
        _emit("coverage", logging.WARNING, missing=len(missing), total=len(ids),
              note="missing queries count as misses")
    report = evaluate(preds, queries, args.ks, args.ious, breakdown=True)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    if args.emit_correctness:
        gt = {q.query_id: (q.gt_video_id, q.start, q.end) for q in queries}
        order = [q.query_id for q in queries]
        vec = correctness(preds, gt, order, 1, 0.7)
        with open(args.emit_correctness, "w") as f:
            for qid, v in zip(order, vec):
                f.write(json.dumps({"query_id": qid, "correct": int(v)}) + "\n")
    print(report.table())
    print(report.to_json())
    return 0


# compare ----------------------------------------------------------------------

def cmd_compare(args):
    queries = _ground_truth(args)
    a, b = read_dump(args.dump_a), read_dump(args.dump_b)
    diff = sorted(set(a) ^ set(b))
    if diff:
        raise DataError(f"dumps cover different queries; symmetric difference: {diff}")
    known = {q.query_id for q in queries}
    if set(a) - known:
        raise DataError(f"dump queries without ground truth: {sorted(set(a) - known)[:5]}")
    report = {}
    for lang in sorted({q.language for q in queries if q.query_id in a}):
        qs = [q for q in queries if q.language == lang and q.query_id in a]
        gt = {q.query_id: (q.gt_video_id, q.start, q.end) for q in qs}
        order = [q.query_id for q in qs]
        ca, cb = correctness(a, gt, order, 1, 0.7), correctness(b, gt, order, 1, 0.7)
        p = bootstrap_test(ca, cb, B=args.B, seed=args.seed, n_jobs=args.n_jobs)
        report[lang] = {"n": len(order), "r1_a": float(ca.mean()), "r1_b": float(cb.mean()), "p_value": p}
    print(json.dumps(report, sort_keys=True))
    return 0


# gradcheck --------------------------------------------------------------------

def cmd_gradcheck(args):
    share = True
    if args.config:
        model_cfg, _ = cfgio.load(args.config)
        share = model_cfg.share_encoders
    if args.no_share_encoders:
        share = False
    worst = 0.0
    failed = []
    for seed in args.seeds:
        start = time.perf_counter()
        groups = run_gradcheck(seed, share_encoders=share)
        for g, err in groups.items():
            print(json.dumps({"seed": seed, "group": g, "max_rel_err": float(err), "ok": bool(err < TOLERANCE)}))
            if not err < TOLERANCE:
                failed.append((seed, g))
        worst = max(worst, max(groups.values()))
        _emit("gradcheck", seed=seed, max_rel_err=float(max(groups.values())),
              seconds=round(time.perf_counter() - start, 2))
    if failed:
        _emit("gradcheck failed", logging.ERROR, groups=sorted({g for _, g in failed}),
              tolerance=TOLERANCE, worst=float(worst))
        return 3
    return 0


# parser -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mxml", description="Bilingual video corpus moment retrieval.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level logs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a seeded synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-videos", type=int, default=32)
    g.add_argument("--clips", type=int, default=20)
    g.add_argument("--d-v", type=int, default=32)
    g.add_argument("--d-t", type=int, default=32)
    g.add_argument("--queries-per-video", type=int, default=2)
    g.add_argument("--query-len", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--n-shows", type=int, default=1)
    g.add_argument("--all-train", action="store_true", help="put every query in the train split")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and save the best checkpoint")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value config file (flags override it)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--d", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-split")
    t.add_argument("--seed", type=int)
    t.add_argument("--inputs", choices=("video", "sub", "video+sub"))
    t.add_argument("--no-share-encoders", action="store_true")
    t.add_argument("--no-nc", action="store_true")
    t.add_argument("--frozen", nargs="+", metavar="PREFIX", help="parameter name prefixes to freeze")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("retrieve", help="rank moments for a split's queries")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--split", help="partition to query (default: all queries)")
    r.add_argument("--k", type=int, default=100)
    r.add_argument("--out", required=True)
    r.add_argument("--alpha", type=float)
    r.add_argument("--L-max", type=int)
    r.add_argument("--n-videos", type=int)
    r.add_argument("--nms", type=float, help="temporal NMS IoU threshold")
    r.add_argument("--n-jobs", type=int, default=1)
    r.set_defaults(func=cmd_retrieve)

    e = sub.add_parser("eval", help="recall@K report for a prediction dump")
    e.add_argument("--dump", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split")
    e.add_argument("--ks", type=_csv(int), default=KS)
    e.add_argument("--ious", type=_csv(float), default=IOUS)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--emit-correctness", metavar="PATH", help="per-query R@1 (IoU 0.7) 0/1 lines")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired bootstrap test between two dumps")
    c.add_argument("--dump-a", required=True)
    c.add_argument("--dump-b", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--split")
    c.add_argument("--B", type=int, default=10000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("gradcheck", help="finite-difference audit of the training loss")
    k.add_argument("--seeds", type=_csv(int), default=(0,))
    k.add_argument("--config")
    k.add_argument("--no-share-encoders", action="store_true")
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.propagate = False
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except MXMLError as exc:
        _emit(type(exc).__name__, logging.ERROR, message=str(exc))
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        _emit("DataError", logging.ERROR, message=str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
