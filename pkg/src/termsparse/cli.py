"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    build_window_index,
    evaluate,
    explain_expansion,
    hits_to_run,
    max_passage_search,
    read_qrels,
    read_run,
    write_qrels,
    write_run,
)
from .experiment import StageError, format_table, run_experiment
from .index import bm25_index, bm25_search, build_index, load_index, save_index, search
from .model import MODES, STRATEGIES, ModelConfig, ModelParams, represent_passages, represent_queries
from .numerics import NumericalError
from .sampling import make_devset, make_triples
from .sparse import SparseVector
from .synthetic import make_lexical_mismatch
from .textcore import Vocabulary, build_vocab, read_corpus, term_ids, tokenize, write_tsv
from .training import TrainConfig, read_pairs, read_triples, train_gating, train_joint, write_loss_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("termsparse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(_load_json_config(args.config).get("seed", 0))


def _model_config(args, vocab: Vocabulary, mode: str, strategy: str) -> ModelConfig:
    section = dict(_load_json_config(args.config).get("model", {}))
    return ModelConfig(v=vocab.v, mode=mode, strategy=strategy, **section)


def _train_config(args, **overrides) -> TrainConfig:
    section = dict(_load_json_config(args.config).get("train", {}))
    section.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(seed=_seed(args), **section)


def _write_vectors(path, ids, vecs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, v in zip(ids, vecs):
            fh.write(json.dumps({"id": i, "dim": v.dim, "vector": v.entries}) + "\n")


def _read_vectors(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["id"], SparseVector.from_pairs([tuple(e) for e in rec["vector"]], rec["dim"])))
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_vocab_build(args):
    texts = [t for p in args.corpus for _, t in read_corpus(p)]
    vocab = build_vocab(texts, args.min_freq)
    vocab.save(args.out)
    print(f"vocabulary: {vocab.v} terms -> {args.out}")


def cmd_train_gating(args):
    vocab = Vocabulary.load(args.vocab)
    if args.model:
        params = ModelParams.load(args.model)
        if params.gating is None:
            raise UsageError("--model has no gating controller (literal-only)")
    else:
        params = ModelParams.init(_model_config(args, vocab, "expansion-enhanced", args.strategy), seed=_seed(args))
    cfg = _train_config(args, gating_iterations=args.iterations, lambda1=args.lambda1, lambda2=args.lambda2, lr=args.lr)
    res = train_gating(read_pairs(args.pairs), cfg, params, vocab)
    params.save(args.out)
    if args.loss_csv:
        write_loss_curve(args.loss_csv, res.losses)
    print(f"gating trained for {len(res.losses)} iterations -> {args.out}")


def cmd_train_joint(args):
    vocab = Vocabulary.load(args.vocab)
    if args.model:
        params = ModelParams.load(args.model)
    else:
        if args.mode == "expansion-enhanced":
            raise UsageError("expansion-enhanced training needs --model from `train gating`")
        params = ModelParams.init(_model_config(args, vocab, args.mode, args.strategy), seed=_seed(args))
    cfg = _train_config(args, joint_iterations=args.iterations, lr=args.lr, unfreeze_gating=args.unfreeze_gating or None)
    pairs = read_pairs(args.pairs) if args.pairs else None
    res = train_joint(read_triples(args.triples), pairs, cfg, params, vocab)
    params.save(args.out)
    if args.loss_csv:
        write_loss_curve(args.loss_csv, res.losses)
    print(f"joint training for {len(res.losses)} iterations -> {args.out}")


def cmd_represent(args):
    vocab = Vocabulary.load(args.vocab)
    params = ModelParams.load(args.model)
    rows = read_corpus(args.input)
    seqs = [tokenize(t, vocab, params.cfg.max_len) for _, t in rows]
    vecs = represent_queries(seqs, params) if args.queries else represent_passages(seqs, params)
    _write_vectors(args.out, [i for i, _ in rows], vecs)
    print(f"{len(vecs)} vectors -> {args.out}")


def cmd_index_build(args):
    if args.vectors:
        docs = _read_vectors(args.vectors)
    else:
        if not (args.model and args.vocab and args.corpus):
            raise UsageError("give --vectors, or --model, --vocab and --corpus")
        vocab = Vocabulary.load(args.vocab)
        params = ModelParams.load(args.model)
        rows = read_corpus(args.corpus)
        vecs = represent_passages([tokenize(t, vocab, params.cfg.max_len) for _, t in rows], params)
        docs = list(zip([i for i, _ in rows], vecs))
    idx = build_index(docs)
    save_index(idx, args.out)
    print(f"index: {idx.doc_count} docs, {len(idx.postings)} terms -> {args.out}")


def _query_vectors(args):
    vocab = Vocabulary.load(args.vocab)
    params = ModelParams.load(args.model)
    rows = read_corpus(args.queries)
    seqs = [tokenize(t, vocab, params.cfg.max_len) for _, t in rows]
    return rows, represent_queries(seqs, params, args.strategy)


def cmd_index_search(args):
    idx = load_index(args.index)
    rows, qvecs = _query_vectors(args)
    run = hits_to_run({qid: search(idx, q, args.k) for (qid, _), q in zip(rows, qvecs)})
    write_run(args.out, run)
    print(f"{len(run)} queries -> {args.out}")


def cmd_bm25_index(args):
    vocab = Vocabulary.load(args.vocab)
    idx = bm25_index(read_corpus(args.corpus), vocab)
    save_index(idx, args.out)
    print(f"bm25 index: {idx.doc_count} docs -> {args.out}")


def cmd_bm25_search(args):
    vocab = Vocabulary.load(args.vocab)
    idx = load_index(args.index)
    run = hits_to_run({qid: bm25_search(idx, term_ids(t, vocab), args.k, args.k1, args.b) for qid, t in read_corpus(args.queries)})
    write_run(args.out, run)
    print(f"{len(run)} queries -> {args.out}")


def cmd_eval_run(args):
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    m = evaluate(run, qrels, args.mrr, args.recall)
    for name, value in m.items():
        print(f"{name:<12} {100 * value:.2f}")
    if args.json:
        Path(args.json).write_text(json.dumps(m, indent=2))


def cmd_doc_search(args):
    vocab = Vocabulary.load(args.vocab)
    params = ModelParams.load(args.model)
    docs = read_corpus(args.docs)
    L = params.cfg.max_len
    rep = lambda texts: represent_passages([tokenize(t, vocab, L) for t in texts], params)  # noqa: E731
    widx = build_window_index(docs, rep, args.window, args.stride, v=vocab.v)
    rows, qvecs = _query_vectors(args)
    run = hits_to_run({qid: max_passage_search(widx, q, args.k) for (qid, _), q in zip(rows, qvecs)})
    write_run(args.out, run)
    print(f"{len(run)} queries -> {args.out}")


def cmd_make_devset(args):
    corpus = read_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab([t for _, t in corpus])
    bm = bm25_index(corpus, vocab)
    queries, sub, qrels = make_devset(read_corpus(args.queries), read_qrels(args.qrels), corpus, vocab, bm, args.n_queries, args.pool_depth, args.random, _seed(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "queries.tsv", queries)
    write_tsv(out / "corpus.tsv", sub)
    write_qrels(out / "qrels.tsv", qrels)
    print(f"dev set: {len(queries)} queries, {len(sub)} passages -> {out}")


def cmd_make_triples(args):
    corpus = read_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab([t for _, t in corpus])
    bm = bm25_index(corpus, vocab)
    triples = make_triples(read_corpus(args.queries), read_qrels(args.qrels), corpus, vocab, bm, _seed(args), args.depth)
    write_tsv(args.out, [(t.query, t.positive, t.negative) for t in triples])
    print(f"{len(triples)} triples -> {args.out}")


def cmd_make_synthetic(args):
    col = make_lexical_mismatch(seed=_seed(args), n_passages=args.passages, n_queries=args.queries)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "corpus.tsv", col.corpus)
    write_tsv(out / "queries.tsv", col.queries)
    write_qrels(out / "qrels.tsv", col.qrels)
    write_tsv(out / "train_queries.tsv", col.train_queries)
    write_qrels(out / "train_qrels.tsv", col.train_qrels)
    write_tsv(out / "pairs.tsv", [(p.passage, p.target, p.kind) for p in col.pairs])
    docs, dqrels = col.documents()
    write_tsv(out / "docs.tsv", docs)
    write_qrels(out / "doc_qrels.tsv", dqrels)
    print(f"synthetic collection -> {out}")


def cmd_explain(args):
    vocab = Vocabulary.load(args.vocab)
    params = ModelParams.load(args.model)
    if args.term not in vocab:
        raise UsageError(f"term {args.term!r} not in vocabulary")
    seq = tokenize(args.passage, vocab, params.cfg.max_len)
    rep = explain_expansion(seq, vocab.id(args.term), params, vocab, args.n)
    print(f"{rep.term}: logit {rep.aggregate_logit:.4f}, probability {rep.probability:.4f}")
    for token, pos, value in rep.contributions:
        print(f"  {token:<20} pos {pos:<4} {value:.4f}")


def cmd_experiment(args):
    config = _load_json_config(args.config) if args.config else {}
    if args.seed is not None:
        config["seed"] = args.seed
    if args.threads:
        config["threads"] = args.threads
    report = run_experiment(config)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(format_table(report))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # sub-commands repeat the flags with suppressed defaults so they do
        # not overwrite values given before the command name
        g = argparse.ArgumentParser(add_help=False)
        kw = (lambda d: {"default": d}) if defaults else (lambda d: {"default": argparse.SUPPRESS})
        g.add_argument("--seed", type=int, help="random seed (default: config value or 0)", **kw(None))
        g.add_argument("--config", help="JSON configuration file", **kw(None))
        g.add_argument("--threads", type=int, **kw(0))
        g.add_argument("-v", "--verbose", action="store_true", **kw(False))
        return g

    common = global_flags(False)
    p = _Parser(prog="termsparse", description="Learned term-based sparse retrieval", parents=[global_flags(True)])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(parent, name, fn, help_):
        sp = parent.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    vocab = sub.add_parser("vocab", help="vocabulary tools").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sp = add(vocab, "build", cmd_vocab_build, "build a vocabulary from TSV corpora")
    sp.add_argument("--corpus", nargs="+", required=True)
    sp.add_argument("--min-freq", type=int, default=1)
    sp.add_argument("--out", required=True)

    train = sub.add_parser("train", help="training").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sp = add(train, "gating", cmd_train_gating, "phase 1: fit the gating controller")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--model", help="existing checkpoint to continue from")
    sp.add_argument("--strategy", choices=STRATEGIES, default="symmetric")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lambda1", type=float)
    sp.add_argument("--lambda2", type=float)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--loss-csv")
    sp.add_argument("--out", required=True)
    sp = add(train, "joint", cmd_train_joint, "phase 2: fit the importance predictor")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--triples", required=True)
    sp.add_argument("--pairs")
    sp.add_argument("--model", help="checkpoint from `train gating` (required for expansion-enhanced)")
    sp.add_argument("--mode", choices=MODES, default="literal-only")
    sp.add_argument("--strategy", choices=STRATEGIES, default="symmetric")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--unfreeze-gating", action="store_true")
    sp.add_argument("--loss-csv")
    sp.add_argument("--out", required=True)

    sp = add(sub, "represent", cmd_represent, "write sparse vectors as JSON lines")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--queries", action="store_true", help="use the query-side representation")
    sp.add_argument("--out", required=True)

    index = sub.add_parser("index", help="inverted index").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sp = add(index, "build", cmd_index_build, "build an index from vectors or a model")
    sp.add_argument("--vectors")
    sp.add_argument("--model")
    sp.add_argument("--vocab")
    sp.add_argument("--corpus")
    sp.add_argument("--out", required=True)
    sp = add(index, "search", cmd_index_search, "retrieve top-k passages for a query file")
    sp.add_argument("--index", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--k", type=int, default=1000)
    sp.add_argument("--out", required=True)
    sp = add(index, "doc-search", cmd_doc_search, "rank documents by their best window")
    sp.add_argument("--docs", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--window", type=int, default=64)
    sp.add_argument("--stride", type=int, default=32)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--out", required=True)

    bm = sub.add_parser("bm25", help="BM25 baseline").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sp = add(bm, "index", cmd_bm25_index, "build a BM25 index")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp = add(bm, "search", cmd_bm25_search, "BM25 retrieval for a query file")
    sp.add_argument("--index", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=1000)
    sp.add_argument("--k1", type=float, default=1.2)
    sp.add_argument("--b", type=float, default=0.75)
    sp.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sp = add(ev, "run", cmd_eval_run, "score a TREC run against qrels")
    sp.add_argument("--run", required=True)
    sp.add_argument("--qrels", required=True)
    sp.add_argument("--mrr", type=int, nargs="+", default=[10])
    sp.add_argument("--recall", type=int, nargs="+", default=[10, 100, 1000])
    sp.add_argument("--json")

    sp = add(sub, "make-devset", cmd_make_devset, "sample queries and pool passages with BM25")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--qrels", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--n-queries", type=int, default=1000)
    sp.add_argument("--pool-depth", type=int, default=1000)
    sp.add_argument("--random", type=int, default=0)
    sp.add_argument("--out-dir", required=True)

    sp = add(sub, "make-triples", cmd_make_triples, "BM25 + random negative training triples")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--qrels", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--depth", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add(sub, "make-synthetic", cmd_make_synthetic, "write the synthetic lexical-mismatch collection")
    sp.add_argument("--passages", type=int, default=2000)
    sp.add_argument("--queries", type=int, default=200)
    sp.add_argument("--out-dir", required=True)

    sp = add(sub, "explain", cmd_explain, "show which passage tokens drive an expanded term")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--passage", required=True)
    sp.add_argument("--term", required=True)
    sp.add_argument("--n", type=int, default=5)

    sp = add(sub, "experiment", cmd_experiment, "run a full experiment from --config")
    sp.add_argument("--out", help="write the JSON report here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, NumericalError) else EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
