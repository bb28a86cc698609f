"""End-to-end experiment: data -> training -> representation -> index -> metrics."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .evaluation import build_window_index, evaluate, hits_to_run, max_passage_search, read_qrels
from .index import bm25_index, bm25_search, build_index, search
from .model import EXPANSION, QUERY_TF, ModelConfig, ModelParams, gate_sets, query_tf, represent_passages, represent_queries
from .sampling import make_triples
from .sparse import SparseVector
from .synthetic import make_lexical_mismatch
from .textcore import TokenSeq, Vocabulary, bow, build_vocab, read_corpus, term_ids, tokenize
from .training import TrainConfig, read_pairs, read_triples, train_gating, train_joint

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "data": {"synthetic": {}},
    "model": {"d": 32, "n_layers": 2, "d_ff": 64, "max_len": 64, "threshold": 0.7, "lambda_cap": None},
    "train": {"lr": 1e-3, "batch_size": 8, "gating_iterations": 2000, "joint_iterations": 3000, "lambda1": 1e-2, "lambda2": 1.0},
    "triples": {"depth": 100},
    "runs": [
        {"name": "literal-only", "mode": "literal-only", "strategy": "symmetric"},
        {"name": "expansion-enhanced", "mode": "expansion-enhanced", "strategy": "symmetric"},
    ],
    "baselines": ["bm25", "tf"],
    "metrics": {"mrr": [10], "recall": [10, 100, 1000]},
    "k": 1000,
    "threads": 1,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path_or_dict) -> dict:
    """Merge a user config (dict or JSON path) over the defaults.

    Sections merge key by key, except ``data``: a user data section
    replaces the default synthetic one so file paths are never shadowed.
    """
    if isinstance(path_or_dict, (str, Path)):
        user = json.loads(Path(path_or_dict).read_text())
    else:
        user = dict(path_or_dict)
    cfg = _merge(DEFAULT_CONFIG, user)
    if "data" in user:
        cfg["data"] = copy.deepcopy(user["data"])
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 3)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _parallel_map(fn, chunks: Sequence, threads: int) -> list:
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _represent(seqs: list[TokenSeq], fn, threads: int, chunk: int = 256) -> list[SparseVector]:
    parts = [seqs[i : i + chunk] for i in range(0, len(seqs), chunk)]
    return [v for part in _parallel_map(fn, parts, threads) for v in part]


def _load_data(cfg: dict) -> dict:
    data = cfg["data"]
    seed = cfg["seed"]
    if "synthetic" in data:
        col = make_lexical_mismatch(seed=seed, **data["synthetic"])
        out = {
            "corpus": col.corpus,
            "queries": col.queries,
            "qrels": col.qrels,
            "train_queries": col.train_queries,
            "train_qrels": col.train_qrels,
            "pairs": col.pairs,
            "triples": None,
            "subsets": {"mismatch": sorted(col.mismatch), "literal": sorted(set(col.qrels) - col.mismatch)},
        }
        if "doc_ranking" in cfg:
            docs, dqrels = col.documents(cfg["doc_ranking"].get("passages_per_doc", 4))
            out["docs"], out["doc_qrels"] = docs, dqrels
        return out
    out = {
        "corpus": read_corpus(data["corpus"]),
        "queries": read_corpus(data["queries"]),
        "qrels": read_qrels(data["qrels"]),
        "pairs": read_pairs(data["pairs"]) if data.get("pairs") else [],
        "triples": read_triples(data["triples"]) if data.get("triples") else None,
        "train_queries": read_corpus(data["train_queries"]) if data.get("train_queries") else [],
        "train_qrels": read_qrels(data["train_qrels"]) if data.get("train_qrels") else {},
        "subsets": {},
    }
    if "doc_ranking" in cfg:
        out["docs"] = read_corpus(cfg["doc_ranking"]["docs"])
        out["doc_qrels"] = read_qrels(cfg["doc_ranking"]["qrels"])
    return out


def _round(metrics: dict[str, float]) -> dict[str, float]:
    return {k: float(v) for k, v in metrics.items()}


def run_experiment(config) -> dict:
    """Run every configured model and baseline and return the metrics report.

    Everything except the ``wall_clock`` entry is a deterministic function
    of the configuration.
    """
    cfg = load_config(config)
    seed = int(cfg["seed"])
    threads = int(cfg.get("threads", 1))
    k = int(cfg["k"])
    mk = cfg["metrics"]
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    report: dict[str, Any] = {"seed": seed, "config_hash": config_hash(cfg), "config": cfg}

    def score(run, qrels=None):
        qrels = data["qrels"] if qrels is None else qrels
        out = _round(evaluate(run, qrels, mk["mrr"], mk["recall"]))
        subsets = {}
        for name, qids in data["subsets"].items():
            sub = {q: qrels[q] for q in qids if q in qrels}
            subsets[name] = _round(evaluate({q: run.get(q, []) for q in sub}, sub, mk["mrr"], mk["recall"]))
        return out, subsets

    with _Stage("data", timings):
        data = _load_data(cfg)
        texts = [t for _, t in data["corpus"]] + [t for _, t in data["queries"]] + [t for _, t in data["train_queries"]]
        texts += [p.target for p in data["pairs"]]
        if data["triples"]:
            texts += [t.query for t in data["triples"]]
        vocab = build_vocab(texts, cfg.get("min_freq", 1))
        pids = [p for p, _ in data["corpus"]]
    report["collection"] = {
        "passages": len(data["corpus"]),
        "queries": len(data["queries"]),
        "vocab": vocab.v,
        "pairs": len(data["pairs"]),
    }

    with _Stage("bm25", timings):
        bm = bm25_index(data["corpus"], vocab)
        baselines = {}
        if "bm25" in cfg["baselines"]:
            run = hits_to_run({q: bm25_search(bm, term_ids(t, vocab), k) for q, t in data["queries"]})
            m, s = score(run)
            baselines["bm25"] = {"metrics": m, "subsets": s}

    mcfg_base = dict(cfg["model"])
    max_len = int(mcfg_base.get("max_len", 64))
    pseqs = [tokenize(t, vocab, max_len) for _, t in data["corpus"]]
    qseqs = [tokenize(t, vocab, max_len) for _, t in data["queries"]]

    if "tf" in cfg["baselines"]:
        with _Stage("tf", timings):
            tf_docs = [SparseVector.from_pairs(query_tf(s), vocab.v) for s in pseqs]
            idx = build_index(zip(pids, tf_docs), v=vocab.v)
            qv = [SparseVector.from_pairs(query_tf(s), vocab.v) for s in qseqs]
            run = hits_to_run({q: search(idx, v, k) for (q, _), v in zip(data["queries"], qv)})
            m, s = score(run)
            baselines["tf"] = {"metrics": m, "subsets": s}
    report["baselines"] = baselines

    with _Stage("triples", timings):
        triples = data["triples"]
        if triples is None:
            triples = make_triples(data["train_queries"], data["train_qrels"], data["corpus"], vocab, bm, seed=seed, depth=cfg["triples"]["depth"])
    report["collection"]["triples"] = len(triples)

    tcfg = TrainConfig(seed=seed, **cfg["train"])
    gating_cache: dict[str, Any] = {}
    runs_out = {}
    for run_cfg in cfg["runs"]:
        name = run_cfg["name"]
        mcfg = ModelConfig(v=vocab.v, mode=run_cfg["mode"], strategy=run_cfg["strategy"], **mcfg_base)
        params = ModelParams.init(mcfg, seed=seed)
        entry: dict[str, Any] = {"mode": mcfg.mode, "strategy": mcfg.strategy}
        if mcfg.mode == EXPANSION:
            with _Stage("train gating", timings):
                key = json.dumps(mcfg_base, sort_keys=True)
                if key not in gating_cache:
                    gparams = ModelParams.init(ModelConfig(v=vocab.v, mode=EXPANSION, strategy=QUERY_TF, **mcfg_base), seed=seed)
                    res = train_gating(data["pairs"], tcfg, gparams, vocab)
                    gating_cache[key] = (res.params, res.losses)
                g, glosses = gating_cache[key]
                params.gating.tower = {n: a.copy() for n, a in g.tower.items()}
                params.gating.threshold = g.threshold
                entry["gating_final_loss"] = float(np.mean(glosses[-50:])) if glosses else None
        with _Stage(f"train {name}", timings):
            res = train_joint(triples, data["pairs"], tcfg, params, vocab)
            entry["final_loss"] = float(np.mean(res.losses[-50:])) if res.losses else None
        with _Stage(f"represent {name}", timings):
            docs = _represent(pseqs, lambda ch: represent_passages(ch, params), threads)
            queries = _represent(qseqs, lambda ch: represent_queries(ch, params), threads)
            entry["mean_nnz"] = float(np.mean([d.nnz for d in docs])) if docs else 0.0
            if mcfg.mode == EXPANSION:
                gates = [g for i in range(0, len(pseqs), 256) for g in gate_sets(pseqs[i : i + 256], params, EXPANSION)]
                entry["mean_expansions"] = float(np.mean([len(g - bow(s)) for g, s in zip(gates, pseqs)]))
        with _Stage(f"index {name}", timings):
            idx = build_index(zip(pids, docs), v=vocab.v)
        with _Stage(f"search {name}", timings):
            run = hits_to_run({q: search(idx, v, k) for (q, _), v in zip(data["queries"], queries)})
            entry["metrics"], entry["subsets"] = score(run)
        if "docs" in data:
            with _Stage(f"doc ranking {name}", timings):
                dr = cfg["doc_ranking"]
                rep = lambda texts: represent_passages([tokenize(t, vocab, max_len) for t in texts], params)  # noqa: E731
                widx = build_window_index(data["docs"], rep, dr.get("window", 64), dr.get("stride", 32), v=vocab.v)
                drun = hits_to_run({q: max_passage_search(widx, v, k) for (q, _), v in zip(data["queries"], queries)})
                entry["doc_metrics"] = _round(evaluate(drun, data["doc_qrels"], mk["mrr"], mk["recall"]))
        runs_out[name] = entry
    report["runs"] = runs_out
    timings["total"] = round(time.perf_counter() - t_start, 3)
    report["wall_clock"] = timings
    return report


def format_table(report: dict) -> str:
    """Metrics as percentages with two decimals, one row per system."""
    rows = [(f"BM25" if n == "bm25" else "tf", b["metrics"]) for n, b in report.get("baselines", {}).items()]
    rows += [(n, r["metrics"]) for n, r in report.get("runs", {}).items()]
    if not rows:
        return ""
    cols = list(rows[0][1])
    width = max(len(n) for n, _ in rows)
    lines = [" ".join([" " * width] + [f"{c:>11}" for c in cols])]
    for name, m in rows:
        lines.append(" ".join([f"{name:<{width}}"] + [f"{100 * m[c]:>11.2f}" for c in cols]))
    return "\n".join(lines)
