"""Ranking metrics, TREC run files, max-passage document ranking, attribution."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .index import InvertedIndex, ScoredHit, build_index, search
from .model import ModelParams, represent_passages, represent_query, tower_forward
from .sparse import SparseVector
from .textcore import TokenSeq, Vocabulary, bow, normalize, read_tsv, tokenize

log = logging.getLogger(__name__)

Qrels = dict[str, set[str]]
RunFile = dict[str, list[tuple[str, float]]]


def read_qrels(path) -> Qrels:
    qrels: Qrels = defaultdict(set)
    for qid, pid in read_tsv(path, 2):
        qrels[qid].add(pid)
    return dict(qrels)


def write_qrels(path, qrels: Mapping[str, set[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qrels:
            for pid in sorted(qrels[qid]):
                fh.write(f"{qid}\t{pid}\n")


def write_run(path, run: RunFile, tag: str = "termsparse") -> None:
    """TREC six-column run: ``qid Q0 docid rank score tag``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, hits in run.items():
            for rank, (doc, score) in enumerate(hits, 1):
                fh.write(f"{qid} Q0 {doc} {rank} {score!r} {tag}\n")


def read_run(path) -> RunFile:
    run: dict[str, list[tuple[int, str, float]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns")
            qid, _, doc, rank, score, _ = parts
            run[qid].append((int(rank), doc, float(score)))
    out: RunFile = {}
    for qid, rows in run.items():
        rows.sort()
        if [r for r, _, _ in rows] != list(range(1, len(rows) + 1)):
            raise ValueError(f"run for query {qid} has non-contiguous ranks")
        out[qid] = [(d, s) for _, d, s in rows]
    return out


def hits_to_run(results: Mapping[str, Sequence[ScoredHit]]) -> RunFile:
    return {qid: [(h.doc, h.score) for h in hits] for qid, hits in results.items()}


def _judged(run: RunFile, qrels: Qrels) -> int:
    skipped = sum(1 for qid in run if qid not in qrels)
    if skipped:
        log.warning("%d run queries have no relevance judgments; skipped", skipped)
    return skipped


def mrr_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> float:
    """Mean reciprocal rank of the first relevant hit within the top ``k``.

    Averaged over the judged queries; a judged query with no run scores 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _judged(run, qrels)
    if not qrels:
        return 0.0
    total = 0.0
    for qid, rel in qrels.items():
        for rank, (doc, _) in enumerate(run.get(qid, [])[:k], 1):
            if doc in rel:
                total += 1.0 / rank
                break
    return total / len(qrels)


def recall_at_k(run: RunFile, qrels: Qrels, k: int = 100) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _judged(run, qrels)
    if not qrels:
        return 0.0
    total = 0.0
    for qid, rel in qrels.items():
        top = {doc for doc, _ in run.get(qid, [])[:k]}
        total += len(rel & top) / len(rel)
    return total / len(qrels)


def evaluate(run: RunFile, qrels: Qrels, mrr_ks=(10,), recall_ks=(10, 100, 1000)) -> dict[str, float]:
    out = {f"MRR@{k}": mrr_at_k(run, qrels, k) for k in mrr_ks}
    out.update({f"Recall@{k}": recall_at_k(run, qrels, k) for k in recall_ks})
    return out


# --------------------------------------------------------------------------
# Document ranking by best passage
# --------------------------------------------------------------------------


def split_windows(text: str, window: int = 64, stride: int = 32) -> list[str]:
    """Overlapping term windows covering the whole text (at least one window)."""
    if not window >= stride >= 1:
        raise ValueError("need window >= stride >= 1")
    terms = normalize(text)
    n = len(terms)
    starts = list(range(0, max(n - window, 0) + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return [" ".join(terms[s : s + window]) for s in starts]


@dataclass
class WindowIndex:
    """Index over document windows; window ``i`` belongs to ``owner[i]``."""

    index: InvertedIndex
    owner: list[int]
    doc_ids: list[str]


def build_window_index(
    docs: Sequence[tuple[str, str]],
    represent: Callable[[list[str]], list[SparseVector]],
    window: int = 64,
    stride: int = 32,
    v: int | None = None,
) -> WindowIndex:
    texts, owner = [], []
    for d, (_, text) in enumerate(docs):
        for w in split_windows(text, window, stride):
            texts.append(w)
            owner.append(d)
    vecs = represent(texts) if texts else []
    idx = build_index(((str(i), vec) for i, vec in enumerate(vecs)), v=v)
    return WindowIndex(idx, owner, [d for d, _ in docs])


def max_passage_search(widx: WindowIndex, q: SparseVector, k: int) -> list[ScoredHit]:
    """Score each document by its best window; ties go to the earlier document."""
    if k < 1:
        raise ValueError("k must be >= 1")
    best: dict[int, float] = {}
    for hit in search(widx.index, q, max(widx.index.doc_count, 1)):
        d = widx.owner[int(hit.doc)]
        if d not in best or hit.score > best[d]:
            best[d] = hit.score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [ScoredHit(widx.doc_ids[d], s) for d, s in ranked]


def passage_retrieval_max(
    docs: Sequence[tuple[str, str]],
    query: str,
    window: int,
    stride: int,
    model: tuple[ModelParams, Vocabulary],
    k: int,
) -> list[ScoredHit]:
    """Rank documents by the maximum score of their windows for one query.

    Windows longer than the model's ``max_len - 1`` are truncated when
    tokenized.
    """
    params, vocab = model
    L = params.cfg.max_len

    def rep(texts):
        return represent_passages([tokenize(t, vocab, L) for t in texts], params)

    widx = build_window_index(docs, rep, window, stride, v=params.cfg.v)
    q = represent_query(tokenize(query, vocab, L), params)
    return max_passage_search(widx, q, k)


# --------------------------------------------------------------------------
# Expansion attribution
# --------------------------------------------------------------------------


@dataclass
class AttributionReport:
    """Where an expanded term's gating logit comes from.

    ``contributions`` holds ``(token, position, logit)`` sorted by logit
    descending; the logits are post-Relu per-position values, so summing all
    of them (not only the top ``n``) gives ``aggregate_logit``.
    """

    term: str
    contributions: list[tuple[str, int, float]]
    aggregate_logit: float
    probability: float


def attribute(tokens: Sequence[str], column: np.ndarray, term: str, n: int = 5) -> AttributionReport:
    """Build a report from one vocabulary column of per-position gating logits."""
    if n < 1:
        raise ValueError("n must be >= 1")
    contrib = nx.relu(np.asarray(column, dtype=np.float64))
    order = sorted(range(len(tokens)), key=lambda i: (-contrib[i], i))[:n]
    total = float(contrib.sum())
    return AttributionReport(
        term=term,
        contributions=[(tokens[i], i, float(contrib[i])) for i in order],
        aggregate_logit=total,
        probability=float(nx.sigmoid(total)),
    )


def explain_expansion(seq: TokenSeq, term_id: int, params: ModelParams, vocab: Vocabulary, n: int = 5) -> AttributionReport:
    """Top-``n`` passage tokens driving the gate of an expanded term.

    Raises:
        ValueError: "term not in expansion set" if the term is literal or
            below the gating threshold.
    """
    if params.gating is None:
        raise ValueError("model has no gating controller")
    cfg = params.cfg
    out = tower_forward(params.gating.tower, [seq], cfg.n_layers, cfg.include_cls)
    G = nx.sigmoid(out.pooled[0])
    if term_id in bow(seq) or not G[term_id] >= params.gating.threshold:
        raise ValueError("term not in expansion set")
    positions = np.flatnonzero(out.mask[0])
    tokens = [vocab.term(seq.ids[i]) for i in positions]
    column = out.logits[0, positions, term_id]
    return attribute(tokens, column, vocab.term(term_id), n)
