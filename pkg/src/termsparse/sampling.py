"""Training-triple and dev-set construction from BM25 pools."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .index import InvertedIndex, bm25_search
from .textcore import Vocabulary, term_ids
from .training import TrainingTriple


def make_triples(
    queries: Sequence[tuple[str, str]],
    qrels: Mapping[str, set[str]],
    corpus: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    bm25: InvertedIndex,
    seed: int = 0,
    depth: int = 100,
) -> list[TrainingTriple]:
    """Two triples per relevant passage, one BM25 negative and one random negative.

    The BM25 negative is drawn uniformly from the non-relevant passages in
    the query's BM25 top-``depth`` (``depth=1`` takes the single best one).
    Queries whose pool has no non-relevant passage get two random negatives.
    """
    rng = np.random.default_rng(seed)
    text = dict(corpus)
    ids = [pid for pid, _ in corpus]
    triples = []
    for qid, qtext in queries:
        rel = qrels.get(qid)
        if not rel:
            continue
        pool = [h.doc for h in bm25_search(bm25, term_ids(qtext, vocab), depth) if h.doc not in rel]
        for pos in sorted(rel):
            negs = []
            if pool:
                negs.append(pool[rng.integers(len(pool))])
            while len(negs) < 2:
                cand = ids[rng.integers(len(ids))]
                if cand not in rel:
                    negs.append(cand)
            triples.extend(TrainingTriple(qtext, text[pos], text[n]) for n in negs)
    return triples


def make_devset(
    queries: Sequence[tuple[str, str]],
    qrels: Mapping[str, set[str]],
    corpus: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    bm25: InvertedIndex,
    n_queries: int,
    pool_depth: int = 1000,
    n_random: int = 0,
    seed: int = 0,
) -> tuple[list[tuple[str, str]], list[tuple[str, str]], dict[str, set[str]]]:
    """Sample judged queries and pool their BM25 top-N, relevant passages and random fill.

    Returns the sampled queries, the pooled sub-corpus (original order) and
    the matching qrels.
    """
    rng = np.random.default_rng(seed)
    judged = [(q, t) for q, t in queries if qrels.get(q)]
    pick = sorted(rng.choice(len(judged), size=min(n_queries, len(judged)), replace=False).tolist())
    sample = [judged[i] for i in pick]
    pool: set[str] = set()
    for qid, qtext in sample:
        pool.update(h.doc for h in bm25_search(bm25, term_ids(qtext, vocab), pool_depth))
        pool.update(qrels[qid])
    rest = [pid for pid, _ in corpus if pid not in pool]
    if n_random and rest:
        pool.update(rng.choice(rest, size=min(n_random, len(rest)), replace=False).tolist())
    sub = [(pid, t) for pid, t in corpus if pid in pool]
    return sample, sub, {q: set(qrels[q]) for q, _ in sample}
