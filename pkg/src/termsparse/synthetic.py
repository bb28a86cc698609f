"""Deterministic synthetic collections with controlled lexical mismatch.

Every passage is about one *concept* and one *attribute*. A concept has a
source word, which every passage about it contains, and a target word,
which queries use but only some passages contain. Queries name the
target word and the attribute. For a *mismatch* query the relevant
passage lacks the target word, so literal matching can only use the
attribute, which about ``n_passages / n_attrs`` passages share. Queries
also carry ``query_noise`` filler words absent from the relevant passage,
which frequency-based weighting cannot discount. Parallel
pairs (passage -> its query, passage -> short summary) teach the mapping
from source word to target word.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .training import PASSAGE2QUERY, SUMMARIZATION, ParallelPair

STOPWORDS = ("the", "of", "a", "in", "and", "is", "what", "to", "for", "how")
QUERY_TEMPLATES = (
    "what is the {t} {a}",
    "{t} of the {a}",
    "how is {a} for {t}",
    "{a} and {t}",
)

_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syll = rng.integers(2, 4)
        w = "".join(_CONS[rng.integers(len(_CONS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syll))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticCollection:
    corpus: list[tuple[str, str]]
    queries: list[tuple[str, str]]
    qrels: dict[str, set[str]]
    train_queries: list[tuple[str, str]]
    train_qrels: dict[str, set[str]]
    pairs: list[ParallelPair]
    mismatch: set[str] = field(default_factory=set)
    source_of: dict[str, str] = field(default_factory=dict)

    def documents(self, passages_per_doc: int = 4) -> tuple[list[tuple[str, str]], dict[str, set[str]]]:
        """Group consecutive passages into documents; relevance follows the passage."""
        docs, owner = [], {}
        for start in range(0, len(self.corpus), passages_per_doc):
            did = f"D{start // passages_per_doc}"
            chunk = self.corpus[start : start + passages_per_doc]
            docs.append((did, " ".join(text for _, text in chunk)))
            for pid, _ in chunk:
                owner[pid] = did
        qrels = {qid: {owner[p] for p in rel} for qid, rel in self.qrels.items()}
        return docs, qrels


def make_lexical_mismatch(
    seed: int = 0,
    n_passages: int = 2000,
    n_queries: int = 200,
    mismatch_frac: float = 0.5,
    n_concepts: int = 100,
    n_attrs: int = 40,
    n_fillers: int = 300,
    literal_target_frac: float = 0.8,
    n_train_queries: int | None = None,
    query_noise: int = 1,
) -> SyntheticCollection:
    """Generate a collection; identical arguments give identical output."""
    if n_concepts * n_attrs < n_passages:
        raise ValueError("not enough (concept, attribute) combinations for unique passages")
    rng = np.random.default_rng(seed)
    taken = set(STOPWORDS)
    src = _pseudo_words(n_concepts, rng, taken)
    tgt = _pseudo_words(n_concepts, rng, taken)
    attrs = _pseudo_words(n_attrs, rng, taken)
    fillers = _pseudo_words(n_fillers, rng, taken)

    combos = rng.choice(n_concepts * n_attrs, size=n_passages, replace=False)
    has_target = rng.random(n_passages) < literal_target_frac
    corpus, meta = [], []
    for i, combo in enumerate(combos.tolist()):
        c, a = divmod(combo, n_attrs)
        words = [src[c], attrs[a]]
        if has_target[i]:
            words.append(tgt[c])
        words += [fillers[j] for j in rng.choice(n_fillers, size=rng.integers(4, 9), replace=False)]
        words += [STOPWORDS[j] for j in rng.integers(len(STOPWORDS), size=rng.integers(3, 7))]
        rng.shuffle(words)
        pid = f"P{i}"
        corpus.append((pid, " ".join(words)))
        meta.append((c, a))

    n_mis = int(round(n_queries * mismatch_frac))
    without = [i for i in range(n_passages) if not has_target[i]]
    with_t = [i for i in range(n_passages) if has_target[i]]
    if n_mis > len(without) or n_queries - n_mis > len(with_t):
        raise ValueError("collection too small for the requested query mix")
    eval_mis = rng.choice(without, size=n_mis, replace=False).tolist()
    eval_lit = rng.choice(with_t, size=n_queries - n_mis, replace=False).tolist()
    eval_set = set(eval_mis) | set(eval_lit)

    def query_text(i: int) -> str:
        c, a = meta[i]
        tmpl = QUERY_TEMPLATES[rng.integers(len(QUERY_TEMPLATES))]
        text = tmpl.format(t=tgt[c], a=attrs[a])
        present = set(corpus[i][1].split())
        noise = [w for w in rng.permutation(fillers)[: query_noise + 10].tolist() if w not in present][:query_noise]
        return " ".join([text] + noise)

    queries, qrels, mismatch = [], {}, set()
    for n, i in enumerate(sorted(eval_mis + eval_lit)):
        qid = f"Q{n}"
        queries.append((qid, query_text(i)))
        qrels[qid] = {f"P{i}"}
        if i in eval_mis:
            mismatch.add(qid)

    train_pool = [i for i in range(n_passages) if i not in eval_set]
    if n_train_queries is not None:
        train_pool = sorted(rng.choice(train_pool, size=min(n_train_queries, len(train_pool)), replace=False).tolist())
    train_queries, train_qrels, pairs = [], {}, []
    for n, i in enumerate(train_pool):
        qid = f"T{n}"
        text = query_text(i)
        train_queries.append((qid, text))
        train_qrels[qid] = {f"P{i}"}
        c, _ = meta[i]
        pairs.append(ParallelPair(corpus[i][1], text, PASSAGE2QUERY))
        pairs.append(ParallelPair(corpus[i][1], f"{tgt[c]} {src[c]}", SUMMARIZATION))

    return SyntheticCollection(
        corpus=corpus,
        queries=queries,
        qrels=qrels,
        train_queries=train_queries,
        train_qrels=train_qrels,
        pairs=pairs,
        mismatch=mismatch,
        source_of={tgt[c]: src[c] for c in range(n_concepts)},
    )
