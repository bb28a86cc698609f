"""Ranking and expansion losses and the two-phase training schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import (
    ASYMMETRIC,
    EXPANSION,
    LITERAL,
    QUERY_TF,
    SYMMETRIC,
    GatingParams,
    ModelParams,
    gate_sets,
    query_tf,
    sparse_rep,
    tower_backward,
    tower_forward,
)
from .sparse import SparseVector
from .textcore import TokenSeq, Vocabulary, bow, read_tsv, tokenize

log = logging.getLogger(__name__)

PASSAGE2QUERY = "passage2query"
SUMMARIZATION = "summarization"
PAIR_KINDS = (PASSAGE2QUERY, SUMMARIZATION)

BCE_EPS = 1e-12


@dataclass(frozen=True)
class TrainingTriple:
    query: str
    positive: str
    negative: str


@dataclass(frozen=True)
class ParallelPair:
    passage: str
    target: str
    kind: str = PASSAGE2QUERY

    def __post_init__(self):
        if not self.target.strip():
            raise ValueError("parallel pair target must be non-empty")
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 8
    gating_iterations: int = 2000
    joint_iterations: int = 5000
    lambda1: float = 1e-3
    lambda2: float = 1.0
    seed: int = 0
    lambda_cap: int | None = None
    threshold: float = 0.7
    unfreeze_gating: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("lambda1 and lambda2 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    params: ModelParams | GatingParams
    losses: list[float] = field(default_factory=list)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _gather(vec: SparseVector, ids: np.ndarray) -> np.ndarray:
    """Weights of ``vec`` at ``ids`` (0 where absent)."""
    if vec.ids.size == 0:
        return np.zeros(ids.shape)
    pos = np.minimum(np.searchsorted(vec.ids, ids), vec.ids.size - 1)
    return np.where(vec.ids[pos] == ids, vec.weights[pos], 0.0)


def rank_loss(q: SparseVector, pos: SparseVector, neg: SparseVector):
    """Softmax cross-entropy of the positive passage against one negative.

    Similarity is the sparse dot product. Returns ``(loss, (gq, gpos, gneg))``
    where each gradient array is aligned with the entries of its vector.
    """
    if not (q.dim == pos.dim == neg.dim):
        raise ValueError("sparse vectors live in different vocabularies")
    s_pos, s_neg = q.dot(pos), q.dot(neg)
    margin = s_neg - s_pos
    loss = float(np.logaddexp(0.0, margin))
    w = float(nx.sigmoid(margin))  # = -dL/ds_pos = dL/ds_neg
    gq = -w * _gather(pos, q.ids) + w * _gather(neg, q.ids)
    gpos = -w * _gather(q, pos.ids)
    gneg = w * _gather(q, neg.ids)
    return loss, (gq, gpos, gneg)


def expansion_loss(G: np.ndarray, T, lambda1: float, lambda2: float):
    """Weighted binary cross-entropy of gate probabilities against target terms.

    ``T`` is the set of target term ids. Probabilities are clamped to
    ``[1e-12, 1 - 1e-12]`` before taking logs. Returns ``(loss, dL/dG)``.
    """
    raw = np.asarray(G, dtype=np.float64)
    G = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    target = np.zeros(G.shape, dtype=bool)
    ids = np.fromiter(T, dtype=np.int64) if len(T) else np.zeros(0, np.int64)
    target[ids] = True
    loss = -lambda1 * np.log1p(-G[~target]).sum() - lambda2 * np.log(G[target]).sum()
    # the clamp is flat outside [eps, 1 - eps], so no gradient flows there
    inside = (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)
    dG = np.where(inside, np.where(target, -lambda2 / G, lambda1 / (1.0 - G)), 0.0)
    return float(loss), dG


def joint_loss(rank: float, expansion: float) -> float:
    return rank + expansion


# --------------------------------------------------------------------------
# Data loading
# --------------------------------------------------------------------------


def read_triples(path) -> list[TrainingTriple]:
    return [TrainingTriple(*row) for row in read_tsv(path, 3)]


def read_pairs(path) -> list[ParallelPair]:
    return [ParallelPair(*row) for row in read_tsv(path, 3)]


def write_loss_curve(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])


class _Batcher:
    """Deterministic shuffled epochs over ``n`` items."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("empty training stream")
        self.n, self.bs, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.bs:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.bs - len(out), self.n - self.pos)
            out.extend(self.order[self.pos : self.pos + take])
            self.pos += take
        return np.array(out)


def _check_finite(loss: float, phase: str) -> None:
    if not np.isfinite(loss):
        raise nx.NumericalError(f"{phase}: loss diverged ({loss})")


# --------------------------------------------------------------------------
# Phase 1: gating controller
# --------------------------------------------------------------------------


def gating_batch_loss(g: GatingParams, seqs: Sequence[TokenSeq], targets: Sequence[frozenset[int]], cfg: TrainConfig, n_layers: int, include_cls: bool = True, need_grad: bool = True):
    out = tower_forward(g.tower, seqs, n_layers, include_cls)
    G = nx.sigmoid(out.pooled)
    B = len(seqs)
    total = 0.0
    dpooled = np.zeros_like(G)
    for r in range(B):
        loss, dG = expansion_loss(G[r], targets[r], cfg.lambda1, cfg.lambda2)
        total += loss
        dpooled[r] = dG * G[r] * (1.0 - G[r])
    total /= B
    if not need_grad:
        return total, None
    grads = tower_backward(g.tower, out, dpooled / B)
    return total, grads


def encode_pairs(pairs: Sequence[ParallelPair], vocab: Vocabulary, max_len: int):
    seqs = [tokenize(p.passage, vocab, max_len) for p in pairs]
    targets = [bow(tokenize(p.target, vocab, max_len)) for p in pairs]
    return seqs, targets


def train_gating(pairs: Sequence[ParallelPair], cfg: TrainConfig, params: ModelParams, vocab: Vocabulary) -> TrainResult:
    """Fit the gating tower on the parallel corpus with the expansion loss only.

    The gating parameters of ``params`` are updated in place and returned.
    """
    if params.gating is None:
        raise ValueError("model has no gating controller (literal-only mode)")
    if len(pairs) == 0:
        raise ValueError("empty parallel corpus")
    mcfg = params.cfg
    seqs, targets = encode_pairs(pairs, vocab, mcfg.max_len)
    rng = np.random.default_rng(cfg.seed)
    batcher = _Batcher(len(pairs), cfg.batch_size, rng)
    state = nx.AdamState()
    g = params.gating
    g.threshold = cfg.threshold
    losses = []
    for it in range(cfg.gating_iterations):
        idx = batcher.next()
        loss, grads = gating_batch_loss(g, [seqs[i] for i in idx], [targets[i] for i in idx], cfg, mcfg.n_layers, mcfg.include_cls)
        _check_finite(loss, "train gating")
        nx.adam_step(g.tower, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses.append(loss)
        if (it + 1) % 500 == 0:
            log.info("gating iter %d loss %.5f", it + 1, np.mean(losses[-500:]))
    return TrainResult(g, losses)


# --------------------------------------------------------------------------
# Phase 2: importance predictor (joint objective, gating frozen by default)
# --------------------------------------------------------------------------


class _GateCache:
    """Gate sets per passage; valid because the gating tower is frozen."""

    def __init__(self, params: ModelParams, mode: str):
        self.params, self.mode = params, mode
        self.cache: dict[tuple[int, ...], frozenset[int]] = {}

    def get(self, seqs: Sequence[TokenSeq], frozen: bool) -> list[frozenset[int]]:
        if not frozen or self.mode == LITERAL:
            return gate_sets(seqs, self.params, self.mode)
        missing = [s for s in seqs if s.ids not in self.cache]
        if missing:
            uniq = list({s.ids: s for s in missing}.values())
            for s, gset in zip(uniq, gate_sets(uniq, self.params, self.mode)):
                self.cache[s.ids] = gset
        return [self.cache[s.ids] for s in seqs]


def rank_batch_loss(params: ModelParams, qseqs, pseqs, nseqs, pgates, ngates, need_grad: bool = True):
    """Mean rank loss over a batch and the gradients for each trainable tower.

    Returns ``(loss, {"importance": grads, "query": grads})``; the query entry
    is present only for the asymmetric strategy.
    """
    cfg = params.cfg
    B = len(qseqs)
    strategy = cfg.strategy
    passage_seqs = list(pseqs) + list(nseqs)
    if strategy == SYMMETRIC:
        passage_seqs += list(qseqs)
    out = tower_forward(params.importance, passage_seqs, cfg.n_layers, cfg.include_cls)
    qout = None
    if strategy == ASYMMETRIC:
        qout = tower_forward(params.query, qseqs, cfg.n_layers, cfg.include_cls)

    dpooled = np.zeros_like(out.pooled)
    dq_pooled = np.zeros_like(qout.pooled) if qout is not None else None
    total = 0.0
    for r in range(B):
        qb = bow(qseqs[r])
        if strategy == QUERY_TF:
            q = SparseVector.from_pairs(query_tf(qseqs[r]), cfg.v)
        elif strategy == SYMMETRIC:
            q = sparse_rep(out.pooled[2 * B + r], qb, cfg.cap_for(len(qb)))
        else:
            q = sparse_rep(qout.pooled[r], qb, cfg.cap_for(len(qb)))
        p = sparse_rep(out.pooled[r], pgates[r], cfg.cap_for(len(bow(pseqs[r]))))
        n = sparse_rep(out.pooled[B + r], ngates[r], cfg.cap_for(len(bow(nseqs[r]))))
        loss, (gq, gp, gn) = rank_loss(q, p, n)
        total += loss
        dpooled[r, p.ids] += gp
        dpooled[B + r, n.ids] += gn
        if strategy == SYMMETRIC:
            dpooled[2 * B + r, q.ids] += gq
        elif strategy == ASYMMETRIC:
            dq_pooled[r, q.ids] += gq
    total /= B
    if not need_grad:
        return total, None
    grads = {"importance": tower_backward(params.importance, out, dpooled / B)}
    if qout is not None:
        grads["query"] = tower_backward(params.query, qout, dq_pooled / B)
    return total, grads


def train_joint(
    triples: Sequence[TrainingTriple],
    pairs: Sequence[ParallelPair] | None,
    cfg: TrainConfig,
    params: ModelParams,
    vocab: Vocabulary,
) -> TrainResult:
    """Train the importance predictor (and query tower) on ranking triples.

    The gating tower stays frozen unless ``cfg.unfreeze_gating``, in which
    case each step also takes an expansion-loss step on a batch of pairs and
    the recorded loss is the joint sum.
    """
    if len(triples) == 0:
        raise ValueError("empty triples stream")
    mcfg = params.cfg
    if cfg.lambda_cap is not None:
        # the trained model keeps the cap it was trained with
        mcfg.lambda_cap = cfg.lambda_cap
    mode = mcfg.mode
    if mode == EXPANSION and params.gating is None:
        raise ValueError("expansion-enhanced mode needs a trained gating controller")
    unfreeze = cfg.unfreeze_gating and mode == EXPANSION
    if unfreeze and not pairs:
        raise ValueError("unfreezing the gating controller needs parallel pairs")

    tok = lambda s: tokenize(s, vocab, mcfg.max_len)  # noqa: E731
    qs = [tok(t.query) for t in triples]
    ps = [tok(t.positive) for t in triples]
    ns = [tok(t.negative) for t in triples]
    rng = np.random.default_rng(cfg.seed)
    batcher = _Batcher(len(triples), cfg.batch_size, rng)
    gate_cache = _GateCache(params, mode)
    if unfreeze:
        pseqs, ptargets = encode_pairs(pairs, vocab, mcfg.max_len)
        pair_batcher = _Batcher(len(pairs), cfg.batch_size, np.random.default_rng(cfg.seed + 1))
        gstate = nx.AdamState()

    state = nx.AdamState()
    losses = []
    for it in range(cfg.joint_iterations):
        idx = batcher.next()
        qb = [qs[i] for i in idx]
        pb = [ps[i] for i in idx]
        nb = [ns[i] for i in idx]
        pg = gate_cache.get(pb, frozen=not unfreeze)
        ng = gate_cache.get(nb, frozen=not unfreeze)
        loss, grads = rank_batch_loss(params, qb, pb, nb, pg, ng)
        exp_loss = 0.0
        if unfreeze:
            pidx = pair_batcher.next()
            exp_loss, ggrads = gating_batch_loss(params.gating, [pseqs[i] for i in pidx], [ptargets[i] for i in pidx], cfg, mcfg.n_layers, mcfg.include_cls)
            nx.adam_step(params.gating.tower, ggrads, gstate, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        total = joint_loss(loss, exp_loss)
        _check_finite(total, "train joint")
        flat = {"imp." + k: g for k, g in grads["importance"].items()}
        if "query" in grads:
            flat.update({"q." + k: g for k, g in grads["query"].items()})
        _adam_towers(params, flat, state, cfg)
        losses.append(total)
        if (it + 1) % 500 == 0:
            log.info("joint iter %d loss %.5f", it + 1, np.mean(losses[-500:]))
    return TrainResult(params, losses)


def _adam_towers(params: ModelParams, flat_grads: dict, state: nx.AdamState, cfg: TrainConfig) -> None:
    view = {"imp." + k: a for k, a in params.importance.items()}
    if params.query is not None:
        view.update({"q." + k: a for k, a in params.query.items()})
    # arrays are updated in place, so the towers see the new values
    nx.adam_step(view, flat_grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
