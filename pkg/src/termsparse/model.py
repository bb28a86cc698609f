"""Sparse term representation network.

A *tower* is a small transformer encoder plus an MLM-style head whose output
projection is the tower's own input embedding matrix ``E``. The importance
tower scores every vocabulary term, the gating tower decides which terms may
appear; the representation is their product, kept sparse.

Towers are plain ``dict[str, ndarray]`` objects with keys::

    E, pos, l{n}.Wq, l{n}.Wk, l{n}.Wv, l{n}.Wo, l{n}.ln1_g, l{n}.ln1_b,
    l{n}.W1, l{n}.b1, l{n}.W2, l{n}.b2, l{n}.ln2_g, l{n}.ln2_b,
    head.Wt, head.bt, head.ln_g, head.ln_b, head.b
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .sparse import SparseVector
from .textcore import CLS_ID, PAD_ID, TokenSeq, bow

Tower = dict

LITERAL = "literal-only"
EXPANSION = "expansion-enhanced"
MODES = (LITERAL, EXPANSION)

QUERY_TF = "query-tf"
SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
STRATEGIES = (QUERY_TF, SYMMETRIC, ASYMMETRIC)

LN_EPS = 1e-5
_NEG_INF = -1e30


@dataclass
class ModelConfig:
    v: int
    d: int = 32
    n_layers: int = 2
    d_ff: int = 64
    max_len: int = 64
    threshold: float = 0.7
    lambda_cap: int | None = None
    strategy: str = SYMMETRIC
    mode: str = LITERAL
    init_std: float = 0.02
    include_cls: bool = True

    def __post_init__(self):
        if self.d < 4:
            raise ValueError("d must be >= 4")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown query strategy {self.strategy!r}")

    def cap_for(self, n_bow: int) -> int:
        if self.lambda_cap is not None:
            return self.lambda_cap
        return max(64, 4 * n_bow)


def init_tower(cfg: ModelConfig, rng: np.random.Generator) -> Tower:
    d, dff, v, s = cfg.d, cfg.d_ff, cfg.v, cfg.init_std
    t: Tower = {"E": rng.normal(0.0, s, (v, d)), "pos": rng.normal(0.0, s, (cfg.max_len, d))}
    for n in range(cfg.n_layers):
        p = f"l{n}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            t[p + w] = rng.normal(0.0, s, (d, d))
        t[p + "ln1_g"] = np.ones(d)
        t[p + "ln1_b"] = np.zeros(d)
        t[p + "W1"] = rng.normal(0.0, s, (dff, d))
        t[p + "b1"] = np.zeros(dff)
        t[p + "W2"] = rng.normal(0.0, s, (d, dff))
        t[p + "b2"] = np.zeros(d)
        t[p + "ln2_g"] = np.ones(d)
        t[p + "ln2_b"] = np.zeros(d)
    t["head.Wt"] = rng.normal(0.0, s, (d, d))
    t["head.bt"] = np.zeros(d)
    t["head.ln_g"] = np.ones(d)
    t["head.ln_b"] = np.zeros(d)
    t["head.b"] = np.zeros(v)
    return t


def copy_tower(t: Tower) -> Tower:
    return {k: a.copy() for k, a in t.items()}


@dataclass
class GatingParams:
    tower: Tower
    threshold: float = 0.7


@dataclass
class ModelParams:
    """All trainable state.

    ``query`` is ``None`` unless the strategy is asymmetric; ``gating`` is
    ``None`` for a literal-only model.
    """

    cfg: ModelConfig
    importance: Tower
    gating: GatingParams | None = None
    query: Tower | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        importance = init_tower(cfg, rng)
        gating = GatingParams(init_tower(cfg, rng), cfg.threshold) if cfg.mode == EXPANSION else None
        query = init_tower(cfg, rng) if cfg.strategy == ASYMMETRIC else None
        return cls(cfg, importance, gating, query)

    def query_tower(self) -> Tower | None:
        if self.cfg.strategy == QUERY_TF:
            return None
        if self.cfg.strategy == SYMMETRIC:
            return self.importance
        return self.query

    # -- persistence ---------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, a in self.importance.items():
            out[("imp." + k[5:]) if k.startswith("head.") else ("enc." + k)] = a
        if self.gating is not None:
            out.update({"gate." + k: a for k, a in self.gating.tower.items()})
        if self.query is not None:
            out.update({"qenc." + k: a for k, a in self.query.items()})
        return out

    def save(self, path) -> None:
        path = Path(path)
        nx.save_checkpoint(path, self.tensors())
        meta = asdict(self.cfg)
        meta["λ_cap"] = meta.pop("lambda_cap")
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "ModelParams":
        meta = json.loads(Path(str(path) + ".json").read_text())
        meta["lambda_cap"] = meta.pop("λ_cap")
        cfg = ModelConfig(**meta)
        template = cls.init(cfg, seed=0)
        raw = nx.load_checkpoint(path)
        expected = template.tensors()
        if set(raw) != set(expected):
            missing = sorted(set(expected) ^ set(raw))
            raise ValueError(f"checkpoint tensors do not match config: {missing[:5]}")
        for name, arr in expected.items():
            if raw[name].size != arr.size:
                raise ValueError(f"checkpoint tensor {name} has wrong size")
            arr[...] = raw[name].reshape(arr.shape)
        return template


# --------------------------------------------------------------------------
# Tower forward / backward
# --------------------------------------------------------------------------


def pad_batch(seqs: Sequence[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s.ids
        mask[r, : len(s)] = True
    return ids, mask


def _encode_fwd(t: Tower, ids: np.ndarray, mask: np.ndarray, n_layers: int):
    B, L = ids.shape
    if L > t["pos"].shape[0]:
        raise ValueError(f"sequence length {L} exceeds max_len {t['pos'].shape[0]}")
    d = t["E"].shape[1]
    scale = 1.0 / math.sqrt(d)
    x = t["E"][ids] + t["pos"][:L]
    key_bias = np.where(mask, 0.0, _NEG_INF)[:, None, :]
    caches = []
    for n in range(n_layers):
        p = f"l{n}."
        q = x @ t[p + "Wq"].T
        k = x @ t[p + "Wk"].T
        vv = x @ t[p + "Wv"].T
        A = nx.softmax(q @ k.transpose(0, 2, 1) * scale + key_bias)
        ctx = A @ vv
        o = ctx @ t[p + "Wo"].T
        x1, ln1 = nx.layer_norm_fwd(x + o, t[p + "ln1_g"], t[p + "ln1_b"], LN_EPS)
        u = x1 @ t[p + "W1"].T + t[p + "b1"]
        g = nx.gelu(u)
        f = g @ t[p + "W2"].T + t[p + "b2"]
        x2, ln2 = nx.layer_norm_fwd(x1 + f, t[p + "ln2_g"], t[p + "ln2_b"], LN_EPS)
        caches.append((x, q, k, vv, A, ctx, ln1, x1, u, g, ln2))
        x = x2
    return x, caches


def _encode_bwd(t: Tower, dx: np.ndarray, ids: np.ndarray, caches, grads: dict) -> None:
    d = t["E"].shape[1]
    scale = 1.0 / math.sqrt(d)
    for n in reversed(range(len(caches))):
        p = f"l{n}."
        x, q, k, vv, A, ctx, ln1, x1, u, g, ln2 = caches[n]
        dr2, grads[p + "ln2_g"], grads[p + "ln2_b"] = nx.layer_norm_bwd(dx, ln2)
        df = dr2
        grads[p + "W2"] = np.einsum("bli,blj->ij", df, g)
        grads[p + "b2"] = df.sum(axis=(0, 1))
        du = (df @ t[p + "W2"]) * nx.gelu_grad(u)
        grads[p + "W1"] = np.einsum("bli,blj->ij", du, x1)
        grads[p + "b1"] = du.sum(axis=(0, 1))
        dx1 = dr2 + du @ t[p + "W1"]
        dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = nx.layer_norm_bwd(dx1, ln1)
        do = dr1
        grads[p + "Wo"] = np.einsum("bli,blj->ij", do, ctx)
        dctx = do @ t[p + "Wo"]
        dA = dctx @ vv.transpose(0, 2, 1)
        dvv = A.transpose(0, 2, 1) @ dctx
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dq = dS @ k
        dk = dS.transpose(0, 2, 1) @ q
        grads[p + "Wq"] = np.einsum("bli,blj->ij", dq, x)
        grads[p + "Wk"] = np.einsum("bli,blj->ij", dk, x)
        grads[p + "Wv"] = np.einsum("bli,blj->ij", dvv, x)
        dx = dr1 + dq @ t[p + "Wq"] + dk @ t[p + "Wk"] + dvv @ t[p + "Wv"]
    L = ids.shape[1]
    dpos = np.zeros_like(t["pos"])
    dpos[:L] = dx.sum(axis=0)
    grads["pos"] = dpos
    dE = grads.setdefault("E", np.zeros_like(t["E"]))
    np.add.at(dE, ids.reshape(-1), dx.reshape(-1, d))


def _head_fwd(t: Tower, h: np.ndarray):
    u = h @ t["head.Wt"].T + t["head.bt"]
    g = nx.gelu(u)
    z, ln = nx.layer_norm_fwd(g, t["head.ln_g"], t["head.ln_b"], LN_EPS)
    logits = z @ t["E"].T + t["head.b"]
    return logits, (h, u, ln, z)


def _head_bwd(t: Tower, dlogits: np.ndarray, cache, grads: dict) -> np.ndarray:
    h, u, ln, z = cache
    v, d = t["E"].shape
    flat_dl = dlogits.reshape(-1, v)
    grads["E"] = flat_dl.T @ z.reshape(-1, d)
    grads["head.b"] = flat_dl.sum(axis=0)
    dz = dlogits @ t["E"]
    dg, grads["head.ln_g"], grads["head.ln_b"] = nx.layer_norm_bwd(dz, ln)
    du = dg * nx.gelu_grad(u)
    grads["head.Wt"] = np.einsum("bli,blj->ij", du, h)
    grads["head.bt"] = du.sum(axis=(0, 1))
    return du @ t["head.Wt"]


@dataclass
class TowerOutput:
    """Token logits and pooled (Relu-summed) term scores for a padded batch."""

    ids: np.ndarray
    mask: np.ndarray
    logits: np.ndarray
    pooled: np.ndarray
    _cache: tuple = field(repr=False, default=())


def tower_forward(t: Tower, seqs: Sequence[TokenSeq], n_layers: int, include_cls: bool = True) -> TowerOutput:
    ids, mask = pad_batch(seqs)
    h, enc_cache = _encode_fwd(t, ids, mask, n_layers)
    logits, head_cache = _head_fwd(t, h)
    pool_mask = mask.copy()
    if not include_cls:
        pool_mask &= ids != CLS_ID
    pooled = (nx.relu(logits) * pool_mask[:, :, None]).sum(axis=1)
    return TowerOutput(ids, pool_mask, logits, pooled, (mask, enc_cache, head_cache))


def tower_backward(t: Tower, out: TowerOutput, dpooled: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss w.r.t. tower parameters given d loss / d pooled."""
    _, enc_cache, head_cache = out._cache
    gate = (out.logits > 0) & out.mask[:, :, None]
    dlogits = dpooled[:, None, :] * gate
    grads: dict[str, np.ndarray] = {}
    dh = _head_bwd(t, dlogits, head_cache, grads)
    _encode_bwd(t, dh, out.ids, enc_cache, grads)
    return grads


# --------------------------------------------------------------------------
# Single-instance operations
# --------------------------------------------------------------------------


def encode(seq: TokenSeq, t: Tower, n_layers: int) -> np.ndarray:
    """Contextual vectors ``h_0 .. h_{L-1}`` as an ``(L, d)`` array."""
    ids, mask = pad_batch([seq])
    h, _ = _encode_fwd(t, ids, mask, n_layers)
    return h[0]


def token_importance(h: np.ndarray, head: Tower) -> np.ndarray:
    """``LN(gelu(h Wt^T + bt)) E^T + b`` for one contextual vector.

    ``head`` must carry ``E`` and the ``head.*`` entries.
    """
    u = nx.linear(h, head["head.Wt"], head["head.bt"])
    z = nx.layer_norm(nx.gelu(u), head["head.ln_g"], head["head.ln_b"], LN_EPS)
    return nx.linear(z, head["E"], head["head.b"])


def passage_importance(token_scores: Sequence[np.ndarray]) -> np.ndarray:
    if len(token_scores) == 0:
        raise ValueError("need at least one token vector")
    return nx.relu(np.asarray(token_scores, dtype=np.float64)).sum(axis=0)


def literal_gate(b: Iterable[int]) -> frozenset[int]:
    return frozenset(b)


def gate_distribution(seq: TokenSeq, g: GatingParams, n_layers: int, include_cls: bool = True) -> np.ndarray:
    """Per-term probability of participating in the representation."""
    out = tower_forward(g.tower, [seq], n_layers, include_cls)
    return nx.sigmoid(out.pooled[0])


def expansion_gate(G: np.ndarray, b: Iterable[int], threshold: float) -> frozenset[int]:
    """Binarize ``G`` at ``threshold``, drop literal terms, then add them back.

    The expansion-only part is ``result - b``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    b = frozenset(b)
    fired = np.flatnonzero(np.asarray(G) >= threshold).tolist()
    expansion = frozenset(fired) - b
    return expansion | b


def sparse_rep(I: np.ndarray, gate: Iterable[int], lambda_cap: int) -> SparseVector:
    """Keep gated terms with positive importance, at most ``lambda_cap`` of them.

    When truncating, the largest weights win and ties go to the lower term id.
    """
    if lambda_cap < 1:
        raise ValueError("lambda_cap must be >= 1")
    ids = np.array(sorted(gate), dtype=np.int64)
    w = I[ids] if ids.size else np.zeros(0)
    keep = w > 0
    ids, w = ids[keep], w[keep]
    if ids.size > lambda_cap:
        order = np.lexsort((ids, -w))[:lambda_cap]
        order.sort()
        ids, w = ids[order], w[order]
    return SparseVector(ids, w.astype(np.float64), I.shape[0])


def query_tf(seq: TokenSeq) -> dict[int, float]:
    counts: dict[int, float] = {}
    for i in seq.ids:
        if i >= 4:
            counts[i] = counts.get(i, 0.0) + 1.0
    return counts


# --------------------------------------------------------------------------
# Batched representation
# --------------------------------------------------------------------------


def gate_sets(seqs: Sequence[TokenSeq], params: ModelParams, mode: str) -> list[frozenset[int]]:
    if mode == LITERAL:
        return [literal_gate(bow(s)) for s in seqs]
    if params.gating is None:
        raise ValueError("expansion-enhanced mode needs gating parameters")
    cfg = params.cfg
    out = tower_forward(params.gating.tower, seqs, cfg.n_layers, cfg.include_cls)
    G = nx.sigmoid(out.pooled)
    return [expansion_gate(G[r], bow(s), params.gating.threshold) for r, s in enumerate(seqs)]


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def represent_passages(
    seqs: Sequence[TokenSeq],
    params: ModelParams,
    mode: str | None = None,
    lambda_cap: int | None = None,
    batch_size: int = 64,
) -> list[SparseVector]:
    mode = mode or params.cfg.mode
    cfg = params.cfg
    reps: list[SparseVector] = []
    for a, b in _chunks(len(seqs), batch_size):
        chunk = seqs[a:b]
        out = tower_forward(params.importance, chunk, cfg.n_layers, cfg.include_cls)
        gates = gate_sets(chunk, params, mode)
        for r, s in enumerate(chunk):
            cap = lambda_cap if lambda_cap is not None else cfg.cap_for(len(bow(s)))
            reps.append(sparse_rep(out.pooled[r], gates[r], cap))
    return reps


def represent_passage(seq: TokenSeq, params: ModelParams, mode: str | None = None, lambda_cap: int | None = None) -> SparseVector:
    return represent_passages([seq], params, mode, lambda_cap)[0]


def represent_queries(
    seqs: Sequence[TokenSeq],
    params: ModelParams,
    strategy: str | None = None,
    batch_size: int = 64,
) -> list[SparseVector]:
    strategy = strategy or params.cfg.strategy
    v = params.cfg.v
    if strategy == QUERY_TF:
        return [SparseVector.from_pairs(query_tf(s), v) for s in seqs]
    if strategy == SYMMETRIC:
        tower = params.importance
    elif strategy == ASYMMETRIC:
        if params.query is None:
            raise ValueError("asymmetric strategy needs a query tower")
        tower = params.query
    else:
        raise ValueError(f"unknown query strategy {strategy!r}")
    cfg = params.cfg
    reps = []
    for a, b in _chunks(len(seqs), batch_size):
        chunk = seqs[a:b]
        out = tower_forward(tower, chunk, cfg.n_layers, cfg.include_cls)
        for r, s in enumerate(chunk):
            reps.append(sparse_rep(out.pooled[r], bow(s), cfg.cap_for(len(bow(s)))))
    return reps


def represent_query(seq: TokenSeq, params: ModelParams, strategy: str | None = None) -> SparseVector:
    return represent_queries([seq], params, strategy)[0]
