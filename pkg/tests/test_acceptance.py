"""Acceptance suite: one test per criterion, each reporting PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion lines are
repeated in the terminal summary. The lexical-mismatch experiment
(criteria 4 and 5) takes about three and a half minutes on one CPU.
"""

import copy
import json
import math
import time

import numpy as np
import pytest

from _acceptance import criterion
from _oracles import bm25_score, dot_oracle, expansion_instance, random_sparse, rank_instance, tower_gradcheck
from termsparse import numerics as nx
from termsparse.evaluation import mrr_at_k, passage_retrieval_max, recall_at_k, split_windows
from termsparse.experiment import run_experiment
from termsparse.index import bm25_index, bm25_search, brute_force_search, build_index, load_index, save_index, search
from termsparse.model import (
    ModelConfig,
    ModelParams,
    expansion_gate,
    gate_distribution,
    represent_passages,
    represent_query,
)
from termsparse.textcore import TokenSeq, bow, build_vocab, normalize, term_ids, tokenize

STRATEGIES = ("query-tf", "symmetric", "asymmetric")

MISMATCH_CONFIG = {
    "seed": 0,
    "runs": [
        {"name": "literal-only", "mode": "literal-only", "strategy": "symmetric"},
        {"name": "literal-query-tf", "mode": "literal-only", "strategy": "query-tf"},
        {"name": "literal-asymmetric", "mode": "literal-only", "strategy": "asymmetric"},
        {"name": "expansion-enhanced", "mode": "expansion-enhanced", "strategy": "symmetric"},
    ],
}

SMALL_CONFIG = {
    "seed": 5,
    "data": {"synthetic": {"n_passages": 200, "n_queries": 20, "n_concepts": 20, "n_attrs": 20, "n_fillers": 60}},
    "model": {"d": 8, "n_layers": 1, "d_ff": 16, "max_len": 32},
    "train": {"gating_iterations": 30, "joint_iterations": 30},
    "runs": MISMATCH_CONFIG["runs"],
}


@pytest.fixture(scope="module")
def mismatch_report():
    return run_experiment(MISMATCH_CONFIG)


def test_c1_index_matches_brute_force():
    with criterion(1, "inverted index == brute force on 10^4 docs x 100 queries, < 10 s"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        docs = [(f"d{i}", random_sparse(rng, 5000, 40)) for i in range(10_000)]
        queries = [random_sparse(rng, 5000, 30) for _ in range(100)]
        idx = build_index(docs)
        for q in queries:
            assert search(idx, q, 1000) == brute_force_search(docs, q, 1000)
        elapsed = time.perf_counter() - t0
        print(f"  elapsed {elapsed:.2f} s")
        assert elapsed < 10.0


def test_c2_gradient_fidelity():
    with criterion(2, "analytic vs central-difference gradients < 1e-4 on >= 50 instances, < 60 s"):
        t0 = time.perf_counter()
        errors = []
        for seed in range(15):
            for strategy in STRATEGIES:
                for tower, fn, key in rank_instance(seed, strategy):
                    errors.append(tower_gradcheck(tower, fn, key))
            for tower, fn, key in expansion_instance(seed):
                errors.append(tower_gradcheck(tower, fn, key))
        elapsed = time.perf_counter() - t0
        print(f"  {len(errors)} checks, worst {max(errors):.2e}, elapsed {elapsed:.1f} s")
        assert len(errors) >= 50
        assert max(errors) < 1e-4
        assert elapsed < 60.0


def test_c3_structural_invariants():
    with criterion(3, "gate and representation invariants hold on 1000 random passages"):
        v, threshold = 300, 0.7
        cfg = ModelConfig(v=v, d=8, n_layers=1, d_ff=16, max_len=32, mode="expansion-enhanced")
        params = ModelParams.init(cfg, seed=3)
        rng = np.random.default_rng(3)
        for tower in (params.importance, params.gating.tower):
            for name in tower:
                tower[name] += rng.normal(0.0, 0.3, tower[name].shape)
        # push a band of terms over the threshold so expansions and truncation both occur
        params.gating.tower["head.b"][:] = rng.normal(0.0, 2.0, v)
        seqs = [TokenSeq((2,) + tuple(int(t) for t in rng.integers(4, v, size=rng.integers(1, 31)))) for _ in range(1000)]
        caps = [None if i % 2 else int(rng.integers(1, 20)) for i in range(len(seqs))]

        violations, expanded, truncated = [], 0, 0
        for i, (seq, cap) in enumerate(zip(seqs, caps)):
            b = bow(seq)
            G = gate_distribution(seq, params.gating, cfg.n_layers)
            g_e = expansion_gate(G, b, threshold) - b
            fired = set(np.flatnonzero(G >= threshold).tolist())
            rep = represent_passages([seq], params, lambda_cap=cap)[0]
            lit = represent_passages([seq], params, mode="literal-only", lambda_cap=cap)[0]
            limit = cap if cap is not None else max(64, 4 * len(b))
            support = set(rep.ids.tolist())
            if g_e & b:
                violations.append((i, "expansion overlaps bag of words"))
            if not support <= (b | fired):
                violations.append((i, "representation term neither literal nor gated"))
            if rep.nnz > limit or lit.nnz > limit:
                violations.append((i, "cap exceeded"))
            if np.any(rep.weights <= 0) or np.any(lit.weights <= 0):
                violations.append((i, "non-positive weight"))
            if not set(lit.ids.tolist()) <= b:
                violations.append((i, "literal support outside bag of words"))
            expanded += bool(support - b)
            truncated += rep.nnz == limit
        print(f"  {expanded} passages expanded, {truncated} at the cap, {len(violations)} violations")
        assert expanded > 0 and truncated > 0
        assert violations == []


@pytest.mark.slow
def test_c4_lexical_mismatch_experiment(mismatch_report):
    with criterion(4, "expansion Recall@10 >= literal + 0.15 and literal MRR@10 >= tf baseline, <= 10 min"):
        r = mismatch_report
        lit, exp = r["runs"]["literal-only"]["metrics"], r["runs"]["expansion-enhanced"]["metrics"]
        tf, bm = r["baselines"]["tf"]["metrics"], r["baselines"]["bm25"]["metrics"]
        print(f"  R@10 expansion {exp['Recall@10']:.3f} literal {lit['Recall@10']:.3f}")
        print(f"  MRR@10 bm25 {bm['MRR@10']:.4f} tf {tf['MRR@10']:.4f} literal {lit['MRR@10']:.4f} expansion {exp['MRR@10']:.4f}")
        print(f"  wall clock {r['wall_clock']['total']:.0f} s")
        assert r["collection"]["passages"] == 2000 and r["collection"]["queries"] == 200
        assert len(r["runs"]["literal-only"]["subsets"]["mismatch"]) > 0
        assert exp["Recall@10"] >= lit["Recall@10"] + 0.15
        assert lit["MRR@10"] >= tf["MRR@10"]
        assert r["wall_clock"]["total"] <= 600.0


@pytest.mark.slow
def test_c5_query_strategies(mismatch_report):
    with criterion(5, "all three query strategies run end to end with MRR@10 and Recall@1000 reported"):
        runs = mismatch_report["runs"]
        assert {run["strategy"] for run in mismatch_report["config"]["runs"]} == set(STRATEGIES)
        for name, entry in runs.items():
            m = entry["metrics"]
            print(f"  {name}: MRR@10 {m['MRR@10']:.4f} R@1000 {m['Recall@1000']:.3f}")
            assert 0.0 <= m["MRR@10"] <= 1.0 and 0.0 <= m["Recall@1000"] <= 1.0


HAND_CORPUS = [("d1", "the cat sat on the mat"), ("d2", "the dog sat"), ("d3", "cat cat dog bird")]


def test_c6_bm25_hand_corpus():
    with criterion(6, "BM25 on a 3-document hand corpus matches hand formulas to 1e-9"):
        vocab = build_vocab([t for _, t in HAND_CORPUS])
        idx = bm25_index(HAND_CORPUS, vocab)
        avgdl = 13 / 3
        idf_cat = math.log(1 + 1.5 / 2.5)
        hand = {
            "d1": idf_cat * 1 * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 6 / avgdl)),
            "d3": idf_cat * 2 * 2.2 / (2 + 1.2 * (0.25 + 0.75 * 4 / avgdl)),
        }
        got = {h.doc: h.score for h in bm25_search(idx, term_ids("cat", vocab), 10)}
        assert got.keys() == hand.keys()
        for doc in hand:
            assert abs(got[doc] - hand[doc]) <= 1e-9
        corpus = [normalize(t) for _, t in HAND_CORPUS]
        for query in ["the dog", "sat mat bird", "dog dog cat", "on the mat"]:
            got = {h.doc: h.score for h in bm25_search(idx, term_ids(query, vocab), 10)}
            for (doc, _), terms in zip(HAND_CORPUS, corpus):
                assert abs(got.get(doc, 0.0) - bm25_score(terms, normalize(query), corpus)) <= 1e-9


def test_c7_metrics_and_max_passage():
    with criterion(7, "metrics match a hand fixture exactly; max-passage score equals best window"):
        def ranked(*docs):
            return [(d, float(100 - i)) for i, d in enumerate(docs)]

        fill = [f"x{i}" for i in range(60)]
        run = {"q1": ranked("x1", "x2", "x3", "a"), "q2": ranked("b", *fill[:48], "c"), "q3": ranked(*fill[:10], "d")}
        qrels = {"q1": {"a"}, "q2": {"b", "c"}, "q3": {"d"}}
        assert mrr_at_k(run, qrels, 10) == (1 / 4 + 1 + 0) / 3
        assert recall_at_k(run, qrels, 10) == (1 + 1 / 2 + 0) / 3
        assert recall_at_k(run, qrels, 100) == 1.0

        docs = [("D1", "red fox jumps over lazy dog red sky"), ("D2", "blue sky over calm sea"), ("D3", "fox and dog")]
        vocab = build_vocab([t for _, t in docs])
        params = ModelParams.init(ModelConfig(v=vocab.v, d=8, n_layers=1, d_ff=16, max_len=16), seed=1)
        q = represent_query(tokenize("red fox sky", vocab, 16), params)
        hits = passage_retrieval_max(docs, "red fox sky", window=3, stride=2, model=(params, vocab), k=10)
        assert hits
        for hit in hits:
            windows = split_windows(dict(docs)[hit.doc], 3, 2)
            reps = represent_passages([tokenize(w, vocab, 16) for w in windows], params)
            # the index stores weights as float32
            scores = [dot_oracle(q.as_dict(), {t: float(np.float32(w)) for t, w in r.entries}) for r in reps]
            assert hit.score == max(scores)


def _strip_clock(report):
    out = copy.deepcopy(report)
    out.pop("wall_clock")
    return json.dumps(out, sort_keys=True)


def test_c8_determinism_and_persistence(tmp_path):
    with criterion(8, "same seed and config give identical metrics JSON; index and checkpoint round-trip bit-exactly"):
        assert _strip_clock(run_experiment(SMALL_CONFIG)) == _strip_clock(run_experiment(SMALL_CONFIG))

        rng = np.random.default_rng(8)
        idx = build_index([(f"doc{i}", random_sparse(rng, 400, 12, f32=False)) for i in range(300)])
        save_index(idx, tmp_path / "a.spix")
        back = load_index(tmp_path / "a.spix")
        assert back == idx
        save_index(back, tmp_path / "b.spix")
        assert (tmp_path / "a.spix").read_bytes() == (tmp_path / "b.spix").read_bytes()

        cfg = ModelConfig(v=50, d=8, n_layers=2, d_ff=16, max_len=16, mode="expansion-enhanced", strategy="asymmetric")
        params = ModelParams.init(cfg, seed=8)
        params.save(tmp_path / "m.bin")
        before = nx.load_checkpoint(tmp_path / "m.bin")
        ModelParams.load(tmp_path / "m.bin").save(tmp_path / "m2.bin")
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
        after = nx.load_checkpoint(tmp_path / "m2.bin")
        assert before.keys() == after.keys()
        for name in before:
            assert before[name].dtype == after[name].dtype
            assert before[name].tobytes() == after[name].tobytes()
