import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from termsparse.model import (
    ModelConfig,
    ModelParams,
    encode,
    expansion_gate,
    gate_distribution,
    literal_gate,
    passage_importance,
    query_tf,
    represent_passage,
    represent_passages,
    represent_query,
    sparse_rep,
    token_importance,
    tower_forward,
)
from termsparse.textcore import TokenSeq, bow, build_vocab, tokenize

V = 12


def tiny(mode="literal-only", strategy="symmetric", seed=0, **kw):
    cfg = ModelConfig(v=V, d=4, n_layers=1, d_ff=8, max_len=8, mode=mode, strategy=strategy, **kw)
    return ModelParams.init(cfg, seed=seed)


def planted(mode="expansion-enhanced"):
    """Towers whose term logits equal ``head.b`` at every position (E = 0)."""
    params = tiny(mode=mode)
    params.importance["E"][...] = 0.0
    params.importance["head.b"][...] = [0, 0, 0, 0, 1.0, -1.0, 2.0, 0.5, 0, 0, 0, 0]
    if params.gating is not None:
        g = params.gating.tower
        g["E"][...] = 0.0
        g["head.b"][...] = 0.0
        g["head.b"][7] = 5.0
    return params


seq_st = st.lists(st.integers(4, V - 1), min_size=0, max_size=6).map(lambda xs: TokenSeq((2, *xs)))


class TestEncoder:
    def test_cls_only(self):
        p = tiny()
        h = encode(TokenSeq((2,)), p.importance, 1)
        assert h.shape == (1, 4) and np.all(np.isfinite(h))

    def test_positions_matter(self):
        p = tiny()
        a = encode(TokenSeq((2, 4, 5)), p.importance, 1)
        b = encode(TokenSeq((2, 5, 4)), p.importance, 1)
        assert not np.allclose(a[1], b[2]) and not np.allclose(a[2], b[1])

    def test_deterministic(self):
        a = encode(TokenSeq((2, 4, 5, 6)), tiny(seed=3).importance, 1)
        b = encode(TokenSeq((2, 4, 5, 6)), tiny(seed=3).importance, 1)
        assert a.tobytes() == b.tobytes()

    def test_batch_padding_does_not_leak(self):
        p = tiny()
        s1, s2 = TokenSeq((2, 4)), TokenSeq((2, 5, 6, 7, 8))
        alone = tower_forward(p.importance, [s1], 1).pooled[0]
        batched = tower_forward(p.importance, [s1, s2], 1).pooled[0]
        np.testing.assert_allclose(alone, batched, rtol=1e-12, atol=1e-14)


class TestImportance:
    def test_zero_embedding(self):
        head = tiny().importance
        head["E"][...] = 0.0
        head["head.b"][...] = 0.25
        np.testing.assert_allclose(token_importance(np.ones(4), head), np.full(V, 0.25))

    def test_hand_fixture(self):
        head = {
            "head.Wt": np.eye(2),
            "head.bt": np.zeros(2),
            "head.ln_g": np.ones(2),
            "head.ln_b": np.zeros(2),
            "E": np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0], [0.0, 0.0]]),
            "head.b": np.array([0.0, 0.0, 0.0, 0.0, 0.5]),
        }
        # by hand: gelu(1) and gelu(-1) differ by exactly 1, so LN maps them to +-0.5/sqrt(0.25+eps)
        z = 0.5 / math.sqrt(0.25 + 1e-5)
        expected = [z, -z, 0.0, 3 * z, 0.5]
        np.testing.assert_allclose(token_importance(np.array([1.0, -1.0]), head), expected, atol=1e-12)

    def test_passage_importance(self):
        np.testing.assert_array_equal(passage_importance([[1, -2], [-1, 3]]), [1, 3])

    def test_all_negative(self):
        np.testing.assert_array_equal(passage_importance([[-1, -2], [-3, -4]]), [0, 0])

    def test_single_token(self):
        np.testing.assert_array_equal(passage_importance([[2.0, -1.0]]), [2.0, 0.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            passage_importance([])

    def test_batched_matches_per_token(self):
        p = tiny(seed=1)
        seq = TokenSeq((2, 4, 9, 6))
        h = encode(seq, p.importance, 1)
        per_token = passage_importance([token_importance(hi, p.importance) for hi in h])
        np.testing.assert_allclose(tower_forward(p.importance, [seq], 1).pooled[0], per_token, rtol=1e-10)


class TestGates:
    def test_literal_gate(self):
        assert literal_gate({4, 5}) == {4, 5}
        assert literal_gate(set()) == frozenset()
        assert literal_gate(literal_gate({4})) == literal_gate({4})

    def test_expansion_gate_hand(self):
        G = np.array([0.8, 0.6, 0.9])
        gle = expansion_gate(G, {0}, 0.7)
        assert gle == {0, 2}
        assert gle - {0} == {2}

    def test_no_expansion_below_threshold(self):
        assert expansion_gate(np.full(5, 0.5), {1, 3}, 0.7) == {1, 3}

    def test_bow_covering_all(self):
        assert expansion_gate(np.full(3, 0.99), {0, 1, 2}, 0.7) - {0, 1, 2} == frozenset()

    def test_gate_distribution_planted(self):
        p = planted()
        G = gate_distribution(TokenSeq((2, 4)), p.gating, 1)
        assert G[7] > 0.99  # sigmoid(2 positions * 5.0)
        assert np.all((G > 0) & (G < 1))

    @given(seq_st)
    @settings(max_examples=30, deadline=None)
    def test_gate_distribution_range(self, seq):
        G = gate_distribution(seq, tiny(mode="expansion-enhanced").gating, 1)
        assert G.shape == (V,) and np.all((G > 0) & (G < 1))


class TestSparseRep:
    def test_hand(self):
        v = sparse_rep(np.array([5.0, 0.0, 2.0, 7.0]), {0, 2, 3}, 2)
        assert v.entries == [(0, 5.0), (3, 7.0)]

    def test_empty_gate(self):
        assert sparse_rep(np.array([1.0, 2.0]), set(), 4).nnz == 0

    def test_zero_weight_pruned(self):
        assert sparse_rep(np.array([0.0, 2.0]), {0, 1}, 4).entries == [(1, 2.0)]

    def test_tie_goes_to_lower_id(self):
        assert sparse_rep(np.array([1.0, 3.0, 3.0, 3.0]), {0, 1, 2, 3}, 2).support() == {1, 2}

    def test_bad_cap(self):
        with pytest.raises(ValueError):
            sparse_rep(np.ones(2), {0}, 0)


class TestRepresent:
    def test_literal_hand_trace(self):
        p = planted(mode="literal-only")
        # I_t = 4 positions * relu(b_t): 4 -> 4, 5 -> 0 (pruned), 6 -> 8
        assert represent_passage(TokenSeq((2, 4, 5, 6)), p).entries == [(4, 4.0), (6, 8.0)]

    def test_expansion_hand_trace(self):
        p = planted()
        # gating: G_7 = sigmoid(4 * 5.0) > 0.7, every other G = sigmoid(0) = 0.5
        rep = represent_passage(TokenSeq((2, 4, 5, 6)), p)
        assert rep.entries == [(4, 4.0), (6, 8.0), (7, 2.0)]

    @given(seq_st)
    @settings(max_examples=30, deadline=None)
    def test_literal_support(self, seq):
        assert represent_passage(seq, tiny(seed=2)).support() <= bow(seq)

    @given(seq_st)
    @settings(max_examples=30, deadline=None)
    def test_expansion_support(self, seq):
        p = tiny(mode="expansion-enhanced", seed=2)
        G = gate_distribution(seq, p.gating, 1)
        allowed = set(bow(seq)) | set(np.flatnonzero(G >= 0.7).tolist())
        assert represent_passage(seq, p).support() <= allowed

    def test_batch_equals_single(self):
        p = tiny(mode="expansion-enhanced", seed=4)
        seqs = [TokenSeq((2, 4, 5)), TokenSeq((2, 6, 7, 8, 9)), TokenSeq((2,))]
        assert represent_passages(seqs, p, batch_size=2) == [represent_passage(s, p) for s in seqs]

    def test_query_tf(self):
        vocab = build_vocab(["hot hot day"])
        seq = tokenize("hot hot day", vocab)
        assert query_tf(seq) == {vocab.id("hot"): 2.0, vocab.id("day"): 1.0}
        assert represent_query(seq, tiny(strategy="query-tf")).as_dict() == {vocab.id("hot"): 2.0, vocab.id("day"): 1.0}

    def test_symmetric_shares_tower(self):
        p = tiny(strategy="symmetric")
        assert p.query_tower() is p.importance

    def test_asymmetric_disjoint(self):
        p = tiny(strategy="asymmetric")
        q = p.query_tower()
        assert q is not p.importance
        for name in q:
            assert not np.shares_memory(q[name], p.importance[name])

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            represent_query(TokenSeq((2, 4)), tiny(), strategy="both")


class TestPersistence:
    @pytest.mark.parametrize("mode,strategy", [("literal-only", "symmetric"), ("expansion-enhanced", "asymmetric")])
    def test_round_trip(self, tmp_path, mode, strategy):
        p = tiny(mode=mode, strategy=strategy, seed=5, lambda_cap=7)
        p.save(tmp_path / "m.bin")
        q = ModelParams.load(tmp_path / "m.bin")
        assert q.cfg == p.cfg
        for name, arr in p.tensors().items():
            assert q.tensors()[name].tobytes() == arr.tobytes()

    def test_config_mismatch(self, tmp_path):
        tiny().save(tmp_path / "m.bin")
        text = (tmp_path / "m.bin.json").read_text().replace('"n_layers": 1', '"n_layers": 2')
        (tmp_path / "m.bin.json").write_text(text)
        with pytest.raises(ValueError):
            ModelParams.load(tmp_path / "m.bin")
