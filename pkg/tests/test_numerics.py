import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from termsparse import numerics as nx


class TestActivations:
    def test_gelu_zero(self):
        assert nx.gelu(0.0) == 0.0

    def test_gelu_one(self):
        # oracle: Phi(1) from math.erf
        assert nx.gelu(1.0) == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)
        assert nx.gelu(1.0) == pytest.approx(0.8413447, abs=1e-7)

    def test_gelu_far_negative(self):
        assert abs(nx.gelu(-10.0)) < 1e-8

    def test_gelu_array_matches_scalar(self):
        xs = np.linspace(-4, 4, 17)
        np.testing.assert_allclose(nx.gelu(xs), [nx.gelu(float(x)) for x in xs], rtol=1e-14)

    def test_gelu_grad(self):
        xs = np.linspace(-3, 3, 13)
        num = (nx.gelu(xs + 1e-6) - nx.gelu(xs - 1e-6)) / 2e-6
        np.testing.assert_allclose(nx.gelu_grad(xs), num, atol=1e-8)

    def test_sigmoid_stable(self):
        assert nx.sigmoid(800.0) == 1.0
        assert nx.sigmoid(-800.0) == 0.0
        assert nx.sigmoid(0.0) == 0.5


class TestLayerNorm:
    def test_zero_variance(self):
        np.testing.assert_array_equal(nx.layer_norm(np.ones(3), np.ones(3), np.zeros(3)), np.zeros(3))

    def test_unit_std(self):
        out = nx.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-9)

    def test_beta_offset(self):
        out = nx.layer_norm(np.zeros(2), np.ones(2), np.array([2.0, 2.0]))
        np.testing.assert_array_equal(out, [2.0, 2.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nx.layer_norm(np.zeros(3), np.ones(2), np.zeros(3))

    @given(arrays(np.float64, 5, elements=st.floats(-100, 100)))
    @settings(max_examples=50, deadline=None)
    def test_normalized_moments(self, v):
        out = nx.layer_norm(v, np.ones(5), np.zeros(5))
        assert abs(out.mean()) < 1e-9
        assert out.var() <= 1.0 + 1e-9

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x, g, b = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
        w = rng.normal(size=(2, 5))
        y, cache = nx.layer_norm_fwd(x, g, b)
        dx, dg, db = nx.layer_norm_bwd(w, cache)
        num = nx.finite_diff_grad(lambda t: float((nx.layer_norm_fwd(t, g, b)[0] * w).sum()), x)
        np.testing.assert_allclose(dx, num, atol=1e-7)
        num_g = nx.finite_diff_grad(lambda t: float((nx.layer_norm_fwd(x, t, b)[0] * w).sum()), g)
        np.testing.assert_allclose(dg, num_g, atol=1e-7)
        np.testing.assert_allclose(db, w.sum(axis=0))


class TestLinear:
    def test_identity(self):
        np.testing.assert_array_equal(nx.linear(np.array([1.0, 0.0]), np.eye(2), np.zeros(2)), [1.0, 0.0])

    def test_hand_value(self):
        assert nx.linear(np.array([1.0, 2.0]), np.array([[3.0, 4.0]]), np.array([1.0])).tolist() == [12.0]

    def test_zero_input_gives_bias(self):
        b = np.array([0.5, -1.0, 2.0])
        W = np.random.default_rng(1).normal(size=(3, 4))
        np.testing.assert_array_equal(nx.linear(np.zeros(4), W, b), b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.linear(np.zeros(3), np.eye(2), np.zeros(2))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, 2.0])}
        nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": np.array([1.0])}
        state = nx.AdamState()
        nx.adam_step(p, {"w": np.array([1.0])}, state, lr=0.1)
        assert p["w"][0] == pytest.approx(0.9, abs=1e-6)
        assert state.t == 1

    def test_moment_decay(self):
        p = {"w": np.array([0.0])}
        state = nx.AdamState()
        nx.adam_step(p, {"w": np.array([2.0])}, state, beta1=0.9, beta2=0.999)
        for _ in range(2):
            nx.adam_step(p, {"w": np.array([0.0])}, state, beta1=0.9, beta2=0.999)
        assert state.m["w"][0] == pytest.approx(0.1 * 2.0 * 0.9**2, rel=1e-12)
        assert state.v["w"][0] == pytest.approx(0.001 * 4.0 * 0.999**2, rel=1e-12)

    def test_only_given_keys_update(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        nx.adam_step(p, {"a": np.ones(2)}, nx.AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["b"], np.ones(2))

    def test_overflow(self):
        with pytest.raises(nx.NumericalError, match="gradient overflow"):
            nx.adam_step({"w": np.ones(1)}, {"w": np.array([np.inf])}, nx.AdamState())


class TestFiniteDiff:
    def test_square(self):
        g = nx.finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), h=1e-4)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        np.testing.assert_array_equal(nx.finite_diff_grad(lambda t: 4.0, np.zeros(3)), np.zeros(3))

    def test_sum(self):
        np.testing.assert_allclose(nx.finite_diff_grad(lambda t: float(t.sum()), np.arange(4.0)), np.ones(4))

    def test_does_not_mutate(self):
        theta = np.array([1.0, 2.0])
        nx.finite_diff_grad(lambda t: float((t**2).sum()), theta)
        np.testing.assert_array_equal(theta, [1.0, 2.0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.array([[np.pi]])}
        nx.save_checkpoint(tmp_path / "m.bin", tensors)
        back = nx.load_checkpoint(tmp_path / "m.bin")
        assert list(back) == ["a", "b", "c"]
        assert back["a"].tobytes() == tensors["a"].tobytes()
        assert back["b"].shape == (1, 5) and back["b"][0].tobytes() == tensors["b"].tobytes()

    def test_truncated(self, tmp_path):
        nx.save_checkpoint(tmp_path / "m.bin", {"a": np.ones((2, 2))})
        data = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(data[:-3])
        with pytest.raises(ValueError, match="bad checkpoint file"):
            nx.load_checkpoint(tmp_path / "m.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="bad checkpoint file"):
            nx.load_checkpoint(tmp_path / "m.bin")
