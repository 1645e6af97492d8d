"""Initial map, linear attention and the multi-head encoder."""

import logging
import time

import numpy as np
import pytest

from globalign.encoder import EncoderParams, encode, encode_array, linear_attention_layer, mlp_init
from globalign.tape import Tape
from oracles import central_difference, relative_error


def _layer_params(rng, d, zero_qk=False, identity_v=False):
    p = {}
    for name in ("q", "k", "v"):
        p[f"{name}.w"] = rng.standard_normal((d, d)) * 0.5
        p[f"{name}.b"] = rng.standard_normal(d) * 0.1
    if zero_qk:
        for name in ("q.w", "q.b", "k.w", "k.b"):
            p[name] = np.zeros_like(p[name])
    if identity_v:
        p["v.w"], p["v.b"] = np.eye(d), np.zeros(d)
    return p


def _attention_reference(Z, p, quadratic=False):
    """Direct evaluation of one layer, optionally in the (Q K^T) V order."""
    n = Z.shape[0]
    Q = Z @ p["q.w"] + p["q.b"]
    K = Z @ p["k.w"] + p["k.b"]
    V = Z @ p["v.w"] + p["v.b"]
    Q = Q / np.linalg.norm(Q)
    K = K / np.linalg.norm(K)
    diag = 1.0 + (Q @ (K.T @ np.ones(n))) / n
    mixed = V + ((Q @ K.T) @ V if quadratic else Q @ (K.T @ V)) / n
    return mixed / diag[:, None]


class TestMlpInit:
    def test_zero_input(self, rng):
        out = mlp_init(Tape(), np.zeros((4, 3)), rng.standard_normal((3, 5)), np.zeros(5))
        np.testing.assert_array_equal(out.value, np.zeros((4, 5)))

    def test_identity(self, rng):
        X = rng.standard_normal((4, 3))
        out = mlp_init(Tape(), X, np.eye(3), np.zeros(3), activation="identity")
        np.testing.assert_array_equal(out.value, X)

    def test_hand_evaluated(self):
        X = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [0.5, 0.5, 0.5], [-1.0, 2.0, 0.0]])
        W = np.array([[0.1, -0.2], [0.3, 0.0], [-0.1, 0.2]])
        b = np.array([0.05, -0.05])
        # row 0: (0.1 - 0.2 + 0.05, -0.2 + 0.4 - 0.05) = (-0.05, 0.15)
        # row 1: (0.3 + 0.1 + 0.05, 0 - 0.2 - 0.05) = (0.45, -0.25)
        # row 2: (0.15 + 0.05, 0 - 0.05) = (0.2, -0.05)
        # row 3: (-0.1 + 0.6 + 0.05, 0.2 - 0.05) = (0.55, 0.15)
        expected = np.maximum(np.array([[-0.05, 0.15], [0.45, -0.25], [0.2, -0.05], [0.55, 0.15]]), 0.0)
        np.testing.assert_allclose(mlp_init(Tape(), X, W, b).value, expected, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="columns"):
            mlp_init(Tape(), np.ones((2, 4)), rng.standard_normal((3, 5)), np.zeros(5))

    def test_unknown_activation(self, rng):
        with pytest.raises(ValueError):
            mlp_init(Tape(), np.ones((2, 3)), np.eye(3), np.zeros(3), activation="tanh")


class TestAttentionLayer:
    def test_zero_query_key(self, rng, caplog):
        Z = rng.standard_normal((5, 3))
        with caplog.at_level(logging.WARNING):
            out = linear_attention_layer(Tape(), Z, _layer_params(rng, 3, zero_qk=True, identity_v=True))
        np.testing.assert_allclose(out.value, Z, atol=1e-15)
        assert "identically zero" in caplog.text

    def test_single_node(self, rng):
        Z = rng.standard_normal((1, 3))
        p = _layer_params(rng, 3)
        q = Z @ p["q.w"] + p["q.b"]
        k = Z @ p["k.w"] + p["k.b"]
        v = Z @ p["v.w"] + p["v.b"]
        qk = float(((q / np.linalg.norm(q)) @ (k / np.linalg.norm(k)).T)[0, 0])
        # with n = 1: (v + qk v) / (1 + qk) = v
        expected = (v + qk * v) / (1 + qk)
        np.testing.assert_allclose(linear_attention_layer(Tape(), Z, p).value, expected, atol=1e-14)
        np.testing.assert_allclose(expected, v, atol=1e-14)

    def test_association_orders_agree(self, rng):
        Z = rng.standard_normal((6, 4))
        p = _layer_params(rng, 4)
        out = linear_attention_layer(Tape(), Z, p).value
        np.testing.assert_allclose(out, _attention_reference(Z, p, quadratic=True), atol=1e-10, rtol=0)
        np.testing.assert_allclose(out, _attention_reference(Z, p), atol=1e-12, rtol=0)

    def test_whole_matrix_norm(self, rng):
        # scaling Z's query map by a constant leaves the layer unchanged (Frobenius norm, not per row)
        Z = rng.standard_normal((6, 4))
        p = _layer_params(rng, 4)
        scaled = dict(p, **{"q.w": 3.0 * p["q.w"], "q.b": 3.0 * p["q.b"]})
        np.testing.assert_allclose(
            linear_attention_layer(Tape(), Z, p).value, linear_attention_layer(Tape(), Z, scaled).value, atol=1e-13
        )


class TestEncode:
    def test_single_head_identity_projection(self, rng):
        X = rng.standard_normal((7, 3))
        params = EncoderParams.init(3, 4, 1, 2, rng)
        params.arrays["out.w"] = np.eye(4)
        tape = Tape()
        Z = mlp_init(tape, X, params.arrays["mlp.w"], params.arrays["mlp.b"])
        for i in range(2):
            Z = linear_attention_layer(tape, Z, {p: params.arrays[f"h0.l{i}.{p}"] for p in ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b")})
        np.testing.assert_array_equal(encode_array(X, params), Z.value)

    def test_zero_attention_averaged_heads(self, rng, caplog):
        X = rng.standard_normal((7, 3))
        d, h = 4, 3
        params = EncoderParams.init(3, d, h, 2, rng)
        for a in range(h):
            for i in range(2):
                for name in ("q.w", "q.b", "k.w", "k.b"):
                    params.arrays[f"h{a}.l{i}.{name}"][:] = 0.0
                params.arrays[f"h{a}.l{i}.v.w"] = np.eye(d)
                params.arrays[f"h{a}.l{i}.v.b"] = np.zeros(d)
        params.arrays["out.w"] = np.vstack([np.eye(d) / h] * h)
        with caplog.at_level(logging.WARNING):
            R = encode_array(X, params)
        Z0 = np.maximum(X @ params.arrays["mlp.w"] + params.arrays["mlp.b"], 0.0)
        np.testing.assert_allclose(R, Z0, atol=1e-14)

    def test_deterministic(self, rng):
        X = rng.standard_normal((9, 5))
        params = EncoderParams.init(5, 8, 2, 2, np.random.default_rng(3))
        np.testing.assert_array_equal(encode_array(X, params), encode_array(X, params))

    def test_init_is_seeded(self):
        a = EncoderParams.init(5, 8, 2, 2, np.random.default_rng(3))
        b = EncoderParams.init(5, 8, 2, 2, np.random.default_rng(3))
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        a.check_shapes()

    def test_init_scale(self):
        p = EncoderParams.init(10, 20, 1, 1, np.random.default_rng(0))
        assert np.max(np.abs(p.arrays["mlp.w"])) <= np.sqrt(6 / 30)
        assert not np.any(p.arrays["mlp.b"])

    def test_bad_shapes(self):
        p = EncoderParams.init(3, 4, 2, 1, np.random.default_rng(0))
        p.arrays["out.w"] = np.zeros((4, 4))
        with pytest.raises(ValueError, match="out.w"):
            p.check_shapes()

    def test_no_nan_across_seeds(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((20, 6))
            X /= np.linalg.norm(X, axis=1, keepdims=True)
            R = encode_array(X, EncoderParams.init(6, 16, 2, 2, rng))
            assert np.all(np.isfinite(R)), seed

    def test_gradients_for_every_leaf(self, rng):
        X = rng.standard_normal((5, 3))
        params = EncoderParams.init(3, 4, 2, 2, rng)
        for name in params.arrays:
            if name.endswith(".b"):
                params.arrays[name] = rng.standard_normal(params.arrays[name].shape) * 0.1
        W = rng.standard_normal((5, 4))

        def value(arrays):
            t = Tape()
            leaves = {k: t.leaf(v) for k, v in arrays.items()}
            return t, leaves, t.inner(encode(t, X, leaves, 2, 2), W)

        tape, leaves, out = value(params.arrays)
        names = list(leaves)
        grads = dict(zip(names, tape.backward(out, [leaves[n] for n in names])))
        for name in names:

            def f(v, name=name):
                return float(value(dict(params.arrays, **{name: v}))[2].value)

            fd = central_difference(f, params.arrays[name])
            assert relative_error(grads[name], fd) < 1e-4, name

    def test_linear_time(self):
        d = 128
        params = EncoderParams.init(16, d, 2, 2, np.random.default_rng(0))
        sizes = (1000, 2000, 4000)
        inputs = {n: np.random.default_rng(n).standard_normal((n, 16)) for n in sizes}
        encode_array(inputs[1000], params)  # warm up
        # sizes are timed round-robin so a transient slowdown hits all of them
        best = dict.fromkeys(sizes, np.inf)
        for _ in range(7):
            for n in sizes:
                t0 = time.perf_counter()
                encode_array(inputs[n], params)
                best[n] = min(best[n], time.perf_counter() - t0)
        t1, t2, t4 = (best[n] for n in sizes)
        for ratio in (t2 / t1, t4 / t2):
            assert 2 / 1.5 <= ratio <= 2 * 1.5, (t1, t2, t4)
