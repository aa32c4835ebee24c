import json

import numpy as np
import pytest

from setgen.embedding import (
    AffineLayer,
    EmbeddingNet,
    GradientTape,
    embed,
    embed_backward,
    embed_many,
    init_net,
    load_net,
    save_net,
)


def identity_net(dim):
    return EmbeddingNet([AffineLayer(np.eye(dim), np.zeros(dim), "identity")])


class TestForward:
    def test_identity_normalizes(self):
        np.testing.assert_allclose(embed(identity_net(2), [3.0, 4.0]), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        x = np.zeros(6)
        x[0] = 1.0
        np.testing.assert_array_equal(embed(identity_net(6), x), x)

    def test_dead_relu_leaves_bias(self):
        bias = np.array([1.0, 2.0, 2.0])
        net = EmbeddingNet(
            [
                AffineLayer(np.eye(3), np.zeros(3), "relu"),
                AffineLayer(np.eye(3), bias, "identity"),
            ]
        )
        out = embed(net, np.array([-1.0, -2.0, -0.5]))
        np.testing.assert_allclose(out, bias / 3.0)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(0)
        net = init_net([5, 8, 3], seed=1)
        X = rng.normal(size=(50, 5))
        norms = np.linalg.norm(embed_many(net, X), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_zero_prenormalization_rejected(self):
        net = EmbeddingNet(
            [
                AffineLayer(np.eye(2), np.zeros(2), "relu"),
                AffineLayer(np.eye(2), np.zeros(2), "identity"),
            ]
        )
        with pytest.raises(ValueError, match="zero vector"):
            embed(net, np.array([-1.0, -1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            embed(identity_net(3), np.zeros(4))


class TestBackward:
    def test_radial_upstream_annihilated(self):
        net = identity_net(3)
        x = np.array([1.0, 2.0, 2.0])
        d = embed(net, x)
        tape = GradientTape(net)
        grad = embed_backward(net, x, 5.0 * d, tape)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_identity_closed_form(self):
        net = identity_net(2)
        tape = GradientTape(net)
        grad = embed_backward(net, np.array([3.0, 4.0]), np.array([1.0, 0.0]), tape)
        np.testing.assert_allclose(grad, [0.128, -0.096], atol=1e-12)

    def test_matches_finite_differences(self):
        from setgen.gradcheck import check_embedding_gradients

        result = check_embedding_gradients(seed=3, trials=8)
        assert result.passed, result.line()

    def test_tape_accumulates_across_samples(self):
        rng = np.random.default_rng(1)
        net = init_net([4, 3], seed=0)
        X = rng.normal(size=(6, 4))
        up = rng.normal(size=(6, 3))
        whole = GradientTape(net)
        from setgen.embedding import embed_backward_many

        embed_backward_many(net, X, up, whole)
        split = GradientTape(net)
        for i in range(6):
            embed_backward(net, X[i], up[i], split)
        np.testing.assert_allclose(split.weight_grads[0], whole.weight_grads[0], atol=1e-12)


class TestInit:
    def test_deterministic(self):
        a = init_net([4, 8, 3], seed=7)
        b = init_net([4, 8, 3], seed=7)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.weight, lb.weight)

    def test_shapes_and_activations(self):
        net = init_net([4, 8, 3], seed=0)
        assert [l.weight.shape for l in net.layers] == [(8, 4), (3, 8)]
        assert [l.activation for l in net.layers] == ["relu", "identity"]

    def test_distinct_seeds_differ(self):
        a = init_net([4, 8, 3], seed=1)
        b = init_net([4, 8, 3], seed=2)
        assert np.abs(a.layers[0].weight - b.layers[0].weight).max() > 0

    def test_needs_two_dims(self):
        with pytest.raises(ValueError):
            init_net([4], seed=0)


class TestSerialization:
    def test_round_trip_value_exact(self, tmp_path):
        net = init_net([5, 7, 4], seed=3)
        path = tmp_path / "net.json"
        save_net(net, path)
        loaded = load_net(path)
        for la, lb in zip(net.layers, loaded.layers):
            np.testing.assert_array_equal(la.weight, lb.weight)
            np.testing.assert_array_equal(la.bias, lb.bias)
            assert la.activation == lb.activation

    def test_file_is_json(self, tmp_path):
        net = init_net([3, 2], seed=0)
        path = tmp_path / "net.json"
        save_net(net, path)
        doc = json.loads(path.read_text())
        assert doc["layers"][0]["activation"] == "identity"
