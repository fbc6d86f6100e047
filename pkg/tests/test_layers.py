import math

import numpy as np
import pytest

from cfgad import tensor as T
from cfgad.tensor import Tensor
from cfgad.graph import SyntheticSpec, generate_synthetic
from cfgad.layers import (ClassifierHead, GatLayer, GcnLayer, anomaly_weight,
                          gat_attention, gat_forward, gcn_forward,
                          normalized_adjacency, weighted_ce_loss)

from conftest import assert_grads_close, finite_diff
from test_graph import grid_graph


def rng():
    return np.random.default_rng(0)


class TestGcn:
    def test_isolated_node_sees_only_itself(self):
        g = grid_graph([(0, 1)], 3, h=2)
        layer = GcnLayer(2, 4, rng())
        out = gcn_forward(g, g.features, layer).data
        expected = np.maximum(g.features.data[2] @ layer.weight.data, 0.0)
        assert np.allclose(out[2], expected)

    def test_identical_features_identical_outputs(self):
        g = grid_graph([(0, 1)], 2, h=2)
        feats = Tensor(np.ones((2, 2)))
        layer = GcnLayer(2, 3, rng())
        out = gcn_forward(g, feats, layer).data
        assert np.allclose(out[0], out[1])

    def test_three_node_path_against_dense_oracle(self):
        g = grid_graph([(0, 1), (1, 2)], 3, h=3)
        x = g.features.data
        layer = GcnLayer(3, 3, rng())
        layer.weight = Tensor(np.eye(3), requires_grad=True)
        # dense oracle: build D^-1/2 (A+I) D^-1/2 by hand and multiply
        a = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=float)
        d = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
        expected = d @ a @ d @ x
        out = gcn_forward(g, g.features, layer, activation=None).data
        assert np.allclose(out, expected, atol=1e-12)

    def test_dimension_mismatch(self):
        g = grid_graph([(0, 1)], 2, h=2)
        with pytest.raises(T.ShapeError):
            gcn_forward(g, g.features, GcnLayer(5, 3, rng()))


class TestGatAttention:
    def test_self_only_neighborhood(self):
        layer = GatLayer(3, 4, rng())
        h = np.array([1.0, -0.5, 2.0])
        coeff = gat_attention(h, h.reshape(1, -1), layer)
        assert coeff.shape == (1,)
        assert coeff[0] == pytest.approx(1.0)

    def test_identical_members_uniform(self):
        layer = GatLayer(2, 3, rng())
        h = np.array([0.3, 0.7])
        members = np.tile(h, (4, 1))
        coeff = gat_attention(h, members, layer)
        assert np.allclose(coeff, 0.25)

    def test_three_member_hand_case(self):
        # direct scalar evaluation of the attention formula
        layer = GatLayer(1, 1, rng())
        layer.weights[0] = Tensor([[2.0]], requires_grad=True)
        layer.att[0] = Tensor([[0.5], [-1.0]], requires_grad=True)
        h_t = np.array([1.0])
        members = np.array([[1.0], [0.0], [-1.0]])

        def leaky(v):
            return v if v >= 0 else 0.2 * v

        logits = [leaky(0.5 * (2.0 * 1.0) + (-1.0) * (2.0 * m[0])) for m in members]
        exps = [math.exp(v - max(logits)) for v in logits]
        expected = np.array(exps) / sum(exps)
        assert np.allclose(gat_attention(h_t, members, layer), expected, atol=1e-12)

    def test_empty_neighborhood_rejected(self):
        layer = GatLayer(2, 2, rng())
        with pytest.raises(ValueError):
            gat_attention(np.zeros(2), np.zeros((0, 2)), layer)

    def test_coefficients_sum_to_one_every_node(self):
        g = generate_synthetic(SyntheticSpec(n=30, anomaly_rate=0.2,
                                             feature_dim=3, seed=1))
        layer = GatLayer(3, 4, rng())
        for v in range(g.n):
            members = np.vstack([g.features.data[list(g.neighbors(v)) + [v]]])
            coeff = gat_attention(g.features.data[v], members, layer)
            assert abs(coeff.sum() - 1.0) <= 1e-10


def dense_gat_reference(g, h, layer, head=0):
    """Per-node loop using the standalone coefficient op (test oracle)."""
    w = layer.weights[head].data
    out = np.zeros((g.n, layer.out_dim))
    for v in range(g.n):
        members = list(g.neighbors(v)) + [v]
        coeff = gat_attention(h[v], h[members], layer, head=head)
        out[v] = coeff @ (h[members] @ w)
    return out


class TestGatForward:
    def test_matches_dense_reference_on_small_graphs(self):
        r = np.random.default_rng(5)
        for seed in range(4):
            g = generate_synthetic(SyntheticSpec(n=int(r.integers(5, 21)),
                                                 anomaly_rate=0.3,
                                                 feature_dim=3, seed=seed))
            layer = GatLayer(3, 4, np.random.default_rng(seed))
            out = gat_forward(g, g.features, layer).data
            ref = dense_gat_reference(g, g.features.data, layer)
            assert np.abs(out - ref).max() < 1e-10

    def test_empty_overrides_equals_vanilla_bitwise(self):
        g = grid_graph([(0, 1), (1, 2)], 3, h=2)
        layer = GatLayer(2, 3, rng())
        a = gat_forward(g, g.features, layer).data
        b = gat_forward(g, g.features, layer, overrides={}).data
        assert np.array_equal(a, b)

    def test_override_locality(self):
        # distance >= 2 from the overridden node: output bitwise unchanged
        g = grid_graph([(0, 1), (1, 2), (2, 3), (3, 4)], 5, h=2)
        layer = GatLayer(2, 3, rng())
        plain = gat_forward(g, g.features, layer).data
        subst = gat_forward(g, g.features, layer,
                            overrides={0: np.array([5.0, -5.0])}).data
        assert np.array_equal(plain[2:], subst[2:])
        assert not np.allclose(plain[0], subst[0])
        assert not np.allclose(plain[1], subst[1])

    def test_single_node_graph(self):
        g = grid_graph([], 1, h=2)
        layer = GatLayer(2, 3, rng())
        out = gat_forward(g, g.features, layer).data
        expected = g.features.data @ layer.weights[0].data
        assert np.allclose(out, expected, atol=1e-12)

    def test_append_mode_grows_neighborhood_and_normalizes(self):
        g = grid_graph([(0, 1), (0, 2)], 3, h=2)
        layer = GatLayer(2, 2, rng())
        gen = {1: np.array([3.0, -1.0])}
        # appended: node 0 aggregates {1, 2, 0, gen(1)}; node 1 sees {0, 1, gen(1)}
        out_append = gat_forward(g, g.features, layer, overrides=gen,
                                 append=True).data
        h_aug = np.vstack([g.features.data, gen[1]])
        w = layer.weights[0].data
        for v, members in ((0, [1, 2, 0, 3]), (1, [0, 1, 3]), (2, [0, 2])):
            coeff = gat_attention(g.features.data[v], h_aug[members], layer)
            assert abs(coeff.sum() - 1.0) <= 1e-10
            expected = coeff @ (h_aug[members] @ w)
            assert np.allclose(out_append[v], expected, atol=1e-10)

    def test_append_with_empty_plan_is_noop(self):
        g = grid_graph([(0, 1)], 2, h=2)
        layer = GatLayer(2, 2, rng())
        a = gat_forward(g, g.features, layer).data
        b = gat_forward(g, g.features, layer, overrides={}, append=True).data
        assert np.array_equal(a, b)

    def test_mean_aggregation(self):
        g = grid_graph([(0, 1)], 2, h=2)
        layer = GatLayer(2, 2, rng())
        out = gat_forward(g, g.features, layer, attention=False).data
        wh = g.features.data @ layer.weights[0].data
        assert np.allclose(out[0], (wh[0] + wh[1]) / 2, atol=1e-12)

    def test_override_width_mismatch(self):
        g = grid_graph([(0, 1)], 2, h=2)
        layer = GatLayer(2, 2, rng())
        with pytest.raises(T.ShapeError):
            gat_forward(g, g.features, layer, overrides={0: np.zeros(5)})

    def test_unknown_override_node(self):
        g = grid_graph([(0, 1)], 2, h=2)
        layer = GatLayer(2, 2, rng())
        with pytest.raises(ValueError, match="unknown node"):
            gat_forward(g, g.features, layer, overrides={9: np.zeros(2)})

    def test_multi_head_concatenates(self):
        g = grid_graph([(0, 1)], 2, h=2)
        layer = GatLayer(2, 3, rng(), heads=2)
        out = gat_forward(g, g.features, layer)
        assert out.shape == (2, 6)


class TestEquivariance:
    def test_permuting_node_ids_permutes_outputs(self):
        g = generate_synthetic(SyntheticSpec(n=12, anomaly_rate=0.25,
                                             feature_dim=3, seed=2))
        perm = np.random.default_rng(3).permutation(g.n)
        inv = np.argsort(perm)
        # relabel: node v becomes perm[v]
        edges = [(perm[i], perm[j]) for i, j in g.edges]
        feats = g.features.data[inv]
        labels = g.labels[inv]
        from cfgad.graph import _build_graph
        g2 = _build_graph(g.n, {(min(i, j), max(i, j)) for i, j in edges},
                          feats, labels)

        gcn = GcnLayer(3, 4, rng())
        gat = GatLayer(3, 4, rng())
        out1 = gcn_forward(g, g.features, gcn).data
        out2 = gcn_forward(g2, g2.features, gcn).data
        assert np.abs(out1 - out2[perm]).max() < 1e-10
        a1 = gat_forward(g, g.features, gat).data
        a2 = gat_forward(g2, g2.features, gat).data
        assert np.abs(a1 - a2[perm]).max() < 1e-10


class TestLossAndHead:
    def test_analytic_loss_values(self):
        assert weighted_ce_loss(Tensor([[0.5]]), [[1.0]], 1.0).data.item() == \
            pytest.approx(math.log(2))
        # p == y after clamping: loss about 0
        loss = weighted_ce_loss(Tensor([[1.0 - 1e-12], [1e-12]]), [[1.0], [0.0]], 1.0)
        assert loss.data.item() == pytest.approx(0.0, abs=1e-9)

    def test_hand_evaluated_weighted_case(self):
        loss = weighted_ce_loss(Tensor([[0.8], [0.2]]), [[1.0], [0.0]], 2.0)
        assert loss.data.item() == pytest.approx(-3 * math.log(0.8))

    def test_clamping_warns(self, caplog):
        with caplog.at_level("WARNING"):
            weighted_ce_loss(Tensor([[1.0]]), [[1.0]], 1.0)
        assert "clamped" in caplog.text

    def test_gradient_matches_finite_differences(self):
        r = np.random.default_rng(8)
        logits = Tensor(r.uniform(-1.5, 1.5, size=(6, 1)), requires_grad=True)
        y = r.integers(0, 2, size=(6, 1)).astype(float)

        def build():
            return weighted_ce_loss(T.sigmoid(logits), y, 1.7)

        loss = build()
        loss.backward()
        fd = finite_diff(lambda: float(build().data.item()), logits.data)
        assert_grads_close(logits.grad, fd, rtol=1e-5)

    def test_invalid_phi(self):
        with pytest.raises(ValueError):
            weighted_ce_loss(Tensor([[0.5]]), [[1.0]], 0.0)

    def test_head_outputs_probabilities(self):
        head = ClassifierHead(4, 8, rng())
        z = np.random.default_rng(1).uniform(-2, 2, size=(10, 4))
        p = head.forward(Tensor(z)).data
        assert p.shape == (10, 1)
        assert (p > 0).all() and (p < 1).all()

    def test_anomaly_weight(self):
        labels = np.array([1, 1, 0, 0, 0, 0])
        mask = np.ones(6, dtype=bool)
        assert anomaly_weight(labels, mask) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            anomaly_weight(labels, np.array([0, 0, 1, 1, 1, 1], dtype=bool))


def test_gat_gradients_match_finite_differences():
    g = grid_graph([(0, 1), (1, 2), (0, 2), (2, 3)], 4, h=3)
    layer = GatLayer(3, 2, np.random.default_rng(9))
    x = g.features

    def build():
        out = gat_forward(g, x, layer, activation="relu")
        return T.sum_all(T.mul(out, out))

    loss = build()
    loss.backward()
    for name, p in layer.parameters().items():
        fd = finite_diff(lambda: float(build().data.item()), p.data)
        assert_grads_close(p.grad, fd, rtol=1e-4, what=name)
