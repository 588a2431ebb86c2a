import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from flowrefine import (EmbeddingConfig, InputFileError, Mlp, MlpLayer, PointCloud,
                        aggregation_weights, baseline_initial_flow, cost_difference,
                        cross_frame_neighbors, flow_embedding, identity_mlp,
                        load_weights, matching_cost, mlp_from_dims, position_encoding,
                        pseudo_cost, save_weights)
from reference import brute_knn, mlp_forward_reference, softmax_reference


def _featured_cloud(rng, n, f):
    return PointCloud(points=rng.normal(size=(n, 3)), features=rng.normal(size=(n, f)))


class TestMlp:
    def test_layer_validation(self):
        with pytest.raises(ValueError):
            MlpLayer(weight=np.zeros(3), bias=np.zeros(3))
        with pytest.raises(ValueError):
            MlpLayer(weight=np.zeros((2, 3)), bias=np.zeros(3))
        with pytest.raises(ValueError):
            MlpLayer(weight=np.full((2, 3), np.nan), bias=np.zeros(2))
        with pytest.raises(ValueError, match="activation"):
            MlpLayer(weight=np.zeros((2, 3)), bias=np.zeros(2), activation="tanh")

    def test_relu_clamps_negatives(self):
        layer = MlpLayer(weight=np.eye(2), bias=np.zeros(2), activation="relu")
        assert_array_equal(layer(np.array([-3.0, 4.0])), [0.0, 4.0])

    def test_identity_keeps_negatives(self):
        layer = MlpLayer(weight=np.eye(2), bias=np.zeros(2), activation="identity")
        assert_array_equal(layer(np.array([-3.0, 4.0])), [-3.0, 4.0])

    def test_dims_must_chain(self):
        a = MlpLayer(weight=np.zeros((4, 3)), bias=np.zeros(4))
        b = MlpLayer(weight=np.zeros((2, 5)), bias=np.zeros(2))
        with pytest.raises(ValueError, match="chain"):
            Mlp(layers=(a, b))
        with pytest.raises(ValueError):
            Mlp(layers=())

    def test_seeded_init_deterministic_and_shaped(self):
        net = mlp_from_dims([5, 7, 2], seed=3)
        again = mlp_from_dims([5, 7, 2], seed=3)
        assert net.in_dim == 5 and net.out_dim == 2
        assert net.layers[0].activation == "relu"
        assert net.layers[1].activation == "identity"
        for a, b in zip(net.layers, again.layers):
            assert_array_equal(a.weight, b.weight)
            assert_array_equal(a.bias, b.bias)

    def test_forward_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        net = mlp_from_dims([6, 9, 4], seed=1)
        x = rng.normal(size=(10, 6))
        assert_allclose(net(x), mlp_forward_reference(net, x), atol=1e-12)

    def test_forward_handles_stacked_axes(self):
        rng = np.random.default_rng(1)
        net = mlp_from_dims([4, 5, 3], seed=2)
        x = rng.normal(size=(2, 7, 4))
        got = net(x)
        assert got.shape == (2, 7, 3)
        assert_allclose(got, mlp_forward_reference(net, x), atol=1e-12)

    def test_identity_mlp_passes_through(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 6))
        assert_array_equal(identity_mlp(6)(x), x)


class TestEmbeddingConfig:
    def test_seeded_config_dimensions(self):
        cfg = EmbeddingConfig.seeded(feature_dim=4, neighbor_k=6, cost_dim=16,
                                     pos_dim=8, hidden_dim=32, seed=0)
        assert cfg.feature_dim == 4
        assert cfg.cost.in_dim == 11
        assert cfg.position.in_dim == 10
        assert cfg.attention.in_dim == 24
        assert cfg.attention.out_dim == 16
        assert cfg.cost_dim == 16 and cfg.pos_dim == 8

    def test_rejects_inconsistent_networks(self):
        cost = mlp_from_dims([11, 8, 16])
        position = mlp_from_dims([10, 8, 8])
        attention = mlp_from_dims([24, 8, 16])
        with pytest.raises(ValueError, match="neighbor_k"):
            EmbeddingConfig(neighbor_k=0, cost=cost, position=position, attention=attention)
        with pytest.raises(ValueError, match="position"):
            EmbeddingConfig(neighbor_k=4, cost=cost, position=mlp_from_dims([9, 8]),
                            attention=attention)
        with pytest.raises(ValueError, match="attention input"):
            EmbeddingConfig(neighbor_k=4, cost=cost, position=position,
                            attention=mlp_from_dims([23, 8, 16]))
        with pytest.raises(ValueError, match="attention output"):
            EmbeddingConfig(neighbor_k=4, cost=cost, position=position,
                            attention=mlp_from_dims([24, 8, 15]))


class TestForwardPieces:
    def test_matching_cost_concatenation_order(self):
        # identity network exposes the raw input layout: fi, fj, pj - pi
        got = matching_cost([1.0, 2.0], [3.0, 4.0], [0.0, 0, 0], [1.0, 0, 0],
                            identity_mlp(7))
        assert_array_equal(got, [1, 2, 3, 4, 1, 0, 0])

    def test_pseudo_cost_equals_self_match(self):
        rng = np.random.default_rng(3)
        net = mlp_from_dims([2 * 5 + 3, 12, 6], seed=4)
        fi = rng.normal(size=(9, 5))
        pi = rng.normal(size=(9, 3))
        assert_allclose(pseudo_cost(fi, pi, net),
                        matching_cost(fi, fi, pi, pi, net), atol=1e-14)

    def test_cost_difference_subtracts(self):
        got = cost_difference([[3.0, 5.0]], [[1.0, 1.0]])
        assert_array_equal(got, [[2.0, 4.0]])
        with pytest.raises(ValueError):
            cost_difference(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_position_encoding_345_triangle(self):
        got = position_encoding([0.0, 0, 0], [3.0, 4.0, 0.0], identity_mlp(10))
        assert_array_equal(got, [0, 0, 0, 3, 4, 0, -3, -4, 0, 5])

    def test_aggregation_weights_singleton_is_one(self):
        cfg = EmbeddingConfig.seeded(feature_dim=2, cost_dim=4, pos_dim=3, seed=5)
        u = np.zeros((7, 1, 4))
        s = np.zeros((7, 1, 3))
        assert_allclose(aggregation_weights(u, s, cfg.attention), np.ones((7, 1, 4)))

    def test_aggregation_weights_uniform_for_identical_neighbors(self):
        cfg = EmbeddingConfig.seeded(feature_dim=2, cost_dim=4, pos_dim=3, seed=6)
        u = np.tile(np.array([0.3, -0.2, 0.1, 0.0]), (5, 6, 1))
        s = np.tile(np.array([1.0, 2.0, 3.0]), (5, 6, 1))
        assert_allclose(aggregation_weights(u, s, cfg.attention), np.full((5, 6, 4), 1 / 6))

    def test_aggregation_weights_match_softmax_reference(self):
        rng = np.random.default_rng(7)
        cfg = EmbeddingConfig.seeded(feature_dim=2, cost_dim=5, pos_dim=4, seed=8)
        u = rng.normal(size=(6, 9, 5))
        s = rng.normal(size=(6, 9, 4))
        logits = cfg.attention(np.concatenate([u, s], axis=-1))
        expected = softmax_reference(logits, axis=-2)
        got = aggregation_weights(u, s, cfg.attention)
        assert_allclose(got, expected, atol=1e-7)
        assert_allclose(got.sum(axis=-2), np.ones((6, 5)), atol=1e-6)
        assert np.all(got >= 0) and np.all(got <= 1)

    def test_aggregation_weights_reject_misaligned_stacks(self):
        cfg = EmbeddingConfig.seeded(feature_dim=2, cost_dim=4, pos_dim=3, seed=9)
        with pytest.raises(ValueError, match="align"):
            aggregation_weights(np.zeros((2, 3, 4)), np.zeros((2, 4, 3)), cfg.attention)


class TestFlowEmbedding:
    def test_cross_frame_neighbors_match_brute_force(self):
        rng = np.random.default_rng(10)
        p0 = rng.normal(size=(30, 3))
        p1 = rng.normal(size=(40, 3))
        assert_array_equal(cross_frame_neighbors(p0, p1, 5), brute_knn(p1, p0, 5))

    def test_single_neighbor_returns_pair_cost(self):
        rng = np.random.default_rng(11)
        cfg = EmbeddingConfig.seeded(feature_dim=3, neighbor_k=1, seed=12)
        a = _featured_cloud(rng, 8, 3)
        b = _featured_cloud(rng, 8, 3)
        graph = cross_frame_neighbors(a, b, 1)
        e = flow_embedding(a, b, graph, cfg)
        j = graph[:, 0]
        expected = matching_cost(a.features, b.features[j], a.points, b.points[j], cfg.cost)
        assert_allclose(e, expected, atol=1e-12)

    def test_output_in_convex_hull_of_pair_costs(self):
        rng = np.random.default_rng(13)
        cfg = EmbeddingConfig.seeded(feature_dim=4, neighbor_k=5, seed=14)
        a = _featured_cloud(rng, 20, 4)
        b = _featured_cloud(rng, 25, 4)
        graph = cross_frame_neighbors(a, b, 5)
        e = flow_embedding(a, b, graph, cfg)
        fi = np.broadcast_to(a.features[:, None, :], (20, 5, 4))
        pair = matching_cost(fi, b.features[graph],
                             a.points[:, None, :], b.points[graph], cfg.cost)
        assert np.all(e >= pair.min(axis=1) - 1e-9)
        assert np.all(e <= pair.max(axis=1) + 1e-9)

    def test_matches_per_point_recomposition(self):
        rng = np.random.default_rng(15)
        cfg = EmbeddingConfig.seeded(feature_dim=3, neighbor_k=4, seed=16)
        a = _featured_cloud(rng, 12, 3)
        b = _featured_cloud(rng, 15, 3)
        graph = cross_frame_neighbors(a, b, 4)
        e = flow_embedding(a, b, graph, cfg)
        for i in range(12):
            nb = graph[i]
            fi = np.tile(a.features[i], (4, 1))
            pair = matching_cost(fi, b.features[nb],
                                 np.tile(a.points[i], (4, 1)), b.points[nb], cfg.cost)
            u = cost_difference(pair, pseudo_cost(a.features[i], a.points[i], cfg.cost))
            s = position_encoding(np.tile(a.points[i], (4, 1)), b.points[nb], cfg.position)
            w = aggregation_weights(u, s, cfg.attention)
            assert_allclose(e[i], (w * pair).sum(axis=0), atol=1e-12)

    def test_deterministic_for_fixed_seed(self):
        rng1 = np.random.default_rng(17)
        rng2 = np.random.default_rng(17)
        a1 = _featured_cloud(rng1, 10, 2)
        b1 = _featured_cloud(rng1, 10, 2)
        a2 = _featured_cloud(rng2, 10, 2)
        b2 = _featured_cloud(rng2, 10, 2)
        g1 = cross_frame_neighbors(a1, b1, 3)
        g2 = cross_frame_neighbors(a2, b2, 3)
        cfg = EmbeddingConfig.seeded(feature_dim=2, neighbor_k=3, seed=18)
        assert_array_equal(flow_embedding(a1, b1, g1, cfg), flow_embedding(a2, b2, g2, cfg))

    def test_input_validation(self):
        rng = np.random.default_rng(19)
        cfg = EmbeddingConfig.seeded(feature_dim=2, neighbor_k=2, seed=20)
        bare = PointCloud(points=rng.normal(size=(4, 3)))
        feat = _featured_cloud(rng, 4, 2)
        with pytest.raises(ValueError, match="features required"):
            flow_embedding(bare, feat, np.zeros((4, 2), dtype=int), cfg)
        wide = _featured_cloud(rng, 4, 5)
        with pytest.raises(ValueError, match="features"):
            flow_embedding(wide, feat, np.zeros((4, 2), dtype=int), cfg)
        with pytest.raises(ValueError, match="out of range"):
            flow_embedding(feat, feat, np.full((4, 2), 9), cfg)
        with pytest.raises(ValueError, match="graph"):
            flow_embedding(feat, feat, np.zeros((3, 2), dtype=int), cfg)


class TestBaselineFlow:
    def test_well_separated_translation_recovered(self):
        pts = np.array([[0.0, 0, 0], [3.0, 0, 0], [0, 3.0, 0], [0, 0, 3.0]])
        shift = np.array([0.01, -0.02, 0.005])
        flow = baseline_initial_flow(pts, pts + shift, k=2, tau=0.01)
        assert_allclose(flow, np.tile(shift, (4, 1)), atol=1e-12)

    def test_single_neighbor_is_hard_assignment(self):
        rng = np.random.default_rng(21)
        p0 = rng.normal(size=(15, 3))
        p1 = rng.normal(size=(20, 3))
        flow = baseline_initial_flow(p0, p1, k=1, tau=0.5)
        nearest = brute_knn(p1, p0, 1)[:, 0]
        assert_allclose(flow, p1[nearest] - p0, atol=1e-15)

    def test_matches_soft_average_reference(self):
        rng = np.random.default_rng(22)
        p0 = rng.normal(size=(10, 3))
        p1 = rng.normal(size=(12, 3))
        k, tau = 4, 0.3
        flow = baseline_initial_flow(p0, p1, k=k, tau=tau)
        nbrs = brute_knn(p1, p0, k)
        for i in range(10):
            offs = p1[nbrs[i]] - p0[i]
            w = softmax_reference(-np.sum(offs * offs, axis=1) / tau, axis=0)
            assert_allclose(flow[i], w @ offs, atol=1e-12)

    def test_rejects_non_positive_tau(self):
        with pytest.raises(ValueError):
            baseline_initial_flow(np.zeros((2, 3)), np.zeros((2, 3)), tau=0.0)


class TestWeightFiles:
    def test_round_trip_exact(self, tmp_path):
        cfg = EmbeddingConfig.seeded(feature_dim=3, neighbor_k=5, seed=23)
        path = tmp_path / "weights.txt"
        save_weights(path, cfg)
        back = load_weights(path)
        assert back.neighbor_k == 5
        for attr in ("cost", "position", "attention"):
            orig, loaded = getattr(cfg, attr), getattr(back, attr)
            assert len(orig.layers) == len(loaded.layers)
            for a, b in zip(orig.layers, loaded.layers):
                assert_array_equal(a.weight, b.weight)
                assert_array_equal(a.bias, b.bias)
                assert a.activation == b.activation

    def test_tensor_names_pinned(self, tmp_path):
        cfg = EmbeddingConfig.seeded(feature_dim=2, seed=24)
        path = tmp_path / "weights.txt"
        save_weights(path, cfg)
        text = path.read_text()
        assert text.startswith("neighbor_k 8\n")
        for name in ("h.0.weight", "h.1.bias", "ms.0.weight", "ma.1.weight"):
            assert f"tensor {name} " in text

    def test_loaded_output_matches_saved_config(self, tmp_path):
        rng = np.random.default_rng(25)
        cfg = EmbeddingConfig.seeded(feature_dim=2, neighbor_k=3, seed=26)
        a = _featured_cloud(rng, 9, 2)
        b = _featured_cloud(rng, 9, 2)
        graph = cross_frame_neighbors(a, b, 3)
        path = tmp_path / "weights.txt"
        save_weights(path, cfg)
        back = load_weights(path)
        assert_array_equal(flow_embedding(a, b, graph, cfg),
                           flow_embedding(a, b, graph, back))

    @pytest.mark.parametrize("mutate, message", [
        (lambda t: t.replace("neighbor_k 8", "neighbor_k x"), "neighbor_k"),
        (lambda t: t.replace("tensor h.0.weight", "tonsor h.0.weight", 1), "unexpected token"),
        (lambda t: t[:t.rindex("\n", 0, len(t) - 1)], "truncated"),
        (lambda t: t.replace("tensor h.0.bias", "tensor h.9.bias", 1), "missing h.0.bias"),
        (lambda t: "\n".join(line for line in t.splitlines()
                             if "neighbor_k" not in line) + "\n", "missing neighbor_k"),
    ])
    def test_malformed_files_are_diagnosed(self, tmp_path, mutate, message):
        cfg = EmbeddingConfig.seeded(feature_dim=2, seed=27)
        path = tmp_path / "weights.txt"
        save_weights(path, cfg)
        path.write_text(mutate(path.read_text()))
        with pytest.raises(InputFileError, match=message):
            load_weights(path)

    def test_non_numeric_values_are_diagnosed(self, tmp_path):
        path = tmp_path / "weights.txt"
        path.write_text("neighbor_k 4\ntensor h.0.weight 1 2\n0.5 oops\n")
        with pytest.raises(InputFileError, match="non-numeric"):
            load_weights(path)
