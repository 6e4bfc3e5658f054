"""Shapley attribution, the binned contribution table, and dimension sweeps."""

import numpy as np
import pytest
import torch

from connectome_codec.errors import EmptyTable
from connectome_codec.explain import (
    ShapTable,
    build_shap_table,
    dimension_sweep,
    feature_fn,
    shap_values,
    surrogate_predictor,
)
from connectome_codec.model import GraphCodec
from connectome_codec.surrogate import SurrogateConfig, make_surrogates
from conftest import tiny_model_config
from oracles import oracle_shapley_permutations


def linear_g(w):
    w = np.asarray(w, dtype=np.float64)
    return lambda zs: np.atleast_2d(zs) @ w


class TestShapValues:
    def test_linear_model_analytic(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        x = rng.normal(size=5)
        bg = rng.normal(size=(12, 5))
        out = shap_values(linear_g(w), [x], bg)
        assert out.mode == "exact"
        expected = w * (x - bg.mean(axis=0))
        np.testing.assert_allclose(out.phi[0], expected, atol=1e-9)
        assert out.base_value == pytest.approx(float(bg.mean(axis=0) @ w))

    def test_constant_model_zero(self):
        g = lambda zs: np.full(len(np.atleast_2d(zs)), 7.0)
        out = shap_values(g, np.zeros((3, 4)), np.ones((5, 4)))
        np.testing.assert_array_equal(out.phi, np.zeros((3, 4)))

    def test_efficiency_exact(self):
        rng = np.random.default_rng(1)
        g = lambda zs: np.sin(np.atleast_2d(zs)).sum(axis=1) + (np.atleast_2d(zs) ** 2)[:, 0]
        x = rng.normal(size=(4, 6))
        bg = rng.normal(size=(8, 6))
        out = shap_values(g, x, bg)
        gaps = np.abs(out.phi.sum(axis=1) - (out.predictions - out.base_value))
        assert np.all(gaps <= 1e-6)

    def test_efficiency_sampled(self):
        rng = np.random.default_rng(2)
        g = lambda zs: np.tanh(np.atleast_2d(zs)).prod(axis=1)
        x = rng.normal(size=(2, 12))
        bg = rng.normal(size=(6, 12))
        out = shap_values(g, x, bg, n_coalitions=16)
        assert out.mode == "sampled"
        gaps = np.abs(out.phi.sum(axis=1) - (out.predictions - out.base_value))
        tols = 0.02 * np.abs(out.predictions - out.base_value) + 1e-3
        assert np.all(gaps <= tols)

    def test_dummy_dimension_gets_zero(self):
        # g never reads dimension 0
        g = lambda zs: np.atleast_2d(zs)[:, 1] ** 2 + 3.0 * np.atleast_2d(zs)[:, 2]
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 3))
        bg = rng.normal(size=(10, 3))
        exact = shap_values(g, x, bg)
        np.testing.assert_allclose(exact.phi[:, 0], 0.0, atol=1e-12)
        sampled = shap_values(g, x, bg, mode="sampled", n_coalitions=8)
        np.testing.assert_allclose(sampled.phi[:, 0], 0.0, atol=1e-12)

    def test_symmetry_identical_dimensions(self):
        g = lambda zs: np.exp(np.atleast_2d(zs)[:, 0] + np.atleast_2d(zs)[:, 1])
        rng = np.random.default_rng(4)
        bg = rng.normal(size=(9, 3))
        bg[:, 1] = bg[:, 0]  # identical background marginals
        x = np.array([0.8, 0.8, -0.4])
        exact = shap_values(g, [x], bg)
        assert exact.phi[0, 0] == pytest.approx(exact.phi[0, 1], rel=1e-9)
        sampled = shap_values(g, [x], bg, mode="sampled", n_coalitions=512, seed=5)
        scale = max(abs(sampled.phi[0, 0]), 1e-9)
        assert abs(sampled.phi[0, 0] - sampled.phi[0, 1]) / scale < 0.02

    def test_exact_matches_permutation_oracle(self):
        rng = np.random.default_rng(6)
        d = 4

        def g(zs):
            zs = np.atleast_2d(zs)
            return zs[:, 0] * zs[:, 1] + np.sin(zs[:, 2]) + zs[:, 3] ** 2

        x = rng.normal(size=d)
        bg = rng.normal(size=(7, d))
        out = shap_values(g, [x], bg)
        oracle = oracle_shapley_permutations(g, x, bg)
        np.testing.assert_allclose(out.phi[0], oracle, atol=1e-9)

    def test_sampled_matches_exact_on_linear(self):
        # permutation sampling is exact for additive models
        rng = np.random.default_rng(7)
        w = rng.normal(size=6)
        x = rng.normal(size=6)
        bg = rng.normal(size=(5, 6))
        exact = shap_values(linear_g(w), [x], bg)
        sampled = shap_values(linear_g(w), [x], bg, mode="sampled", n_coalitions=2)
        np.testing.assert_allclose(sampled.phi, exact.phi, atol=1e-9)

    def test_sampled_approaches_exact_nonlinear(self):
        rng = np.random.default_rng(8)

        def g(zs):
            zs = np.atleast_2d(zs)
            return np.tanh(zs).sum(axis=1) + zs[:, 0] * zs[:, 1]

        x = rng.normal(size=5)
        bg = rng.normal(size=(6, 5))
        exact = shap_values(g, [x], bg)
        sampled = shap_values(g, [x], bg, mode="sampled", n_coalitions=512, seed=1)
        err = np.linalg.norm(sampled.phi - exact.phi)
        assert err / max(np.linalg.norm(exact.phi), 1e-9) < 0.1

    def test_mode_selection_by_dimension(self):
        g = lambda zs: np.atleast_2d(zs).sum(axis=1)
        small = shap_values(g, np.zeros((1, 10)), np.ones((2, 10)))
        assert small.mode == "exact"
        big = shap_values(g, np.zeros((1, 11)), np.ones((2, 11)), n_coalitions=4)
        assert big.mode == "sampled"

    def test_single_vector_inputs(self):
        out = shap_values(linear_g([1.0, 2.0]), np.array([1.0, 1.0]),
                          np.array([0.0, 0.0]))
        assert out.phi.shape == (1, 2)
        np.testing.assert_allclose(out.phi[0], [1.0, 2.0], atol=1e-12)

    def test_empty_background_rejected(self):
        with pytest.raises(ValueError):
            shap_values(linear_g([1.0]), np.zeros((1, 1)), np.zeros((0, 1)))


class TestShapTable:
    def make_matrix(self, z, w, seed=0):
        rng = np.random.default_rng(seed)
        bg = rng.normal(size=(8, z.shape[1]))
        return shap_values(linear_g(w), z, bg)

    def test_degenerate_spread_center_bin(self):
        z = np.tile([[0.3, -0.2]], (6, 1))
        table = build_shap_table(self.make_matrix(z, [1.0, 1.0]), z, bins=11)
        assert table.counts[:, 5].tolist() == [6, 6]
        assert table.counts.sum() == 12
        assert np.isnan(table.values[0, 0])
        assert np.isfinite(table.values[0, 5])

    def test_full_coverage(self):
        rng = np.random.default_rng(9)
        z = rng.uniform(-1.0, 1.0, size=(4000, 2))
        table = build_shap_table(self.make_matrix(z, [2.0, -1.0]), z, bins=11)
        assert table.populated().all()
        assert table.n_bins == 11 and table.n_dims == 2

    def test_antisymmetric_for_linear_model(self):
        rng = np.random.default_rng(10)
        half = rng.normal(size=(3000, 2))
        z = np.concatenate([half, -half])  # exactly symmetric sample
        bg = np.concatenate([half[:4], -half[:4]])  # zero-mean background
        matrix = shap_values(linear_g([1.5, -0.7]), z, bg)
        table = build_shap_table(matrix, z, bins=11)
        for i in range(2):
            for k in range(11):
                mirror = table.values[i, 10 - k]
                if np.isfinite(table.values[i, k]) and np.isfinite(mirror):
                    assert table.values[i, k] == pytest.approx(-mirror, abs=1e-9)

    def test_min_count_floor(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(40, 2))
        matrix = self.make_matrix(z, [1.0, 1.0])
        table = build_shap_table(matrix, z, bins=11, min_count=10)
        assert not table.populated()[table.counts < 10].any()
        assert (table.counts[table.populated()] >= 10).all()

    def test_empty_table_raises(self):
        z = np.random.default_rng(12).normal(size=(4, 2))
        matrix = self.make_matrix(z, [1.0, 1.0])
        with pytest.raises(EmptyTable):
            build_shap_table(matrix, z, bins=11, min_count=100)

    def test_shape_mismatch_rejected(self):
        z = np.zeros((5, 3))
        matrix = self.make_matrix(np.zeros((5, 2)), [1.0, 1.0])
        with pytest.raises(ValueError):
            build_shap_table(matrix, z)

    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(30, 3))
        table = build_shap_table(self.make_matrix(z, [1.0, 0.5, -2.0]), z,
                                 bins=7, min_count=2)
        path = tmp_path / "table.json"
        table.save(path)
        back = ShapTable.load(path)
        np.testing.assert_array_equal(np.isnan(back.values), np.isnan(table.values))
        np.testing.assert_allclose(back.values[~np.isnan(back.values)],
                                   table.values[~np.isnan(table.values)])
        np.testing.assert_array_equal(back.counts, table.counts)
        np.testing.assert_allclose(back.bin_centers, table.bin_centers)
        np.testing.assert_allclose(back.sigma, table.sigma)
        assert back.min_count == 2


class TestFeatureFn:
    def test_unknown_feature(self):
        with pytest.raises(ValueError):
            feature_fn("clustering")

    def test_known_features(self):
        for name in ("edge_count", "reciprocity", "betweenness", "non_neuronal"):
            assert callable(feature_fn(name))


class TestDimensionSweep:
    @pytest.fixture
    def decoder(self):
        model = GraphCodec(tiny_model_config())
        model.reset_parameters(21)
        return model

    def test_output_length_and_grid_echo(self, decoder):
        grid = np.linspace(-3.0, 3.0, 7)
        curve = dimension_sweep(decoder, "edge_count", dim=1, grid=grid)
        assert len(curve) == 7
        assert [v for v, _ in curve] == pytest.approx(list(grid))

    def test_zero_grid_shared_baseline(self, decoder):
        baseline = {dimension_sweep(decoder, "edge_count", dim=i, grid=[0.0])[0][1]
                    for i in range(4)}
        assert len(baseline) == 1

    def test_reciprocity_gaps_are_none(self, decoder):
        with torch.no_grad():
            decoder.edge_decoder[-1].weight.zero_()
            decoder.edge_decoder[-1].bias.fill_(-50.0)
        curve = dimension_sweep(decoder, "reciprocity", dim=0, grid=[-1.0, 0.0, 1.0])
        assert all(stat is None for _, stat in curve)


class TestSurrogatePredictor:
    def test_vectorized_matches_per_sample(self):
        model = GraphCodec(tiny_model_config())
        model.reset_parameters(22)
        sset = make_surrogates(SurrogateConfig(n_nodes=6, row_width=4, hidden=8))
        g = surrogate_predictor(model, sset, "edge_count")
        zs = np.random.default_rng(14).normal(size=(5, 4))
        batch = g(zs)
        assert batch.shape == (5,)
        for i in range(5):
            with torch.no_grad():
                dg = model.decode_tensors(torch.tensor(zs[i], dtype=torch.float32))
                single = sset.f_edge_count(dg.edge_probs).item()
            assert batch[i] == pytest.approx(single, rel=1e-5)

    def test_non_neuronal_routes_to_scores(self):
        model = GraphCodec(tiny_model_config())
        model.reset_parameters(23)
        sset = make_surrogates(SurrogateConfig(n_nodes=6, row_width=4, hidden=8))
        g = surrogate_predictor(model, sset, "non_neuronal")
        out = g(np.zeros((2, 4)))
        assert out.shape == (2,)
        assert np.isfinite(out).all()
