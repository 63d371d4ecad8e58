import numpy as np
import pytest

from objx import latent, nn
from objx.errors import ConfigError, InvalidInputError
from objx.features import SparseFeatures
from objx.geometry import VoxelGrid, sort_voxel_coords, voxelize


def _grid(coords, n=64):
    coords = sort_voxel_coords(np.asarray(coords, dtype=np.int64))
    return VoxelGrid(n, coords)


def _feats(grid, seed=0, dim=32):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(len(grid), dim))
    return SparseFeatures(grid, values, np.ones(len(grid), dtype=np.int64))


def _random_slat(n=8, count=24, seed=0, channels=8):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, n, (count, 3)), axis=0).astype(np.int64)
    grid = _grid(coords, n)
    return latent.SLat(grid, rng.normal(size=(len(grid), channels)))


class TestEncodeSlat:
    def test_zero_params_zero_latents(self):
        grid = _grid([[1, 1, 1], [5, 9, 2]])
        feats = _feats(grid)
        params = {}
        latent.init_slat_encoder(np.random.default_rng(0), params)
        for k in params:
            params[k][:] = 0.0
        slat = latent.encode_slat(feats, params)
        assert np.allclose(slat.values, 0.0)
        assert np.array_equal(slat.grid.coords, grid.coords)

    def test_isolated_voxel_matches_direct_formula(self):
        grid = _grid([[7, 7, 7]])  # no active neighbours
        feats = _feats(grid, seed=3)
        rng = np.random.default_rng(4)
        params = {}
        latent.init_slat_encoder(rng, params)
        slat = latent.encode_slat(feats, params)
        # hand evaluation: neighbour mean is the zero vector
        x = np.concatenate([feats.values[0], np.zeros(32),
                            grid.coords[0] / 64.0])[None, :]
        h1 = np.tanh(x @ params["enc.fc1.w"].T + params["enc.fc1.b"])
        h2 = np.tanh(h1 @ params["enc.fc2.w"].T + params["enc.fc2.b"])
        expect = h2 @ params["enc.fc3.w"].T + params["enc.fc3.b"]
        assert np.allclose(slat.values, expect, atol=1e-12)

    def test_neighbor_mean_enters_input(self):
        # two adjacent voxels: each sees the other's features averaged
        grid = _grid([[3, 3, 3], [3, 3, 4]])
        feats = _feats(grid, seed=5)
        params = {}
        latent.init_slat_encoder(np.random.default_rng(6), params)
        slat = latent.encode_slat(feats, params)
        x0 = np.concatenate([feats.values[0], feats.values[1],
                             grid.coords[0] / 64.0])[None, :]
        h1 = np.tanh(x0 @ params["enc.fc1.w"].T + params["enc.fc1.b"])
        h2 = np.tanh(h1 @ params["enc.fc2.w"].T + params["enc.fc2.b"])
        expect = h2 @ params["enc.fc3.w"].T + params["enc.fc3.b"]
        assert np.allclose(slat.values[0], expect[0], atol=1e-12)

    def test_input_order_invariance(self):
        coords = [[2, 3, 4], [9, 1, 5], [2, 3, 5], [60, 60, 60]]
        params = {}
        latent.init_slat_encoder(np.random.default_rng(1), params)
        rng = np.random.default_rng(2)
        values = rng.normal(size=(4, 32))
        sorted_coords = sort_voxel_coords(np.asarray(coords, dtype=np.int64))
        # voxelize used the same canonical sort; feed features in grid order
        grid = VoxelGrid(64, sorted_coords)
        out1 = latent.encode_slat(SparseFeatures(grid, values, np.ones(4, int)), params)
        out2 = latent.encode_slat(SparseFeatures(grid, values, np.ones(4, int)), params)
        assert np.array_equal(out1.values, out2.values)


class TestDensifySparsify:
    def test_round_trip_with_true_mask(self):
        slat = _random_slat(n=16, count=40, seed=7)
        dense_vals = latent.densify(slat, 16)
        logits = np.where(latent.occupancy_mask(slat.grid, 16), 10.0, -10.0)
        back, empty = latent.sparsify(latent.DenseLatent(dense_vals, logits))
        assert not empty
        assert np.array_equal(back.grid.coords, slat.grid.coords)
        assert np.allclose(back.values, slat.values)

    def test_all_positive_logits_full(self):
        dense = latent.DenseLatent(np.zeros((8, 4, 4, 4)), np.full((4, 4, 4), 10.0))
        slat, empty = latent.sparsify(dense)
        assert not empty and len(slat) == 64

    def test_all_negative_logits_empty_flagged(self):
        dense = latent.DenseLatent(np.zeros((8, 4, 4, 4)), np.full((4, 4, 4), -10.0))
        slat, empty = latent.sparsify(dense)
        assert empty and len(slat) == 0

    def test_tie_at_half_is_inactive(self):
        logits = np.full((4, 4, 4), 0.0)  # sigmoid exactly 0.5
        logits[1, 2, 3] = 1e-9
        slat, empty = latent.sparsify(latent.DenseLatent(np.zeros((8, 4, 4, 4)), logits))
        assert not empty
        assert len(slat) == 1 and tuple(slat.grid.coords[0]) == (1, 2, 3)

    def test_mixed_logits_match_elementwise_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(6, 6, 6))
        vals = rng.normal(size=(8, 6, 6, 6))
        slat, _ = latent.sparsify(latent.DenseLatent(vals, logits))
        oracle = {(i, j, k) for i in range(6) for j in range(6) for k in range(6)
                  if 1 / (1 + np.exp(-logits[i, j, k])) > 0.5}
        assert {tuple(c) for c in slat.grid.coords} == oracle


class TestCompressDecompress:
    def test_zero_slat_zero_latent(self):
        slat = _random_slat()
        slat.values[:] = 0.0
        params = {}
        latent.init_compressor(np.random.default_rng(0), params)
        for k in params:
            params[k][:] = 0.0
        w = latent.compress(slat, params, grid_resolution=8)
        assert np.allclose(w.values, 0.0)
        dense = latent.decompress(w, params)
        assert np.allclose(dense.values, 0.0)
        assert np.allclose(dense.occ_logits, 0.0)  # sigmoid 0.5 boundary
        _, empty = latent.sparsify(dense)
        assert empty  # ties are inactive

    def test_determinism(self):
        slat = _random_slat(seed=9)
        params = {}
        latent.init_compressor(np.random.default_rng(1), params)
        w1 = latent.compress(slat, params, grid_resolution=8)
        w2 = latent.compress(slat, params, grid_resolution=8)
        assert np.array_equal(w1.values, w2.values)

    def test_wrong_grid_resolution_rejected(self):
        slat = _random_slat(n=8)
        params = {}
        latent.init_compressor(np.random.default_rng(2), params)
        with pytest.raises(ConfigError):
            latent.compress(slat, params, grid_resolution=16)

    def test_output_shapes_default_arch(self):
        rng = np.random.default_rng(3)
        coords = np.unique(rng.integers(0, 64, (300, 3)), axis=0).astype(np.int64)
        slat = latent.SLat(_grid(coords, 64), rng.normal(size=(coords.shape[0], 8)))
        params = {}
        latent.init_compressor(rng, params)
        w = latent.compress(slat, params)
        assert w.values.shape == (8, 16, 16, 16)
        dense = latent.decompress(w, params)
        assert dense.values.shape == (8, 64, 64, 64)
        assert dense.occ_logits.shape == (64, 64, 64)

    def test_single_voxel_receptive_field_matches_stencil_walk(self):
        # encoder support of one active voxel == reachability through the
        # two stride-2, kernel-3 stencils
        n = 16
        coords = np.array([[9, 6, 11]], dtype=np.int64)
        slat = latent.SLat(_grid(coords, n), np.ones((1, 8)))
        rng = np.random.default_rng(4)
        params = {}
        latent.init_compressor(rng, params)
        for key in params:  # remove biases so support comes from input alone
            if key.endswith(".b"):
                params[key][:] = 0.0
        w = latent.compress(slat, params, grid_resolution=n)
        support = np.argwhere(np.abs(w.values).sum(axis=0) > 1e-12)

        def axis_reach(src, d_in):
            # output cells o reading input src through some tap t: src = 2o + t - 1
            return sorted({o for o in range(d_in // 2)
                           for t in range(3) if 2 * o + t - 1 == src})

        level1 = [axis_reach(c, n) for c in coords[0]]
        level2 = []
        for axis_cells in level1:
            nxt = sorted({o for c in axis_cells for o in axis_reach(c, n // 2)})
            level2.append(nxt)
        oracle = {(a, b, c) for a in level2[0] for b in level2[1] for c in level2[2]}
        assert {tuple(s) for s in support} <= oracle
        # the center of the stencil is always reached
        assert {tuple(s) for s in support} >= {
            (level2[0][len(level2[0]) // 2], level2[1][len(level2[1]) // 2],
             level2[2][len(level2[2]) // 2])}


class TestCompressionLoss:
    def test_exact_reconstruction_zero_latent_term(self):
        slat = _random_slat(seed=11)
        dense_vals = latent.densify(slat, 8)
        logits = np.where(latent.occupancy_mask(slat.grid, 8), 50.0, -50.0)
        loss, dval, docc = latent.compression_loss(
            latent.DenseLatent(dense_vals, logits), slat, omega=100.0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(dval, 0.0)

    def test_single_voxel_error(self):
        slat = _random_slat(seed=12)
        dense_vals = latent.densify(slat, 8)
        logits = np.where(latent.occupancy_mask(slat.grid, 8), 50.0, -50.0)
        e = 0.37
        x, y, z = slat.grid.coords[0]
        dense_vals[2, x, y, z] += e
        loss, _, _ = latent.compression_loss(
            latent.DenseLatent(dense_vals, logits), slat, omega=100.0)
        assert loss == pytest.approx(e ** 2 / 8 ** 3, abs=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        slat = _random_slat(seed=13)
        dense = latent.DenseLatent(rng.normal(size=(8, 8, 8, 8)),
                                   rng.normal(size=(8, 8, 8)))
        loss, dval, docc = latent.compression_loss(dense, slat, omega=100.0)
        eps = 1e-6
        worst = 0.0
        for _ in range(12):
            ix = tuple(rng.integers(0, 8, 4))
            old = dense.values[ix]
            dense.values[ix] = old + eps
            lp, _, _ = latent.compression_loss(dense, slat, omega=100.0)
            dense.values[ix] = old - eps
            lm, _, _ = latent.compression_loss(dense, slat, omega=100.0)
            dense.values[ix] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(dval[ix] - fd) / max(abs(fd), 1e-9))
        for _ in range(8):
            ix = tuple(rng.integers(0, 8, 3))
            old = dense.occ_logits[ix]
            dense.occ_logits[ix] = old + eps
            lp, _, _ = latent.compression_loss(dense, slat, omega=100.0)
            dense.occ_logits[ix] = old - eps
            lm, _, _ = latent.compression_loss(dense, slat, omega=100.0)
            dense.occ_logits[ix] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(docc[ix] - fd) / max(abs(fd), 1e-9))
        assert worst < 1e-4

    def test_loss_nonnegative_random(self):
        rng = np.random.default_rng(14)
        slat = _random_slat(seed=14)
        for _ in range(5):
            dense = latent.DenseLatent(rng.normal(size=(8, 8, 8, 8)),
                                       rng.normal(size=(8, 8, 8)))
            loss, _, _ = latent.compression_loss(dense, slat, omega=100.0)
            assert loss >= 0.0

    def test_omega_monotonicity(self):
        rng = np.random.default_rng(15)
        slat = _random_slat(seed=15)
        dense = latent.DenseLatent(rng.normal(size=(8, 8, 8, 8)),
                                   rng.normal(size=(8, 8, 8)))

        def inactive_term(omega):
            mask = latent.occupancy_mask(slat.grid, 8)
            diff = dense.values.copy()
            x, y, z = slat.grid.coords.T
            diff[:, x, y, z] -= slat.values.T
            sq = (diff ** 2).sum(axis=0)
            return float((sq[~mask] / omega).sum() / 8 ** 3)

        losses = [latent.compression_loss(dense, slat, omega=om)[0]
                  for om in (1.0, 10.0, 100.0, 1e6)]
        assert losses == sorted(losses, reverse=True)
        assert inactive_term(10.0) <= inactive_term(1.0)


class TestNaiveBaseline:
    def test_pooled_shapes(self):
        slat = _random_slat(n=16, count=60, seed=16)
        pooled, occ = latent.naive_compress(slat, 4, 16)
        assert pooled.shape == (8, 4, 4, 4)
        assert occ.shape == (4, 4, 4)

    def test_upsample_preserves_constant(self):
        vol = np.full((3, 4, 4, 4), 2.5)
        up = latent.trilinear_upsample(vol, 4)
        assert up.shape == (3, 16, 16, 16)
        assert np.allclose(up, 2.5)

    def test_naive_reconstruct_round_trip_active(self):
        slat = _random_slat(n=16, count=50, seed=17)
        dense = latent.naive_reconstruct(slat, 8, 16)
        back, empty = latent.sparsify(dense)
        assert not empty
        assert len(back) >= len(slat)  # pooling dilates occupancy
