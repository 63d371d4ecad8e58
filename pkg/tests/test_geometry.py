import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objx.errors import InvalidInputError
from objx.geometry import (VoxelGrid, occlude, project, project_points,
                           quat_to_rot, rot_to_quat, voxelize)
from objx.sceneio import CanonicalTransform, Frame


def _frame(width=32, height=32, focal=30.0, pose=None, depth=None, mask=None):
    pose = np.eye(4) if pose is None else pose
    depth = np.full((height, width), 2.0) if depth is None else depth
    mask = np.ones((height, width), dtype=np.int32) if mask is None else mask
    k = np.array([[focal, 0, (width - 1) / 2], [0, focal, (height - 1) / 2],
                  [0, 0, 1.0]])
    return Frame(np.zeros((height, width, 3)), depth, mask, k, pose)


class TestVoxelize:
    def test_single_point_center(self):
        grid = voxelize(np.array([[0.5, 0.5, 0.5]]), 2)
        assert len(grid) == 1
        assert tuple(grid.coords[0]) == (1, 1, 1)

    def test_sphere_membership_oracle(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(10000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = 0.5 + 0.45 * v
        n = 16
        grid = voxelize(pts, n)
        # brute-force membership count per voxel
        brute = set()
        for p in pts:
            idx = tuple(min(int(p[i] * n), n - 1) for i in range(3))
            brute.add(idx)
        assert len(grid) == len(brute)
        assert {tuple(c) for c in grid.coords} == brute
        assert len(grid) < n ** 3 / 4  # sparse for surface-like input

    def test_zero_resolution(self):
        with pytest.raises(InvalidInputError):
            voxelize(np.array([[0.5, 0.5, 0.5]]), 0)

    def test_out_of_range_points(self):
        with pytest.raises(InvalidInputError):
            voxelize(np.array([[1.2, 0.5, 0.5]]), 8)

    def test_sorted_unique(self):
        rng = np.random.default_rng(1)
        grid = voxelize(rng.uniform(0, 1, (500, 3)), 8)
        assert np.unique(grid.coords, axis=0).shape == grid.coords.shape
        order = np.lexsort((grid.coords[:, 2], grid.coords[:, 1], grid.coords[:, 0]))
        assert np.array_equal(order, np.arange(len(grid)))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 1, (64, 3))
        g1 = voxelize(pts, 8)
        g2 = voxelize(pts[rng.permutation(64)], 8)
        assert np.array_equal(g1.coords, g2.coords)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        frame = _frame(depth=np.full((32, 32), 1.0))
        canonical = CanonicalTransform(np.array([-0.5, -0.5, 0.5]), 1.0)
        # canonical (0.5, 0.5, 0.5) -> world (0, 0, 1): one metre ahead
        pix = project(np.array([0.5, 0.5, 0.5]), canonical, frame,
                      voxel_size=1 / 64)
        assert pix is not None
        assert pix[0] == pytest.approx(15.5)
        assert pix[1] == pytest.approx(15.5)

    def test_behind_camera(self):
        frame = _frame()
        canonical = CanonicalTransform(np.array([-0.5, -0.5, -2.0]), 1.0)
        assert project(np.array([0.5, 0.5, 0.5]), canonical, frame) is None

    def test_occluded_by_nearer_surface(self):
        # frame depth says 1.0 m but the voxel sits 2.0 m away
        frame = _frame(depth=np.full((32, 32), 1.0))
        canonical = CanonicalTransform(np.array([-0.5, -0.5, 1.5]), 1.0)
        assert project(np.array([0.5, 0.5, 0.5]), canonical, frame) is None
        # matching depth passes
        frame_ok = _frame(depth=np.full((32, 32), 2.0))
        assert project(np.array([0.5, 0.5, 0.5]), canonical, frame_ok) is not None

    def test_outside_mask(self):
        mask = np.zeros((32, 32), dtype=np.int32)
        frame = _frame(mask=mask)
        canonical = CanonicalTransform(np.array([-0.5, -0.5, 0.5]), 1.0)
        assert project(np.array([0.5, 0.5, 0.5]), canonical, frame) is None

    def test_project_unproject_round_trip(self, tiny_observations):
        # unproject masked pixels, reproject: within 0.5 px
        obs = tiny_observations[0]
        frame = obs.frames[0]
        sel = (frame.mask == obs.object_id) & (frame.depth > 0)
        vv, uu = np.nonzero(sel)
        k = frame.intrinsics
        z = frame.depth[vv, uu]
        cam = np.stack([(uu - k[0, 2]) / k[0, 0] * z,
                        (vv - k[1, 2]) / k[1, 1] * z, z], axis=1)
        world = cam @ frame.pose[:3, :3].T + frame.pose[:3, 3]
        canonical = CanonicalTransform(np.zeros(3), 1.0)
        pix, valid = project_points(world, canonical, frame, voxel_size=1 / 64)
        assert valid.mean() > 0.95
        err = np.abs(pix[valid] - np.stack([uu, vv], axis=1)[valid])
        assert err.max() < 0.5


class TestOcclude:
    def test_identity_at_zero(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(100, 3))
        out, removed = occlude(pts, 0.0, seed=3)
        assert out.shape == pts.shape
        assert removed.sum() == 0

    def test_membership_oracle(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(5000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = v * 0.5
        out, removed = occlude(pts, 0.4, seed=7)
        # independent recomputation of the same seeded draw
        rng2 = np.random.default_rng(7)
        center = pts[rng2.integers(pts.shape[0])]
        extent = (pts.max(0) - pts.min(0)).max()
        brute = np.linalg.norm(pts - center, axis=1) < 0.5 * 0.4 * extent
        assert np.array_equal(removed, brute)
        assert out.shape[0] == (~brute).sum()
        assert removed.sum() > 0

    def test_full_diameter_may_empty(self):
        pts = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
        out, removed = occlude(pts, 1.0, seed=0)
        assert out.shape[0] + removed.sum() == 2

    def test_invalid_fraction(self):
        with pytest.raises(InvalidInputError):
            occlude(np.zeros((3, 3)), 1.5, seed=0)

    @given(st.integers(0, 2 ** 31 - 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=25, deadline=None)
    def test_nested_removal(self, seed, d1, d2):
        lo, hi = sorted([d1, d2])
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(200, 3))
        _, r_small = occlude(pts, lo, seed=seed)
        _, r_big = occlude(pts, hi, seed=seed)
        assert np.all(r_big[r_small])  # small removal is a subset of big


class TestQuaternions:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        r = quat_to_rot(q)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(r) == pytest.approx(1.0)
        q2 = rot_to_quat(r)
        assert np.allclose(quat_to_rot(q2), r, atol=1e-8)
