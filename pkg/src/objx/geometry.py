"""Camera projection, voxel-grid addressing, and occlusion geometry.

All operations are pure. Voxel membership is half-open, [k/N, (k+1)/N) per
axis, so points on shared faces are counted once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .sceneio import CanonicalTransform, Frame

DEFAULT_RESOLUTION = 64


@dataclass
class VoxelGrid:
    """Sparse set of active voxels on an N^3 grid.

    Coordinates are unique, in range, and sorted lexicographically; that order
    is the canonical ordering of every downstream per-voxel tensor.
    """

    resolution: int
    coords: np.ndarray  # (L, 3) int64, lexicographically sorted

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def voxel_size(self) -> float:
        return 1.0 / self.resolution

    def centers(self) -> np.ndarray:
        """Canonical-space voxel centers, (L, 3)."""
        return (self.coords.astype(np.float64) + 0.5) / self.resolution

    def flat_indices(self) -> np.ndarray:
        n = self.resolution
        c = self.coords
        return (c[:, 0] * n + c[:, 1]) * n + c[:, 2]


def sort_voxel_coords(coords: np.ndarray) -> np.ndarray:
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    return coords[order]


def voxelize(points: np.ndarray, resolution: int = DEFAULT_RESOLUTION) -> VoxelGrid:
    """Activate every voxel containing at least one canonical-space point."""
    if resolution <= 0:
        raise InvalidInputError(f"resolution must be positive, got {resolution}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidInputError("voxelize needs a non-empty (P, 3) point cloud")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise InvalidInputError("points must lie in [0,1]^3; canonicalize first")
    idx = np.minimum((pts * resolution).astype(np.int64), resolution - 1)
    coords = np.unique(idx, axis=0)  # unique over rows is lexicographic
    return VoxelGrid(resolution, coords)


# ---------------------------------------------------------------------------
# projection


def world_to_camera(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    r = pose[:3, :3]
    t = pose[:3, 3]
    return (np.atleast_2d(points) - t) @ r


def project_points(centers: np.ndarray, canonical: CanonicalTransform,
                   frame: Frame, voxel_size: float = 1.0 / DEFAULT_RESOLUTION):
    """Vectorised pinhole projection of canonical points into a frame.

    Returns ``(pixels (L, 2) float [u, v], valid (L,) bool)``. A point is
    valid when it lies in front of the camera, lands inside the image and the
    object's mask, and passes the depth-gated occlusion test: the frame depth
    at the pixel must agree with the point's camera depth within
    ``2 * voxel_size * canonical.scale`` metres.
    """
    world = canonical.to_world(np.atleast_2d(centers))
    cam = world_to_camera(world, frame.pose)
    k = frame.intrinsics
    h, w = frame.depth.shape
    z = cam[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    u = k[0, 0] * cam[:, 0] / zs + k[0, 2]
    v = k[1, 1] * cam[:, 1] / zs + k[1, 2]
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    valid &= inside
    uc = np.clip(ui, 0, w - 1)
    vc = np.clip(vi, 0, h - 1)
    valid &= frame.mask[vc, uc] > 0
    tau = 2.0 * voxel_size * canonical.scale
    frame_depth = frame.depth[vc, uc]
    valid &= frame_depth > 0
    valid &= np.abs(frame_depth - z) <= tau
    return np.stack([u, v], axis=1), valid


def project(voxel_center: np.ndarray, canonical: CanonicalTransform,
            frame: Frame, voxel_size: float = 1.0 / DEFAULT_RESOLUTION):
    """Single-point version of :func:`project_points`; None when invisible."""
    pix, valid = project_points(np.asarray(voxel_center)[None, :], canonical,
                                frame, voxel_size)
    if not valid[0]:
        return None
    return float(pix[0, 0]), float(pix[0, 1])


# ---------------------------------------------------------------------------
# occlusion ablation


def occlude(points: np.ndarray, d: float, seed: int):
    """Remove all points inside a sphere anchored on the object's surface.

    The sphere center is a uniformly random input point (seeded) and its
    diameter is ``d`` times the largest bbox extent. Returns
    ``(points, removed_mask)``; d = 0 is the identity.
    """
    if not 0.0 <= d <= 1.0:
        raise InvalidInputError(f"occlusion fraction d must be in [0,1], got {d}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise InvalidInputError("occlude needs a non-empty point cloud")
    rng = np.random.default_rng(seed)
    center = pts[rng.integers(pts.shape[0])]
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    radius = 0.5 * d * extent
    dist = np.linalg.norm(pts - center, axis=1)
    removed = dist < radius
    return pts[~removed], removed


# ---------------------------------------------------------------------------
# rotations


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)
