"""Per-image feature extraction and per-voxel multi-view aggregation.

The default extractor is a deterministic handcrafted descriptor standing in
for a learned backbone behind the same interface: per stride-8 cell it
concatenates mean RGB, RGB standard deviation, an 8-bin gradient-orientation
histogram, and the normalized cell position, then projects to D_f dimensions
with a fixed seeded random matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import VoxelGrid, project_points
from .sceneio import CanonicalTransform, Frame

FEATURE_DIM = 32
FEATURE_STRIDE = 8
_RAW_DIM = 16          # 3 mean + 3 std + 8 histogram + 2 position
_PROJECTION_SEED = 7
_NORM_BOUND = 10.0


@dataclass
class FeatureMap:
    """Descriptor grid at a fixed pixel stride over one frame."""

    data: np.ndarray    # (Hc, Wc, D_f)
    valid: np.ndarray   # (Hc, Wc) bool; False on background cells
    stride: int

    def cell_of(self, u: float, v: float) -> tuple[int, int]:
        """Nearest cell for a projected (sub-)pixel location."""
        row = min(max(int(round(v)) // self.stride, 0), self.data.shape[0] - 1)
        col = min(max(int(round(u)) // self.stride, 0), self.data.shape[1] - 1)
        return row, col


@dataclass
class SparseFeatures:
    """One aggregated descriptor per active voxel, in grid order."""

    grid: VoxelGrid
    values: np.ndarray       # (L, D_f)
    view_counts: np.ndarray  # (L,) int

    def __len__(self) -> int:
        return self.values.shape[0]


def _projection_matrix(dim: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.normal(size=(dim, _RAW_DIM)) / np.sqrt(_RAW_DIM)


def extract_features(frame: Frame, object_id: int, dim: int = FEATURE_DIM,
                     stride: int = FEATURE_STRIDE) -> FeatureMap:
    """Handcrafted per-cell descriptors over the object's masked pixels.

    Cells with no masked pixel are flagged invalid and carry zeros. The same
    frame always yields the same map.
    """
    return _descriptor_map(frame.image, frame.mask == object_id, dim, stride)


def dense_descriptors(image: np.ndarray, dim: int = FEATURE_DIM,
                      stride: int = FEATURE_STRIDE) -> FeatureMap:
    """Descriptors over the whole image (query images carry no mask)."""
    return _descriptor_map(image, np.ones(image.shape[:2], dtype=bool), dim, stride)


def _descriptor_map(image: np.ndarray, sel: np.ndarray, dim: int,
                    stride: int) -> FeatureMap:
    h, w = image.shape[:2]
    hc = (h + stride - 1) // stride
    wc = (w + stride - 1) // stride
    data = np.zeros((hc, wc, dim))
    valid = np.zeros((hc, wc), dtype=bool)
    if not np.any(sel):
        return FeatureMap(data, valid, stride)

    gray = image.mean(axis=2)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    mag = np.hypot(gx, gy)
    ori = np.arctan2(gy, gx)                       # [-pi, pi)
    bins = np.floor((ori + np.pi) / (2 * np.pi / 8)).astype(np.int64)
    bins = np.clip(bins, 0, 7)

    proj = _projection_matrix(dim)
    vv, uu = np.nonzero(sel)
    rows = vv // stride
    cols = uu // stride
    cell_key = rows * wc + cols
    order = np.argsort(cell_key, kind="stable")
    cell_key = cell_key[order]
    vv, uu = vv[order], uu[order]
    starts = np.searchsorted(cell_key, np.unique(cell_key))
    bounds = np.append(starts, cell_key.size)
    for s, e in zip(bounds[:-1], bounds[1:]):
        r, c = int(cell_key[s] // wc), int(cell_key[s] % wc)
        pv, pu = vv[s:e], uu[s:e]
        rgb = image[pv, pu]
        raw = np.empty(_RAW_DIM)
        raw[0:3] = rgb.mean(axis=0)
        raw[3:6] = rgb.std(axis=0)
        hist = np.bincount(bins[pv, pu], weights=mag[pv, pu], minlength=8)
        raw[6:14] = hist
        raw[14] = (c * stride + stride / 2.0) / w
        raw[15] = (r * stride + stride / 2.0) / h
        desc = proj @ raw
        nrm = np.linalg.norm(desc)
        if nrm > _NORM_BOUND:
            desc *= _NORM_BOUND / nrm
        data[r, c] = desc
        valid[r, c] = True
    return FeatureMap(data, valid, stride)


def aggregate(grid: VoxelGrid, frames: list, maps: list,
              canonical: CanonicalTransform) -> SparseFeatures:
    """Average per-view descriptors over each voxel's successful projections.

    The mean is over contributing views only; voxels visible in no frame keep
    the zero vector with view_count 0 (occupancy stays informative downstream).
    """
    if len(frames) != len(maps):
        raise InvalidInputError("frames and feature maps must align")
    centers = grid.centers()
    n = len(grid)
    dim = maps[0].data.shape[2] if maps else FEATURE_DIM
    acc = np.zeros((n, dim))
    counts = np.zeros(n, dtype=np.int64)
    for frame, fmap in zip(frames, maps):
        pix, vis = project_points(centers, canonical, frame, grid.voxel_size)
        if not np.any(vis):
            continue
        idx = np.nonzero(vis)[0]
        rows = np.round(pix[idx, 1]).astype(np.int64) // fmap.stride
        cols = np.round(pix[idx, 0]).astype(np.int64) // fmap.stride
        rows = np.clip(rows, 0, fmap.data.shape[0] - 1)
        cols = np.clip(cols, 0, fmap.data.shape[1] - 1)
        ok = fmap.valid[rows, cols]
        idx, rows, cols = idx[ok], rows[ok], cols[ok]
        acc[idx] += fmap.data[rows, cols]
        counts[idx] += 1
    values = np.where(counts[:, None] > 0, acc / np.maximum(counts, 1)[:, None], 0.0)
    return SparseFeatures(grid, values, counts)


# ---------------------------------------------------------------------------
# extractor plug-ins


class ExternalFeatures:
    """Reads precomputed per-frame maps from ``<dir>/<frame_id>.npy``.

    Files hold row-major float32 cell descriptors of shape (Hc, Wc, D_f);
    validity is derived from the frame's own mask at the same stride.
    """

    def __init__(self, directory, stride: int = FEATURE_STRIDE):
        self.directory = Path(directory)
        self.stride = stride

    def __call__(self, frame: Frame, object_id: int) -> FeatureMap:
        path = self.directory / f"{frame.frame_id}.npy"
        if not path.is_file():
            raise InvalidInputError(f"no precomputed features at {path}")
        data = np.load(path).astype(np.float64)
        sel = frame.mask == object_id
        hc, wc = data.shape[:2]
        valid = np.zeros((hc, wc), dtype=bool)
        vv, uu = np.nonzero(sel)
        valid[np.minimum(vv // self.stride, hc - 1),
              np.minimum(uu // self.stride, wc - 1)] = True
        return FeatureMap(data, valid, self.stride)


def get_extractor(spec: str = "handcrafted"):
    """Resolve the CLI-facing ``--features`` value to a callable."""
    if spec == "handcrafted":
        return extract_features
    if spec.startswith("external:"):
        return ExternalFeatures(spec.split(":", 1)[1])
    raise InvalidInputError(f"unknown feature extractor {spec!r}")
