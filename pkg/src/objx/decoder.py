"""Map reconstructed structured latents to 3D Gaussian parameters.

Each active voxel emits a fixed number of Gaussians through a small MLP.
Positions are the voxel center plus a tanh-bounded offset of at most half a
voxel, so splats stay tied to the coarse voxel layout. All activation
choices keep parameters inside their documented ranges for any raw values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, InvalidInputError
from .latent import HIDDEN, LATENT_CHANNELS, SLat
from .sceneio import CanonicalTransform

GAUSSIANS_PER_VOXEL = 4
SCALE_MIN = 1e-5
SCALE_MAX = 0.5
_RAW_PER_GAUSSIAN = 14  # offset 3, log-scale 3, quaternion 4, opacity 1, color 3

GAUSSIAN_MAGIC = b"OBJG"
GAUSSIAN_VERSION = 1


@dataclass
class GaussianSet:
    """Splat parameters in canonical units plus the world placement."""

    positions: np.ndarray   # (M, 3) canonical
    scales: np.ndarray      # (M, 3) canonical, in [SCALE_MIN, SCALE_MAX]
    rotations: np.ndarray   # (M, 4) unit quaternions (w, x, y, z)
    opacities: np.ndarray   # (M,) in (0, 1)
    colors: np.ndarray      # (M, 3) in [0, 1]
    canonical: CanonicalTransform

    def __len__(self) -> int:
        return self.positions.shape[0]

    def world_arrays(self):
        """Positions/scales mapped into world metres (rotations unchanged)."""
        pos = self.canonical.to_world(self.positions) if len(self) else self.positions
        return pos, self.scales * self.canonical.scale, self.rotations, \
            self.opacities, self.colors


def init_gs_decoder(rng: np.random.Generator, params: nn.Params,
                    channels: int = LATENT_CHANNELS,
                    g: int = GAUSSIANS_PER_VOXEL, hidden: int = HIDDEN) -> None:
    # head biases: opacity starts high, scale near one voxel, identity rotation
    per = np.zeros(_RAW_PER_GAUSSIAN)
    per[3:6] = 0.7
    per[6] = 1.0
    per[10] = 2.0
    nn.init_mlp(rng, params, "dec", channels + 3, hidden, g * _RAW_PER_GAUSSIAN,
                out_bias=np.tile(per, g))


def decode_forward(params: nn.Params, slat: SLat,
                   g: int = GAUSSIANS_PER_VOXEL,
                   canonical: CanonicalTransform | None = None):
    """Per-voxel MLP emitting ``g`` Gaussians; returns (GaussianSet, cache)."""
    grid = slat.grid
    n_vox = len(slat)
    voxel = grid.voxel_size
    canonical = canonical or CanonicalTransform.identity()
    if n_vox == 0:
        empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                            np.zeros(0), np.zeros((0, 3)), canonical)
        return empty, None
    pos_norm = grid.coords.astype(np.float64) / grid.resolution
    x = np.concatenate([slat.values, pos_norm], axis=1)
    raw, mlp_cache = nn.mlp_forward(params, "dec", x)
    raw = raw.reshape(n_vox, g, _RAW_PER_GAUSSIAN)

    centers = np.repeat(grid.centers(), g, axis=0)
    off_raw = raw[:, :, 0:3].reshape(-1, 3)
    t_off = np.tanh(off_raw)
    positions = centers + t_off * (voxel / 2.0)

    ls = raw[:, :, 3:6].reshape(-1, 3)
    s_pre = voxel * nn.softplus(ls)
    scales = np.clip(s_pre, SCALE_MIN, SCALE_MAX)

    q_raw = raw[:, :, 6:10].reshape(-1, 4)
    norms = np.linalg.norm(q_raw, axis=1)
    degenerate = norms < 1e-12
    safe = np.where(degenerate, 1.0, norms)
    rotations = q_raw / safe[:, None]
    rotations[degenerate] = np.array([1.0, 0.0, 0.0, 0.0])

    a_raw = raw[:, :, 10].reshape(-1)
    # keep opacity strictly inside (0, 1) even when the sigmoid saturates;
    # the clamp only acts where the sigmoid's slope is ~0 anyway
    opacities = np.clip(nn.sigmoid(a_raw), 1e-7, 1.0 - 1e-7)
    c_raw = raw[:, :, 11:14].reshape(-1, 3)
    colors = nn.sigmoid(c_raw)

    gaussians = GaussianSet(positions, scales, rotations, opacities, colors,
                            canonical)
    cache = (mlp_cache, n_vox, g, voxel, t_off, ls, s_pre, q_raw, norms,
             degenerate, opacities, colors)
    return gaussians, cache


def decode(zhat_sparse: SLat, params: nn.Params,
           canonical: CanonicalTransform | None = None,
           g: int = GAUSSIANS_PER_VOXEL) -> GaussianSet:
    out, _ = decode_forward(params, zhat_sparse, g=g, canonical=canonical)
    return out


def decode_backward(params: nn.Params, cache, d_gauss: dict,
                    grads: nn.Params) -> np.ndarray:
    """Chain splat-parameter gradients back to the MLP; returns dL/dz (L, C)."""
    (mlp_cache, n_vox, g, voxel, t_off, ls, s_pre, q_raw, norms, degenerate,
     opacities, colors) = cache
    d_raw = np.zeros((n_vox * g, _RAW_PER_GAUSSIAN))

    dp = d_gauss.get("positions")
    if dp is not None:
        d_raw[:, 0:3] = dp * (voxel / 2.0) * (1.0 - t_off * t_off)

    ds = d_gauss.get("scales")
    if ds is not None:
        in_range = (s_pre > SCALE_MIN) & (s_pre < SCALE_MAX)
        d_raw[:, 3:6] = ds * in_range * voxel * nn.sigmoid(ls)

    dq = d_gauss.get("rotations")
    if dq is not None:
        safe = np.where(degenerate, 1.0, norms)
        qn = q_raw / safe[:, None]
        proj = dq - qn * np.sum(qn * dq, axis=1, keepdims=True)
        d_raw[:, 6:10] = np.where(degenerate[:, None], 0.0, proj / safe[:, None])

    da = d_gauss.get("opacities")
    if da is not None:
        d_raw[:, 10] = da * opacities * (1.0 - opacities)

    dc = d_gauss.get("colors")
    if dc is not None:
        d_raw[:, 11:14] = dc * colors * (1.0 - colors)

    dx = nn.mlp_backward(params, mlp_cache, d_raw.reshape(n_vox, g * _RAW_PER_GAUSSIAN),
                         grads)
    return dx[:, :LATENT_CHANNELS]


# ---------------------------------------------------------------------------
# scene composition


def compose_scene(objects: list) -> GaussianSet:
    """Concatenate per-object splats mapped to world space.

    Takes ``(GaussianSet, CanonicalTransform)`` pairs; placement is rigid plus
    uniform scale, so rotations pass through and scales multiply.
    """
    if not objects:
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                           np.zeros(0), np.zeros((0, 3)),
                           CanonicalTransform.identity())
    parts = []
    for gauss, transform in objects:
        pos = transform.to_world(gauss.positions) if len(gauss) else gauss.positions
        parts.append((pos, gauss.scales * transform.scale, gauss.rotations,
                      gauss.opacities, gauss.colors))
    return GaussianSet(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
        CanonicalTransform.identity(),
    )


# ---------------------------------------------------------------------------
# persistence: header + one 14-float record per Gaussian


def save_gaussians(gaussians: GaussianSet, path) -> None:
    blob = bytearray()
    blob += GAUSSIAN_MAGIC
    blob += struct.pack("<BI", GAUSSIAN_VERSION, len(gaussians))
    t = gaussians.canonical.translation
    blob += struct.pack("<4f", t[0], t[1], t[2], gaussians.canonical.scale)
    records = np.concatenate([
        gaussians.positions, gaussians.scales, gaussians.rotations,
        gaussians.opacities[:, None], gaussians.colors], axis=1)
    blob += np.ascontiguousarray(records, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_gaussians(path) -> GaussianSet:
    blob = Path(path).read_bytes()
    if blob[:4] != GAUSSIAN_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != GAUSSIAN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<BI")
    tx, ty, tz, scale = struct.unpack_from("<4f", blob, off)
    off += 16
    expect = count * 14 * 4
    if len(blob) - off != expect:
        raise FormatError(f"{path}: payload is {len(blob) - off} bytes, expected {expect}")
    rec = np.frombuffer(blob, dtype="<f4", count=count * 14, offset=off)
    rec = rec.reshape(count, 14).astype(np.float64)
    return GaussianSet(
        positions=rec[:, 0:3], scales=rec[:, 3:6], rotations=rec[:, 6:10],
        opacities=rec[:, 10], colors=rec[:, 11:14],
        canonical=CanonicalTransform(np.array([tx, ty, tz]), float(scale)))


def validate_gaussians(gaussians: GaussianSet) -> None:
    if len(gaussians) == 0:
        return
    norms = np.linalg.norm(gaussians.rotations, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise InvalidInputError("rotations must be unit quaternions")
    if np.any(gaussians.scales < SCALE_MIN - 1e-12) or np.any(gaussians.scales > SCALE_MAX + 1e-12):
        raise InvalidInputError("scales outside the permitted range")
    if np.any(gaussians.opacities <= 0) or np.any(gaussians.opacities >= 1):
        raise InvalidInputError("opacities must lie strictly inside (0, 1)")
    if np.any(gaussians.colors < 0) or np.any(gaussians.colors > 1):
        raise InvalidInputError("colors must lie in [0, 1]")
