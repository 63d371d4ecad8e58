"""Structured latents and their fixed-size compression.

The encoder maps aggregated per-voxel features to C-channel latents with a
small per-voxel MLP that also sees the mean feature of active 6-neighbors and
the normalized voxel position. Compression densifies the sparse latent onto
the full grid, funnels it through strided 3D convolutions to a D^3 x C'
bottleneck, and the mirrored decoder reconstructs the dense latent plus an
occupancy logit channel used to re-sparsify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InvalidInputError
from .features import SparseFeatures
from .geometry import VoxelGrid, sort_voxel_coords

LATENT_CHANNELS = 8        # C
EMBED_RESOLUTION = 16      # D
EMBED_CHANNELS = 8         # C'
GRID_RESOLUTION = 64       # N
DEFAULT_OMEGA = 100.0      # down-weight for unoccupied voxels in the masked MSE
HIDDEN = 64

_NEIGHBOR_OFFSETS = np.array([
    [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass
class SLat:
    """Sparse structured latent: one C-vector per active voxel, grid order."""

    grid: VoxelGrid
    values: np.ndarray  # (L, C)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class DenseLatent:
    """Zero-filled dense latent plus occupancy logits."""

    values: np.ndarray      # (C, N, N, N)
    occ_logits: np.ndarray  # (N, N, N)

    @property
    def resolution(self) -> int:
        return self.values.shape[1]


@dataclass
class U3dgsLatent:
    values: np.ndarray  # (C', D, D, D)

    @property
    def resolution(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# SLat encoder


def init_slat_encoder(rng: np.random.Generator, params: nn.Params,
                      feature_dim: int = 32, channels: int = LATENT_CHANNELS,
                      hidden: int = HIDDEN) -> None:
    nn.init_mlp(rng, params, "enc", 2 * feature_dim + 3, hidden, channels)


def _neighbor_pairs(grid: VoxelGrid):
    """(src, dst) index pairs of active voxels one face apart, plus counts."""
    flat = grid.flat_indices()
    n = grid.resolution
    srcs, dsts = [], []
    for off in _NEIGHBOR_OFFSETS:
        nbr = grid.coords + off
        ok = np.all((nbr >= 0) & (nbr < n), axis=1)
        nbr_flat = (nbr[:, 0] * n + nbr[:, 1]) * n + nbr[:, 2]
        pos = np.searchsorted(flat, nbr_flat)
        pos = np.clip(pos, 0, flat.size - 1)
        found = ok & (flat[pos] == nbr_flat)
        srcs.append(np.nonzero(found)[0])
        dsts.append(pos[found])
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    counts = np.bincount(src, minlength=len(grid))
    return src, dst, counts


def _neighbor_mean(values: np.ndarray, src, dst, counts) -> np.ndarray:
    acc = np.zeros_like(values)
    np.add.at(acc, src, values[dst])
    return acc / np.maximum(counts, 1)[:, None]


def encode_slat_forward(params: nn.Params, feats: SparseFeatures):
    """Per-voxel latents z_i = MLP(f_i (+) nbr_mean(f)_i (+) p_i / N)."""
    grid = feats.grid
    src, dst, counts = _neighbor_pairs(grid)
    nmean = _neighbor_mean(feats.values, src, dst, counts)
    pos = grid.coords.astype(np.float64) / grid.resolution
    x = np.concatenate([feats.values, nmean, pos], axis=1)
    z, cache = nn.mlp_forward(params, "enc", x)
    return SLat(grid, z), cache


def encode_slat(feats: SparseFeatures, params: nn.Params) -> SLat:
    slat, _ = encode_slat_forward(params, feats)
    return slat


def encode_slat_backward(params: nn.Params, cache, dz: np.ndarray,
                         grads: nn.Params) -> None:
    nn.mlp_backward(params, cache, dz, grads)


# ---------------------------------------------------------------------------
# densify / sparsify


def densify(slat: SLat, resolution: int = GRID_RESOLUTION) -> np.ndarray:
    """Zero-filled (C, N, N, N) tensor carrying the sparse latents."""
    if np.any(slat.grid.coords >= resolution):
        raise InvalidInputError("voxel coordinates exceed the dense resolution")
    c = slat.values.shape[1]
    dense = np.zeros((c, resolution, resolution, resolution))
    x, y, z = slat.grid.coords.T
    dense[:, x, y, z] = slat.values.T
    return dense


def occupancy_mask(grid: VoxelGrid, resolution: int | None = None) -> np.ndarray:
    n = resolution or grid.resolution
    m = np.zeros((n, n, n), dtype=bool)
    x, y, z = grid.coords.T
    m[x, y, z] = True
    return m


def sparsify(dense: DenseLatent):
    """Threshold the occupancy head at 0.5 (logit 0); ties are inactive.

    Returns ``(slat, empty)`` where ``empty`` flags a legal zero-voxel result.
    """
    n = dense.resolution
    active = dense.occ_logits > 0.0
    coords = np.argwhere(active)
    if coords.shape[0] == 0:
        grid = VoxelGrid(n, np.zeros((0, 3), dtype=np.int64))
        return SLat(grid, np.zeros((0, dense.values.shape[0]))), True
    coords = sort_voxel_coords(coords.astype(np.int64))
    x, y, z = coords.T
    values = dense.values[:, x, y, z].T
    return SLat(VoxelGrid(n, coords), values), False


# ---------------------------------------------------------------------------
# compressor / decompressor architectures
#
# The default (D = 16) encoder is two strided convolutions, 64^3 -> 32^3 ->
# 16^3 with channels 8 -> 16 -> 8 and no skips, so the bottleneck really is
# the only route. Other bottleneck resolutions (for the ablation harness)
# adjust the layer list.


def _compressor_layers(target: int):
    if target == 32:
        return [("conv", "comp.l0", 16, 2), ("tanh",), ("conv", "comp.l1", EMBED_CHANNELS, 1)]
    if target == 16:
        return [("conv", "comp.l0", 16, 2), ("tanh",), ("conv", "comp.l1", EMBED_CHANNELS, 2)]
    if target == 8:
        return [("conv", "comp.l0", 16, 2), ("tanh",), ("conv", "comp.l1", 16, 2),
                ("tanh",), ("conv", "comp.l2", EMBED_CHANNELS, 2)]
    raise ConfigError(f"unsupported embedding resolution {target}")


def _decompressor_layers(target: int):
    if target == 32:
        return [("conv", "decomp.l0", 16, 1), ("tanh",), ("tconv", "decomp.l1", LATENT_CHANNELS + 1)]
    if target == 16:
        return [("tconv", "decomp.l0", 16), ("tanh",), ("tconv", "decomp.l1", LATENT_CHANNELS + 1)]
    if target == 8:
        return [("tconv", "decomp.l0", 16), ("tanh",), ("tconv", "decomp.l1", 16),
                ("tanh",), ("tconv", "decomp.l2", LATENT_CHANNELS + 1)]
    raise ConfigError(f"unsupported embedding resolution {target}")


OCC_BIAS_INIT = -4.0  # start the occupancy head near the sparse-active prior


def init_compressor(rng: np.random.Generator, params: nn.Params,
                    embed_resolution: int = EMBED_RESOLUTION,
                    channels: int = LATENT_CHANNELS) -> None:
    c = channels
    for layer in _compressor_layers(embed_resolution):
        if layer[0] == "conv":
            _, name, c_out, _stride = layer
            nn.init_conv3(rng, params, name, c_out, c)
            c = c_out
    c = EMBED_CHANNELS
    last = None
    for layer in _decompressor_layers(embed_resolution):
        if layer[0] == "tconv":
            _, name, c_out = layer
            nn.init_tconv3(rng, params, name, c_out, c)
            c = c_out
            last = name
        elif layer[0] == "conv":
            _, name, c_out, _stride = layer
            nn.init_conv3(rng, params, name, c_out, c)
            c = c_out
            last = name
    # active voxels are a sub-percent minority of the dense grid; starting the
    # occupancy logit at zero wastes most of a training run walking the bias
    # down to the prior
    params[f"{last}.b"][LATENT_CHANNELS] = OCC_BIAS_INIT


def _run_layers(params: nn.Params, layers, x: np.ndarray):
    caches = []
    for layer in layers:
        if layer[0] == "tanh":
            x, cache = nn.tanh_forward(x)
        elif layer[0] == "conv":
            _, name, _c_out, stride = layer
            x, cache = nn.conv3_forward(params, name, x, stride=stride)
        elif layer[0] == "tconv":
            _, name, _c_out = layer
            x, cache = nn.tconv3_forward(params, name, x)
        caches.append((layer[0], cache))
    return x, caches


def _run_layers_backward(params: nn.Params, caches, dy: np.ndarray,
                         grads: nn.Params,
                         need_input_grad: bool = True) -> np.ndarray:
    for pos, (kind, cache) in enumerate(reversed(caches)):
        last = pos == len(caches) - 1
        if kind == "tanh":
            dy = nn.tanh_backward(cache, dy)
        elif kind == "conv":
            dy = nn.conv3_backward(params, cache, dy, grads,
                                   need_dx=need_input_grad or not last)
        elif kind == "tconv":
            dy = nn.tconv3_backward(params, cache, dy, grads)
    return dy


def compress_forward(params: nn.Params, slat: SLat,
                     grid_resolution: int = GRID_RESOLUTION,
                     embed_resolution: int = EMBED_RESOLUTION):
    if slat.grid.resolution != grid_resolution:
        raise ConfigError(
            f"compressor expects an N={grid_resolution} grid, got {slat.grid.resolution}")
    dense = densify(slat, grid_resolution)
    w, caches = _run_layers(params, _compressor_layers(embed_resolution), dense)
    return U3dgsLatent(w), (caches, slat.grid)


def compress(slat: SLat, params: nn.Params, **kw) -> U3dgsLatent:
    w, _ = compress_forward(params, slat, **kw)
    return w


def compress_backward(params: nn.Params, cache, dw: np.ndarray,
                      grads: nn.Params,
                      need_input_grad: bool = True) -> np.ndarray | None:
    """Returns the gradient w.r.t. the sparse input latents, (L, C)."""
    caches, grid = cache
    ddense = _run_layers_backward(params, caches, dw, grads, need_input_grad)
    if not need_input_grad:
        return None
    x, y, z = grid.coords.T
    return ddense[:, x, y, z].T


def decompress_forward(params: nn.Params, w: U3dgsLatent,
                       embed_resolution: int = EMBED_RESOLUTION):
    # embed_resolution picks the layer architecture; actual tensor sizes
    # follow the input, so the same stack runs on gradcheck-sized latents.
    if w.values.shape[0] != EMBED_CHANNELS:
        raise ConfigError(
            f"decompressor expects C'={EMBED_CHANNELS} channels, got {w.values.shape[0]}")
    out, caches = _run_layers(params, _decompressor_layers(embed_resolution), w.values)
    dense = DenseLatent(out[:LATENT_CHANNELS], out[LATENT_CHANNELS])
    return dense, caches


def decompress(w: U3dgsLatent, params: nn.Params, **kw) -> DenseLatent:
    dense, _ = decompress_forward(params, w, **kw)
    return dense


def decompress_backward(params: nn.Params, caches, dvalues: np.ndarray,
                        docc: np.ndarray, grads: nn.Params) -> np.ndarray:
    dout = np.concatenate([dvalues, docc[None]], axis=0)
    return _run_layers_backward(params, caches, dout, grads)


# ---------------------------------------------------------------------------
# naive compression baseline (max-pool down, trilinear up; no learning)


def naive_compress(slat: SLat, embed_resolution: int,
                   grid_resolution: int = GRID_RESOLUTION):
    dense = densify(slat, grid_resolution)
    occ = occupancy_mask(slat.grid, grid_resolution).astype(np.float64)
    f = grid_resolution // embed_resolution
    c = dense.shape[0]
    d = embed_resolution
    pooled = dense.reshape(c, d, f, d, f, d, f).max(axis=(2, 4, 6))
    pooled_occ = occ.reshape(d, f, d, f, d, f).max(axis=(1, 3, 5))
    return pooled, pooled_occ


def trilinear_upsample(vol: np.ndarray, factor: int) -> np.ndarray:
    """Channel-wise trilinear upsampling with align-corners-free sampling."""
    c, d = vol.shape[0], vol.shape[1]
    n = d * factor
    coords = (np.arange(n) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, d - 1)
    i1 = np.clip(i0 + 1, 0, d - 1)
    t = np.clip(coords - i0, 0.0, 1.0)

    def lerp_axis(v, axis):
        a = np.take(v, i0, axis=axis)
        b = np.take(v, i1, axis=axis)
        shape = [1] * v.ndim
        shape[axis] = n
        tt = t.reshape(shape)
        return a * (1 - tt) + b * tt

    out = vol
    for axis in (1, 2, 3):
        out = lerp_axis(out, axis)
    return out


def naive_reconstruct(slat: SLat, embed_resolution: int,
                      grid_resolution: int = GRID_RESOLUTION) -> DenseLatent:
    pooled, pooled_occ = naive_compress(slat, embed_resolution, grid_resolution)
    f = grid_resolution // embed_resolution
    values = trilinear_upsample(pooled, f)
    occ = trilinear_upsample(pooled_occ[None], f)[0]
    # map occupancy in [0,1] to logits so sparsify's 0.5 threshold applies
    logits = np.where(occ > 0.5, 10.0, -10.0)
    return DenseLatent(values, logits)


# ---------------------------------------------------------------------------
# losses


def compression_loss(dense: DenseLatent, target: SLat,
                     omega: float = DEFAULT_OMEGA, bce_weight: float = 1.0):
    """Masked MSE over the dense grid plus occupancy BCE.

    Occupied voxels contribute their full squared latent error; unoccupied
    voxels (target zero) are down-weighted by 1/omega. Returns
    ``(loss, d_values, d_occ_logits)`` with exact gradients.
    """
    n = dense.resolution
    n3 = n ** 3
    mask = occupancy_mask(target.grid, n)
    diff = dense.values.copy()
    x, y, z = target.grid.coords.T
    diff[:, x, y, z] -= target.values.T
    w = np.where(mask, 1.0, 1.0 / omega)
    sq = np.sum(diff * diff, axis=0)
    latent_term = float(np.sum(w * sq) / n3)

    logits = dense.occ_logits
    m = mask.astype(np.float64)
    # stable BCE with logits: max(x,0) - x*m + log1p(exp(-|x|))
    bce = np.maximum(logits, 0.0) - logits * m + np.log1p(np.exp(-np.abs(logits)))
    occ_term = float(bce.mean()) * bce_weight

    d_values = (2.0 / n3) * w[None] * diff
    d_occ = bce_weight * (nn.sigmoid(logits) - m) / n3
    return latent_term + occ_term, d_values, d_occ
