"""End-to-end orchestration: encode, decode, frame selection, ablations.

A checkpoint bundle is one flat parameter dict (encoder, Gaussian decoder,
compressor, decompressor, optional aux heads) plus the grid/bottleneck shape
metadata, persisted through the named-tensor checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, latent, nn
from .decoder import GaussianSet, decode
from .errors import ConfigError, InvalidInputError
from .features import extract_features
from .geometry import occlude, rot_to_quat, voxelize
from .render import Camera, image_metrics, render
from .sceneio import (CanonicalTransform, EmbeddingRecord, Frame,
                      ObjectObservation, canonicalize, unproject_masked_pixels)
from .training import PreparedObject, TrainConfig, prepare_object, train_phase2


@dataclass
class Checkpoints:
    params: nn.Params
    grid_resolution: int = latent.GRID_RESOLUTION
    embed_resolution: int = latent.EMBED_RESOLUTION
    embed_channels: int = latent.EMBED_CHANNELS
    feature_dim: int = 32

    def require(self, *prefixes: str) -> None:
        for prefix in prefixes:
            if not any(k.startswith(prefix) for k in self.params):
                raise ConfigError(f"checkpoint is missing {prefix}* parameters "
                                  "(untrained?)")

    def save(self, path) -> None:
        blob = dict(self.params)
        blob["meta.shape"] = np.array([
            self.grid_resolution, self.embed_resolution, self.embed_channels,
            self.feature_dim], dtype=np.float64)
        checkpoint.save_checkpoint(path, blob)

    @staticmethod
    def load(path) -> "Checkpoints":
        blob = checkpoint.load_checkpoint(path)
        meta = blob.pop("meta.shape", None)
        ck = Checkpoints(blob)
        if meta is not None:
            ck.grid_resolution = int(meta[0])
            ck.embed_resolution = int(meta[1])
            ck.embed_channels = int(meta[2])
            ck.feature_dim = int(meta[3])
        return ck


# ---------------------------------------------------------------------------
# encode / decode


def encode_object(obs: ObjectObservation, ckpt: Checkpoints,
                  extractor=extract_features, frames=None) -> EmbeddingRecord:
    """Voxelize, aggregate features, encode, and compress one object."""
    ckpt.require("enc.", "comp.")
    prepared = prepare_object(obs, ckpt.grid_resolution, extractor, frames)
    return encode_prepared(prepared, ckpt)


def encode_prepared(prepared: PreparedObject, ckpt: Checkpoints) -> EmbeddingRecord:
    ckpt.require("enc.", "comp.")
    slat = latent.encode_slat(prepared.feats, ckpt.params)
    w = latent.compress(slat, ckpt.params,
                        grid_resolution=ckpt.grid_resolution,
                        embed_resolution=ckpt.embed_resolution)
    payload = np.transpose(w.values, (1, 2, 3, 0)).astype(np.float32)
    return EmbeddingRecord(
        object_id=prepared.object_id,
        grid_resolution=ckpt.embed_resolution,
        channels=ckpt.embed_channels,
        payload=payload,
        canonical=prepared.canonical,
        attributes=list(prepared.attributes),
    )


def decode_object(rec: EmbeddingRecord, ckpt: Checkpoints) -> GaussianSet:
    """Decompress, re-sparsify, and decode to splats (empty set is legal)."""
    ckpt.require("decomp.", "dec.")
    if rec.grid_resolution != ckpt.embed_resolution or \
            rec.channels != ckpt.embed_channels:
        raise ConfigError(
            f"embedding is {rec.grid_resolution}^3 x {rec.channels} but the "
            f"checkpoint expects {ckpt.embed_resolution}^3 x {ckpt.embed_channels}")
    w = latent.U3dgsLatent(np.transpose(rec.payload.astype(np.float64),
                                        (3, 0, 1, 2)))
    dense = latent.decompress(w, ckpt.params,
                              embed_resolution=ckpt.embed_resolution)
    slat, _empty = latent.sparsify(dense)
    return decode(slat, ckpt.params, canonical=rec.canonical)


def reconstruct_slat_direct(prepared: PreparedObject,
                            ckpt: Checkpoints) -> GaussianSet:
    """Uncompressed route: encoder latents straight into the decoder."""
    ckpt.require("enc.", "dec.")
    slat = latent.encode_slat(prepared.feats, ckpt.params)
    return decode(slat, ckpt.params, canonical=prepared.canonical)


def encode_single_image(frame: Frame, object_id: int, ckpt: Checkpoints,
                        depth: np.ndarray | None = None,
                        extractor=extract_features) -> EmbeddingRecord:
    """Depth-lift one masked view to a point cloud and encode it.

    ``depth`` overrides the frame's own depth channel (externally supplied
    depth for RGB-only captures). Embeddings from different views of the same
    object differ: no canonical-pose estimation is attempted.
    """
    if depth is not None:
        frame = Frame(frame.image, np.asarray(depth, dtype=np.float64),
                      frame.mask, frame.intrinsics, frame.pose, frame.frame_id)
    if not np.any((frame.mask == object_id) & (frame.depth > 0)):
        raise InvalidInputError(
            f"object {object_id} has no masked pixels with valid depth")
    points = unproject_masked_pixels(frame, object_id)
    obs = ObjectObservation(object_id=object_id, frames=[frame.restricted_to(object_id)],
                            points=points, attributes=[],
                            canonical=canonicalize(points))
    return encode_object(obs, ckpt)


def occluded_observation(obs: ObjectObservation, d: float,
                         seed: int) -> ObjectObservation | None:
    """Copy of the observation with a spherical chunk of points removed.

    The source canonical frame is kept when present (the object's placement is
    unchanged by hiding part of it), so voxel grids stay aligned across
    occlusion levels. Returns None when nothing survives (legal for d near 1).
    """
    pts, _removed = occlude(obs.points, d, seed)
    if pts.shape[0] == 0:
        return None
    canonical = obs.canonical or canonicalize(pts)
    return ObjectObservation(obs.object_id, obs.frames, pts,
                             list(obs.attributes), canonical)


# ---------------------------------------------------------------------------
# frame selection


def kmeans(data: np.ndarray, k: int, seed: int = 0, restarts: int = 20,
           max_iter: int = 100):
    """Seeded Lloyd iterations with restarts; returns (labels, centers, cost)."""
    if k <= 0:
        raise InvalidInputError("k must be positive")
    n = data.shape[0]
    if k > n:
        raise InvalidInputError(f"k={k} exceeds {n} samples")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = data[rng.choice(n, size=k, replace=False)].copy()
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((data[:, None, :] - centers[None]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(k):
                sel = new_labels == c
                if np.any(sel):
                    centers[c] = data[sel].mean(axis=0)
                else:  # re-seed an empty cluster on the farthest point
                    far = d2.min(axis=1).argmax()
                    centers[c] = data[far]
                    new_labels[far] = c
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        cost = float(((data - centers[labels]) ** 2).sum())
        if best is None or cost < best[2]:
            best = (labels.copy(), centers.copy(), cost)
    return best


def pose_features(frames: list) -> np.ndarray:
    """Camera position plus half-weighted, sign-aligned orientation quaternion."""
    rows = []
    for f in frames:
        q = rot_to_quat(f.pose[:3, :3])
        rows.append(np.concatenate([f.pose[:3, 3], 0.5 * q]))
    return np.stack(rows)


def select_frames(frames: list, k: int, seed: int = 0) -> list:
    """Cluster camera extrinsics; keep each cluster's most-visible frame."""
    if k <= 0:
        raise InvalidInputError("k must be positive")
    if not frames:
        raise InvalidInputError("no frames to select from")
    if len(frames) <= k:
        return list(frames)
    labels, _, _ = kmeans(pose_features(frames), k, seed)
    chosen = []
    for c in range(k):
        members = [i for i in range(len(frames)) if labels[i] == c]
        if not members:
            continue
        visible = [int(np.count_nonzero(frames[i].mask)) for i in members]
        chosen.append(members[int(np.argmax(visible))])
    return [frames[i] for i in sorted(set(chosen))]


# ---------------------------------------------------------------------------
# evaluation helpers and the resolution ablation


@dataclass
class ObjectBundle:
    """Training views (prepared) plus held-out views for evaluation."""

    prepared: PreparedObject
    eval_cameras: list = field(default_factory=list)
    eval_images: list = field(default_factory=list)
    eval_masks: list = field(default_factory=list)


def split_object(obs: ObjectObservation, k_train: int,
                 resolution: int = latent.GRID_RESOLUTION,
                 extractor=extract_features, seed: int = 0) -> ObjectBundle:
    train = select_frames(obs.frames, k_train, seed)
    train_ids = {id(f) for f in train}
    held = [f for f in obs.frames if id(f) not in train_ids]
    prepared = prepare_object(obs, resolution, extractor, frames=train)
    return ObjectBundle(
        prepared=prepared,
        eval_cameras=[Camera.from_frame(f) for f in held],
        eval_images=[f.image for f in held],
        eval_masks=[f.mask == obs.object_id for f in held],
    )


def evaluate_views(gauss: GaussianSet, cameras: list, images: list,
                   masks: list) -> dict:
    """Masked PSNR/SSIM averaged over views."""
    if not cameras:
        raise InvalidInputError("no views to evaluate")
    psnr, ssim = [], []
    for cam, img, mask in zip(cameras, images, masks):
        target = render(gauss, cam)
        m = image_metrics(target.color, img, mask)
        psnr.append(m["psnr"])
        ssim.append(m["ssim"])
    return {"psnr": float(np.mean(psnr)), "ssim": float(np.mean(ssim))}


def _bundle_views(bundle: ObjectBundle, held_out: bool):
    if held_out and bundle.eval_cameras:
        return bundle.eval_cameras, bundle.eval_images, bundle.eval_masks
    p = bundle.prepared
    return p.cameras, p.images, p.masks


def evaluate_compression(bundles: list, phase1_params: nn.Params,
                         comp_params: nn.Params | None, mode: str,
                         embed_resolution: int, held_out: bool = True) -> dict:
    """Decode-from-embedding quality for one (resolution, mode) cell."""
    psnr, ssim = [], []
    for bundle in bundles:
        prepared = bundle.prepared
        slat = latent.encode_slat(prepared.feats, phase1_params)
        if mode == "identity":
            recon = slat
        elif mode == "naive":
            dense = latent.naive_reconstruct(slat, embed_resolution,
                                             prepared.grid.resolution)
            recon, _ = latent.sparsify(dense)
        elif mode == "learned":
            w = latent.compress(slat, comp_params,
                                grid_resolution=prepared.grid.resolution,
                                embed_resolution=embed_resolution)
            dense = latent.decompress(w, comp_params,
                                      embed_resolution=embed_resolution)
            recon, _ = latent.sparsify(dense)
        else:
            raise ConfigError(f"unknown compression mode {mode!r}")
        gauss = decode(recon, phase1_params, canonical=prepared.canonical)
        cams, imgs, msks = _bundle_views(bundle, held_out)
        if len(gauss) == 0:
            psnr.append(0.0)
            ssim.append(0.0)
            continue
        m = evaluate_views(gauss, cams, imgs, msks)
        psnr.append(m["psnr"])
        ssim.append(m["ssim"])
    return {"psnr": float(np.mean(psnr)), "ssim": float(np.mean(ssim))}


def ablate_resolution(bundles: list, phase1_params: nn.Params,
                      resolutions=(32, 16, 8), modes=("naive", "learned"),
                      train_config: TrainConfig | None = None,
                      held_out: bool = True) -> dict:
    """Compression quality grid over bottleneck resolutions and modes.

    Resolution 64 rows report the identity (uncompressed SLat) path. Learned
    cells train their own compressor from the frozen phase-1 encoder.
    """
    for mode in modes:
        if mode not in ("naive", "learned"):
            raise ConfigError(f"unknown ablation mode {mode!r}")
    rows = []
    prepared = [b.prepared for b in bundles]
    for res in resolutions:
        if res == latent.GRID_RESOLUTION:
            m = evaluate_compression(bundles, phase1_params, None, "identity",
                                     res, held_out)
            rows.append({"resolution": res, "mode": "identity", **m})
            continue
        for mode in modes:
            cparams = None
            if mode == "learned":
                cfg = train_config or TrainConfig.phase2(iterations=400)
                cparams, _ = train_phase2(prepared, phase1_params, cfg,
                                          embed_resolution=res)
            m = evaluate_compression(bundles, phase1_params, cparams, mode,
                                     res, held_out)
            rows.append({"resolution": res, "mode": mode, **m})
    return {"rows": rows}
