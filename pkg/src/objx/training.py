"""Phase-structured optimization.

Phase 1 fits the SLat encoder and the Gaussian decoder under the rendering
loss. Phase 2 freezes them and fits the compressor/decompressor under the
masked MSE plus occupancy BCE. Auxiliary training (stage A frozen core,
stage B joint) lives here too, with the task heads defined in tasks.py.

Each optimization step processes all views of a single object; objects
rotate deterministically, so single-threaded runs are bitwise reproducible
for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import latent, nn, tasks
from .decoder import decode_backward, decode_forward, init_gs_decoder
from .errors import InvalidInputError, TrainingDiverged
from .features import FEATURE_DIM, SparseFeatures, aggregate, extract_features
from .geometry import VoxelGrid, voxelize
from .render import Camera, photometric_loss, render_backward, render_forward
from .sceneio import CanonicalTransform, ObjectObservation, canonicalize


@dataclass
class TrainConfig:
    phase: str = "phase1"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    grad_clip: float = 0.01        # global-norm threshold; 0 disables
    iterations: int = 2000
    seed: int = 0
    lam: float = 0.8               # photometric L1 weight
    omega: float = latent.DEFAULT_OMEGA
    lambda_recon: float = 1.0
    eval_every: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.grad_clip < 0:
            raise InvalidInputError("grad_clip must be >= 0")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")

    @staticmethod
    def phase1(**kw) -> "TrainConfig":
        return replace(TrainConfig(phase="phase1", learning_rate=1e-4,
                                   grad_clip=0.01), **kw)

    @staticmethod
    def phase2(**kw) -> "TrainConfig":
        # no clipping here: the convolutional stack trains stably without it
        return replace(TrainConfig(phase="phase2", learning_rate=1e-3,
                                   grad_clip=0.0), **kw)

    @staticmethod
    def auxiliary(joint: bool = False, **kw) -> "TrainConfig":
        lr = 1e-4 if joint else 1e-3
        return replace(TrainConfig(phase="aux_joint" if joint else "aux_frozen",
                                   learning_rate=lr, grad_clip=0.0), **kw)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(path) -> "TrainConfig":
        with open(path) as fh:
            return TrainConfig(**json.load(fh))


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PreparedObject:
    """Static per-object training inputs: voxels, features, views."""

    object_id: int
    canonical: CanonicalTransform
    grid: VoxelGrid
    feats: SparseFeatures
    cameras: list
    images: list
    masks: list
    attributes: list = field(default_factory=list)


def prepare_object(obs: ObjectObservation, resolution: int = latent.GRID_RESOLUTION,
                   extractor=extract_features, frames=None) -> PreparedObject:
    frames = obs.frames if frames is None else frames
    if not frames:
        raise InvalidInputError(f"object {obs.object_id} has no frames")
    canonical = obs.canonical or canonicalize(obs.points)
    grid = voxelize(canonical.to_canonical(obs.points), resolution)
    maps = [extractor(f, obs.object_id) for f in frames]
    feats = aggregate(grid, frames, maps, canonical)
    return PreparedObject(
        object_id=obs.object_id,
        canonical=canonical,
        grid=grid,
        feats=feats,
        cameras=[Camera.from_frame(f) for f in frames],
        images=[f.image for f in frames],
        masks=[f.mask == obs.object_id for f in frames],
        attributes=list(obs.attributes),
    )


def _as_prepared(dataset) -> list:
    out = []
    for item in dataset:
        out.append(item if isinstance(item, PreparedObject) else prepare_object(item))
    return out


# ---------------------------------------------------------------------------
# phase 1: encoder + Gaussian decoder under the rendering loss


def _render_loss_and_grads(params, obj: PreparedObject, lam: float, grads):
    """Full forward/backward for one object over all its views."""
    slat, enc_cache = latent.encode_slat_forward(params, obj.feats)
    gauss, dec_cache = decode_forward(params, slat, canonical=obj.canonical)
    n_views = len(obj.cameras)
    n_g = len(gauss)
    acc = dict(positions=np.zeros((n_g, 3)), scales=np.zeros((n_g, 3)),
               rotations=np.zeros((n_g, 4)), opacities=np.zeros(n_g),
               colors=np.zeros((n_g, 3)))
    total = 0.0
    psnrs = []
    for cam, img, mask in zip(obj.cameras, obj.images, obj.masks):
        target, rcache = render_forward(gauss, cam)
        loss, dpred = photometric_loss(target.color, img, mask, lam)
        total += loss / n_views
        g = render_backward(gauss, cam, dpred / n_views, cache=rcache)
        for key in acc:
            acc[key] += g[key]
        mse = float(((target.color - img)[mask] ** 2).mean())
        psnrs.append(99.0 if mse <= 1e-12 else -10.0 * np.log10(mse))
    # world-space position/scale gradients back to canonical units
    acc["positions"] *= obj.canonical.scale
    acc["scales"] *= obj.canonical.scale
    dz = decode_backward(params, dec_cache, acc, grads)
    latent.encode_slat_backward(params, enc_cache, dz, grads)
    return total, float(np.mean(psnrs))


def train_phase1(dataset, config: TrainConfig | None = None,
                 initial_params: nn.Params | None = None):
    """Fit encoder + decoder; returns ``(params, history)``.

    History rows are ``(iteration, loss, mean masked train PSNR)`` for the
    object visited at that step.
    """
    config = config or TrainConfig.phase1()
    config.validate()
    objects = _as_prepared(dataset)
    if not objects:
        raise InvalidInputError("empty dataset")
    feat_dim = objects[0].feats.values.shape[1]
    if initial_params is not None:
        params = {k: v.copy() for k, v in initial_params.items()}
    else:
        rng = np.random.default_rng(config.seed)
        params = {}
        latent.init_slat_encoder(rng, params, feature_dim=feat_dim)
        init_gs_decoder(rng, params)
    opt = nn.AdamW(params, lr=config.learning_rate,
                   weight_decay=config.weight_decay)
    history = []
    for it in range(config.iterations):
        obj = objects[it % len(objects)]
        grads: nn.Params = {}
        try:
            loss, psnr = _render_loss_and_grads(params, obj, config.lam, grads)
        except InvalidInputError as exc:
            raise TrainingDiverged(it, float("nan"),
                                   f"object {obj.object_id}: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss, f"object {obj.object_id}")
        if config.grad_clip > 0:
            nn.clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        history.append((it, loss, psnr))
    return params, history


# ---------------------------------------------------------------------------
# phase 2: compressor under the masked MSE with frozen phase-1 encoder


def encode_dataset_slats(params: nn.Params, objects: list) -> list:
    return [latent.encode_slat(obj.feats, params) for obj in objects]


def masked_mse(dense: latent.DenseLatent, target: latent.SLat) -> float:
    """Mean squared latent error over occupied voxels only (evaluation aid)."""
    x, y, z = target.grid.coords.T
    diff = dense.values[:, x, y, z].T - target.values
    return float((diff ** 2).sum(axis=1).mean()) if len(target) else 0.0


def train_phase2(dataset, phase1_params: nn.Params,
                 config: TrainConfig | None = None,
                 embed_resolution: int = latent.EMBED_RESOLUTION):
    """Fit the compressor/decompressor; returns ``(params, history)``.

    The phase-1 parameters are read-only here; SLat targets are produced once
    from the frozen encoder. History rows are ``(iteration, loss)`` plus
    ``(iteration, eval_mse)`` snapshots every ``eval_every`` steps.
    """
    config = config or TrainConfig.phase2()
    config.validate()
    objects = _as_prepared(dataset)
    slats = encode_dataset_slats(phase1_params, objects)
    rng = np.random.default_rng(config.seed)
    params: nn.Params = {}
    latent.init_compressor(rng, params, embed_resolution=embed_resolution)
    opt = nn.AdamW(params, lr=config.learning_rate,
                   weight_decay=config.weight_decay)
    history = {"loss": [], "eval_mse": []}
    for it in range(config.iterations):
        slat = slats[it % len(slats)]
        grads: nn.Params = {}
        w, ccache = latent.compress_forward(
            params, slat, grid_resolution=slat.grid.resolution,
            embed_resolution=embed_resolution)
        dense, dcache = latent.decompress_forward(params, w, embed_resolution)
        loss, dval, docc = latent.compression_loss(dense, slat, config.omega)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        dw = latent.decompress_backward(params, dcache, dval, docc, grads)
        latent.compress_backward(params, ccache, dw, grads, need_input_grad=False)
        if config.grad_clip > 0:
            nn.clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        history["loss"].append((it, loss))
        if config.eval_every and (it + 1) % config.eval_every == 0:
            mses = []
            for s in slats:
                wv = latent.compress(s, params, grid_resolution=s.grid.resolution,
                                     embed_resolution=embed_resolution)
                dn = latent.decompress(wv, params, embed_resolution=embed_resolution)
                mses.append(masked_mse(dn, s))
            history["eval_mse"].append((it, float(np.mean(mses))))
    return params, history


# ---------------------------------------------------------------------------
# auxiliary-task training


def train_auxiliary(aux_data: "tasks.AuxDataset", core_params: nn.Params,
                    config: TrainConfig | None = None, joint: bool = False,
                    embed_resolution: int = latent.EMBED_RESOLUTION):
    """Train the attribute/patch encoders against the task loss.

    Stage A (``joint=False``) keeps the core frozen and returns only aux
    parameters. Stage B (``joint=True``) also updates the compressor and
    decompressor under task + lambda_recon * reconstruction; the SLat
    encoder's latents act as fixed targets. Returns ``(params, history)``
    where params holds aux heads plus (stage B) the updated core copies.
    """
    config = config or TrainConfig.auxiliary(joint=joint)
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: nn.Params = {}
    tasks.init_aux_heads(rng, params)
    core = core_params if not joint else {
        k: v.copy() for k, v in core_params.items()
        if k.startswith(("comp.", "decomp."))}
    if joint:
        params.update(core)
    opt = nn.AdamW(params, lr=config.learning_rate,
                   weight_decay=config.weight_decay)

    slats = aux_data.slats
    frozen_w = None
    if not joint:
        frozen_w = [latent.compress(s, core_params,
                                    grid_resolution=s.grid.resolution,
                                    embed_resolution=embed_resolution)
                    for s in slats]
    history = []
    n_samples = len(aux_data.samples)
    for it in range(config.iterations):
        sample = aux_data.samples[it % n_samples]
        grads: nn.Params = {}
        if joint:
            ws, ccaches = [], []
            for s in slats:
                w, cc = latent.compress_forward(
                    params, s, grid_resolution=s.grid.resolution,
                    embed_resolution=embed_resolution)
                ws.append(w)
                ccaches.append(cc)
        else:
            ws = frozen_w
        obj_vecs, ov_caches = tasks.object_vectors_forward(
            params, ws, aux_data.attributes)
        task_loss, d_obj, d_patch_vec, p_cache = tasks.task_loss_forward(
            params, sample, obj_vecs)
        loss = task_loss
        dws = tasks.object_vectors_backward(params, ov_caches, d_obj, grads)
        tasks.patch_encoder_backward(params, p_cache, d_patch_vec, grads)

        if joint:
            for i, (w, s) in enumerate(zip(ws, slats)):
                dense, dcache = latent.decompress_forward(params, w, embed_resolution)
                if config.lambda_recon > 0:
                    rec, dval, docc = latent.compression_loss(dense, s, config.omega)
                    loss += config.lambda_recon * rec / len(slats)
                    scale = config.lambda_recon / len(slats)
                    dw_rec = latent.decompress_backward(
                        params, dcache, dval * scale, docc * scale, grads)
                    dws[i] = dws[i] + dw_rec
                latent.compress_backward(params, ccaches[i], dws[i], grads)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        if config.grad_clip > 0:
            nn.clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        history.append((it, loss, task_loss))
    return params, history
