"""Downstream evaluation heads: localization via patch voting, 3D alignment.

Per-object task vectors concatenate a learned projection of the pooled
fixed-size latent with a bag-of-tokens attribute feature, L2-normalized.
Query-image patches are embedded into the same space by a small MLP and
matched by cosine similarity; scene scores aggregate the per-patch best
object similarity.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, InvalidInputError
from .features import FEATURE_DIM, dense_descriptors
from .latent import SLat, U3dgsLatent
from .sceneio import DEFAULT_MAX_POINTS, load_frames, observations_from_frames

POOL_DIM = 64
ATTR_DIM = 32
ATTR_BUCKETS = 64
TASK_DIM = POOL_DIM + ATTR_DIM
TEMPERATURE = 0.07

INDEX_MAGIC = b"OBJI"
INDEX_VERSION = 1


# ---------------------------------------------------------------------------
# aux heads: pooling projection, attribute encoder, patch encoder


def init_aux_heads(rng: np.random.Generator, params: nn.Params,
                   channels: int = 8, feature_dim: int = FEATURE_DIM) -> None:
    nn.init_linear(rng, params, "aux.pool", POOL_DIM, 2 * channels)
    params["aux.attr"] = rng.normal(size=(ATTR_BUCKETS, ATTR_DIM)) * 0.1
    nn.init_mlp(rng, params, "aux.patch", feature_dim, 64, TASK_DIM)


def _attr_bucket(token: str) -> int:
    digest = hashlib.md5(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % ATTR_BUCKETS


def attr_forward(params: nn.Params, tokens: list):
    """Mean-pooled bag-of-tokens embedding; empty lists map to zero."""
    table = params["aux.attr"]
    buckets = [_attr_bucket(t) for t in tokens]
    if not buckets:
        return np.zeros(table.shape[1]), buckets
    return table[buckets].mean(axis=0), buckets


def attr_backward(params: nn.Params, buckets: list, dvec: np.ndarray,
                  grads: nn.Params) -> None:
    if not buckets:
        return
    g = grads.setdefault("aux.attr", np.zeros_like(params["aux.attr"]))
    for b in buckets:
        g[b] += dvec / len(buckets)


def pool_forward(params: nn.Params, w: U3dgsLatent):
    """Channelwise mean + max over the latent grid, then a learned projection."""
    flat = w.values.reshape(w.values.shape[0], -1)
    mean = flat.mean(axis=1)
    argmax = flat.argmax(axis=1)
    mx = flat[np.arange(flat.shape[0]), argmax]
    feats = np.concatenate([mean, mx])
    vec, lin_cache = nn.linear_forward(params, "aux.pool", feats[None, :])
    return vec[0], (lin_cache, argmax, w.values.shape)


def pool_backward(params: nn.Params, cache, dvec: np.ndarray,
                  grads: nn.Params) -> np.ndarray:
    lin_cache, argmax, w_shape = cache
    dfeats = nn.linear_backward(params, lin_cache, dvec[None, :], grads)[0]
    c = w_shape[0]
    n3 = int(np.prod(w_shape[1:]))
    dflat = np.zeros((c, n3))
    dflat += dfeats[:c, None] / n3
    dflat[np.arange(c), argmax] += dfeats[c:]
    return dflat.reshape(w_shape)


def _normalize_rows(x: np.ndarray):
    nrm = np.linalg.norm(x, axis=-1, keepdims=True)
    nrm = np.maximum(nrm, 1e-12)
    return x / nrm, nrm


def _normalize_rows_backward(y: np.ndarray, nrm: np.ndarray,
                             dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / nrm


def object_vectors_forward(params: nn.Params, ws: list, attributes: list):
    """Unit task vectors, one per object: [pooled latent proj | attr feature]."""
    vecs = []
    caches = []
    for w, attrs in zip(ws, attributes):
        pv, p_cache = pool_forward(params, w)
        av, buckets = attr_forward(params, attrs)
        raw = np.concatenate([pv, av])
        vecs.append(raw)
        caches.append((p_cache, buckets))
    raw = np.stack(vecs)
    unit, nrm = _normalize_rows(raw)
    return unit, (caches, unit, nrm)


def object_vectors_backward(params: nn.Params, cache, d_unit: np.ndarray,
                            grads: nn.Params) -> list:
    caches, unit, nrm = cache
    d_raw = _normalize_rows_backward(unit, nrm, d_unit)
    dws = []
    for i, (p_cache, buckets) in enumerate(caches):
        dws.append(pool_backward(params, p_cache, d_raw[i, :POOL_DIM], grads))
        attr_backward(params, buckets, d_raw[i, POOL_DIM:], grads)
    return dws


def patch_encoder_forward(params: nn.Params, patch_feats: np.ndarray):
    raw, mlp_cache = nn.mlp_forward(params, "aux.patch", patch_feats)
    unit, nrm = _normalize_rows(raw)
    return unit, (mlp_cache, unit, nrm)


def patch_encoder_backward(params: nn.Params, cache, d_unit: np.ndarray,
                           grads: nn.Params) -> None:
    mlp_cache, unit, nrm = cache
    d_raw = _normalize_rows_backward(unit, nrm, d_unit)
    nn.mlp_backward(params, mlp_cache, d_raw, grads)


# ---------------------------------------------------------------------------
# contrastive task loss


@dataclass
class AuxSample:
    """Patches of one query image with their ground-truth object indices."""

    patch_feats: np.ndarray   # (P, feature_dim)
    object_index: np.ndarray  # (P,) int; -1 marks background patches


@dataclass
class AuxDataset:
    slats: list               # per-object SLat (frozen encoder outputs)
    attributes: list          # per-object token lists
    samples: list             # AuxSample


def contrastive_loss(patch_vecs: np.ndarray, obj_vecs: np.ndarray,
                     assign: np.ndarray, temperature: float = TEMPERATURE):
    """Symmetric normalized-temperature cross-entropy over patch-object pairs.

    Returns ``(loss, d_patch_vecs, d_obj_vecs)``; background patches (-1)
    participate only as column negatives.
    """
    valid = assign >= 0
    if not np.any(valid):
        raise InvalidInputError("no foreground patches in contrastive batch")
    logits = patch_vecs @ obj_vecs.T / temperature     # (P, O)
    n = int(valid.sum())

    # patch -> object direction
    lmax = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - lmax)
    row_sm = exp / exp.sum(axis=1, keepdims=True)
    idx = np.nonzero(valid)[0]
    tgt = assign[idx]
    row_loss = -np.log(np.maximum(row_sm[idx, tgt], 1e-300)).mean()

    # object -> patch direction, one column per valid pair
    cmax = logits.max(axis=0, keepdims=True)
    cexp = np.exp(logits - cmax)
    col_sm = cexp / cexp.sum(axis=0, keepdims=True)
    col_loss = -np.log(np.maximum(col_sm[idx, tgt], 1e-300)).mean()

    loss = 0.5 * (row_loss + col_loss)

    d_logits = np.zeros_like(logits)
    d_logits[idx] += row_sm[idx] / (2 * n)
    np.add.at(d_logits, (idx, tgt), -1.0 / (2 * n))
    col_counts = np.bincount(tgt, minlength=obj_vecs.shape[0]).astype(np.float64)
    d_logits += col_sm * col_counts[None, :] / (2 * n)
    np.add.at(d_logits, (idx, tgt), -1.0 / (2 * n))

    d_patch = d_logits @ obj_vecs / temperature
    d_obj = d_logits.T @ patch_vecs / temperature
    return float(loss), d_patch, d_obj


def task_loss_forward(params: nn.Params, sample: AuxSample,
                      obj_vecs: np.ndarray):
    patch_vecs, p_cache = patch_encoder_forward(params, sample.patch_feats)
    loss, d_patch, d_obj = contrastive_loss(patch_vecs, obj_vecs,
                                            sample.object_index)
    return loss, d_obj, d_patch, p_cache


# ---------------------------------------------------------------------------
# scene index and localization


@dataclass
class SceneIndex:
    scene_id: str
    object_ids: list
    vectors: np.ndarray  # (O, TASK_DIM), unit rows

    def validate(self) -> None:
        nrm = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(nrm, 1.0, atol=1e-6):
            raise InvalidInputError("index vectors must be unit norm")


@dataclass
class QueryPatches:
    vectors: np.ndarray  # (P, TASK_DIM), unit rows
    grid_shape: tuple = ()


def encode_query_patches(params: nn.Params, image: np.ndarray) -> QueryPatches:
    fmap = dense_descriptors(image)
    feats = fmap.data.reshape(-1, fmap.data.shape[2])
    unit, _ = patch_encoder_forward(params, feats)
    return QueryPatches(unit, fmap.data.shape[:2])


def patch_assignments(frame, id_order: list, stride: int = 8,
                      min_fraction: float = 0.0) -> np.ndarray:
    """Dominant instance per descriptor cell, mapped to indices in id_order.

    Cells whose dominant object covers less than ``min_fraction`` of the cell
    stay background (-1); useful to keep heavily mixed boundary cells out of
    contrastive training batches.
    """
    h, w = frame.mask.shape
    hc = (h + stride - 1) // stride
    wc = (w + stride - 1) // stride
    lookup = {oid: i for i, oid in enumerate(id_order)}
    out = np.full(hc * wc, -1, dtype=np.int64)
    for r in range(hc):
        for c in range(wc):
            block = frame.mask[r * stride:(r + 1) * stride,
                               c * stride:(c + 1) * stride]
            ids, counts = np.unique(block[block > 0], return_counts=True)
            if ids.size and counts.max() >= min_fraction * block.size:
                oid = int(ids[np.argmax(counts)])
                out[r * wc + c] = lookup.get(oid, -1)
    return out


def localize(query: QueryPatches, candidates: list, top_k: int | None = None,
             rule: str = "mean_max"):
    """Rank candidate scenes by aggregated patch-object cosine similarity.

    ``mean_max`` scores a scene by the mean over patches of the best object
    similarity; ``topk_mean`` averages only the top 25% of patch scores.
    Ties break on scene_id.
    """
    if not candidates:
        raise InvalidInputError("empty candidate index list")
    scored = []
    for index in candidates:
        sims = query.vectors @ index.vectors.T
        best = sims.max(axis=1)
        if rule == "mean_max":
            score = float(best.mean())
        elif rule == "topk_mean":
            k = max(1, best.size // 4)
            score = float(np.sort(best)[-k:].mean())
        else:
            raise InvalidInputError(f"unknown voting rule {rule!r}")
        scored.append((index.scene_id, score))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_k] if top_k else scored


def recall_at_k(rankings: list, ground_truth: list, k: int) -> float:
    """Percentage of queries whose true scene ranks in the top k."""
    if len(rankings) != len(ground_truth):
        raise InvalidInputError("rankings and ground truth differ in length")
    hits = sum(1 for ranked, gt in zip(rankings, ground_truth)
               if gt in [sid for sid, _ in ranked[:k]])
    return 100.0 * hits / len(rankings)


# ---------------------------------------------------------------------------
# scene alignment


def align(src: SceneIndex, dst: SceneIndex, gt_matches: dict | None = None):
    """Rank dst objects per src object by cosine similarity.

    ``gt_matches`` maps src object_id to dst object_id; identical ids match
    by default. Objects without a counterpart are excluded (and reported).
    Returns ``(per_object_rankings, metrics, excluded)`` with MRR and
    Hits@1..5 over the evaluated objects.
    """
    if gt_matches is None:
        shared = set(src.object_ids) & set(dst.object_ids)
        gt_matches = {oid: oid for oid in shared}
    rankings = {}
    ranks = []
    excluded = []
    dst_ids = list(dst.object_ids)
    for i, oid in enumerate(src.object_ids):
        true = gt_matches.get(oid)
        if true is None or true not in dst_ids:
            excluded.append(oid)
            continue
        sims = dst.vectors @ src.vectors[i]
        order = np.lexsort((dst_ids, -sims))
        ranked_ids = [dst_ids[j] for j in order]
        rankings[oid] = ranked_ids
        ranks.append(1 + ranked_ids.index(true))
    if not ranks:
        raise InvalidInputError("no objects with ground-truth counterparts")
    ranks = np.asarray(ranks, dtype=np.float64)
    metrics = {"mrr": float((1.0 / ranks).mean())}
    for k in range(1, 6):
        metrics[f"hits@{k}"] = float((ranks <= k).mean())
    return rankings, metrics, excluded


# ---------------------------------------------------------------------------
# sub-scene construction


@dataclass
class SubScene:
    frame_range: tuple
    frames: list
    observations: list = field(default_factory=list)


def make_subscenes(scene_dir, window: int, stride: int,
                   max_points: int = DEFAULT_MAX_POINTS) -> list:
    """Overlapping frame windows, each fused into its own observations.

    Sub-scene points come from the window's own depth maps only, so two
    windows of one scene really are independent partial reconstructions.
    """
    frames, attr_map, _points = load_frames(scene_dir)
    if window > len(frames):
        raise InvalidInputError(
            f"window {window} exceeds frame count {len(frames)}")
    if stride <= 0:
        raise InvalidInputError("stride must be positive")
    subs = []
    for start in range(0, len(frames) - window + 1, stride):
        chunk = frames[start:start + window]
        obs = observations_from_frames(chunk, attr_map, None, max_points)
        subs.append(SubScene((start, start + window), chunk, obs))
    return subs


def subscene_overlap(a: SubScene, b: SubScene, cell: float = 0.02) -> float:
    """Shared-object volume ratio: intersection over union of voxelized points."""
    ids_a = {o.object_id: o for o in a.observations}
    ids_b = {o.object_id: o for o in b.observations}
    shared = sorted(set(ids_a) & set(ids_b))
    inter = 0
    union = 0
    for oid in shared:
        ka = {tuple(k) for k in np.floor(ids_a[oid].points / cell).astype(np.int64)}
        kb = {tuple(k) for k in np.floor(ids_b[oid].points / cell).astype(np.int64)}
        inter += len(ka & kb)
        union += len(ka | kb)
    return inter / union if union else 0.0


# ---------------------------------------------------------------------------
# index persistence: binary vectors + JSON id map


def save_index(index: SceneIndex, prefix) -> None:
    prefix = Path(prefix)
    vecs = np.ascontiguousarray(index.vectors, dtype="<f4")
    blob = bytearray()
    blob += INDEX_MAGIC
    blob += struct.pack("<BIH", INDEX_VERSION, vecs.shape[0], vecs.shape[1])
    blob += vecs.tobytes()
    prefix.with_suffix(".vec").write_bytes(bytes(blob))
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump({"scene_id": index.scene_id,
                   "object_ids": list(map(int, index.object_ids))}, fh)


def load_index(prefix) -> SceneIndex:
    prefix = Path(prefix)
    blob = prefix.with_suffix(".vec").read_bytes()
    if blob[:4] != INDEX_MAGIC:
        raise FormatError(f"{prefix}: bad index magic")
    version, count, dim = struct.unpack_from("<BIH", blob, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"{prefix}: unsupported index version {version}")
    off = 4 + struct.calcsize("<BIH")
    vecs = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    vecs = vecs.reshape(count, dim).astype(np.float64)
    with open(prefix.with_suffix(".json")) as fh:
        meta = json.load(fh)
    return SceneIndex(meta["scene_id"], meta["object_ids"], vecs)
