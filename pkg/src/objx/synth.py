"""Synthetic desk-scale scene generator.

Scenes are built from spheres, axis-aligned boxes, and textured rectangles.
Color, depth, and mask images are ray-traced from the same primitives, so a
masked pixel always carries the depth of the surface that produced the mask.
Albedo is view-independent (no shading): textures are smooth low-frequency
color fields, which keeps them representable by voxel-level splats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .sceneio import Frame, write_frame_files


# ---------------------------------------------------------------------------
# textures


@dataclass
class SmoothTexture:
    """Linear color field plus one low-frequency cosine, clipped to [0.02, 0.98]."""

    base: np.ndarray                   # (3,)
    gradient: np.ndarray               # (3, 3): d(color)/d(local position)
    cosine_axis: np.ndarray | None = None   # (3,) spatial frequency, cycles/unit
    cosine_color: np.ndarray | None = None  # (3,) amplitude per channel

    def sample(self, local: np.ndarray) -> np.ndarray:
        c = self.base[None, :] + local @ self.gradient.T
        if self.cosine_axis is not None:
            phase = local @ self.cosine_axis
            c = c + np.cos(2.0 * np.pi * phase)[:, None] * self.cosine_color[None, :]
        return np.clip(c, 0.02, 0.98)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: SmoothTexture

    def intersect(self, origins, dirs):
        oc = origins - self.center
        a = np.sum(dirs * dirs, axis=1)
        b = 2.0 * np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-6, t0, t1)
        hit &= t > 1e-6
        return np.where(hit, t, np.inf)

    def local(self, points):
        return (points - self.center) / self.radius

    def color(self, points):
        return self.texture.sample(self.local(points))

    def sample_surface(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v

    def extent(self) -> float:
        return 2.0 * self.radius


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    texture: SmoothTexture

    def intersect(self, origins, dirs):
        lo = self.center - self.half_extents
        hi = self.center + self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origins) * inv
            t2 = (hi - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-6)
        t = np.where(tmin > 1e-6, tmin, tmax)
        hit &= t > 1e-6
        return np.where(hit, t, np.inf)

    def local(self, points):
        return (points - self.center) / self.half_extents

    def color(self, points):
        return self.texture.sample(self.local(points))

    def sample_surface(self, n, rng):
        hx, hy, hz = self.half_extents
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for a in range(3):
            sel = axis == a
            others = [i for i in range(3) if i != a]
            pts[sel, a] = sign[sel] * self.half_extents[a]
            pts[sel, others[0]] = uv[sel, 0] * self.half_extents[others[0]]
            pts[sel, others[1]] = uv[sel, 1] * self.half_extents[others[1]]
        return self.center + pts

    def extent(self) -> float:
        return 2.0 * float(np.max(self.half_extents))


@dataclass
class Rect:
    """Finite two-sided textured rectangle: center plus two half-edge vectors."""

    center: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: SmoothTexture

    def _normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    def intersect(self, origins, dirs):
        n = self._normal()
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origins) @ n) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 1e-6)
        pts = origins + t[:, None] * dirs
        rel = pts - self.center
        uu = float(self.edge_u @ self.edge_u)
        vv = float(self.edge_v @ self.edge_v)
        hit &= np.abs(rel @ self.edge_u) <= uu + 1e-12
        hit &= np.abs(rel @ self.edge_v) <= vv + 1e-12
        return np.where(hit, t, np.inf)

    def local(self, points):
        rel = points - self.center
        u = rel @ self.edge_u / float(self.edge_u @ self.edge_u)
        v = rel @ self.edge_v / float(self.edge_v @ self.edge_v)
        return np.stack([u, v, np.zeros_like(u)], axis=1)

    def color(self, points):
        return self.texture.sample(self.local(points))

    def sample_surface(self, n, rng):
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        return self.center + uv[:, :1] * self.edge_u + uv[:, 1:] * self.edge_v

    def extent(self) -> float:
        return 2.0 * float(max(np.linalg.norm(self.edge_u), np.linalg.norm(self.edge_v)))


# ---------------------------------------------------------------------------
# cameras


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for a +z-forward, y-down pinhole camera."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:  # looking straight along up: pick an arbitrary right
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nrm = np.linalg.norm(right)
    right /= nrm
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def ring_poses(center, radius: float, count: int, elevation_deg: float = 20.0,
               phase: float = 0.0) -> list[np.ndarray]:
    center = np.asarray(center, dtype=np.float64)
    el = np.deg2rad(elevation_deg)
    poses = []
    for i in range(count):
        az = phase + 2.0 * np.pi * i / count
        eye = center + radius * np.array([
            np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(look_at_pose(eye, center))
    return poses


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class SceneSpec:
    objects: list                                   # primitives, instance id = index + 1
    poses: list                                     # camera-to-world 4x4
    width: int = 48
    height: int = 48
    focal: float = 52.0
    attributes: dict = field(default_factory=dict)  # object_id -> list[str]
    points_resolution: int = 24                     # surface sample density (cells/unit)
    points_oversample: int = 12

    def intrinsics(self) -> np.ndarray:
        return np.array([
            [self.focal, 0.0, (self.width - 1) / 2.0],
            [0.0, self.focal, (self.height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ])


def render_spec_frame(spec: SceneSpec, pose: np.ndarray):
    """Ray-trace one view; returns (color, depth, mask)."""
    h, w = spec.height, spec.width
    k = spec.intrinsics()
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([
        (uu - k[0, 2]) / k[0, 0],
        (vv - k[1, 2]) / k[1, 1],
        np.ones_like(uu),
    ], axis=-1).reshape(-1, 3)
    r = pose[:3, :3]
    eye = pose[:3, 3]
    dirs = dirs_cam @ r.T                       # |dir_z(cam)| = 1 so t == camera depth
    origins = np.broadcast_to(eye, dirs.shape)

    best_t = np.full(dirs.shape[0], np.inf)
    best_id = np.zeros(dirs.shape[0], dtype=np.int32)
    for idx, prim in enumerate(spec.objects):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, idx + 1, best_id)

    color = np.zeros((dirs.shape[0], 3))
    for idx, prim in enumerate(spec.objects):
        sel = best_id == idx + 1
        if np.any(sel):
            pts = origins[sel] + best_t[sel, None] * dirs[sel]
            color[sel] = prim.color(pts)
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return (color.reshape(h, w, 3), depth.reshape(h, w),
            best_id.reshape(h, w).astype(np.int32))


def surface_points(prim, resolution: int, oversample: int,
                   rng: np.random.Generator) -> np.ndarray:
    """On-surface samples thinned to at most one point per lattice cell.

    Controls how many voxels activate downstream without moving any point off
    the true surface.
    """
    cell = prim.extent() / resolution
    n = max(resolution * resolution * 6 * oversample, 512)
    samples = prim.sample_surface(n, rng)
    keys = np.floor(samples / cell).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return samples[np.sort(first)]


def generate_synthetic_scene(spec: SceneSpec, seed: int, out_dir,
                             write_points: bool = True) -> Path:
    """Write a loadable scene directory; byte-deterministic for a fixed seed."""
    if not spec.objects:
        raise InvalidInputError("scene spec lists no objects")
    if not spec.poses:
        raise InvalidInputError("scene spec lists no cameras")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    manifest = {"frames": [], "objects": {}, "points": {}}
    k = spec.intrinsics()
    for i, pose in enumerate(spec.poses):
        fid = f"{i:06d}"
        color, depth, mask = render_spec_frame(spec, pose)
        write_frame_files(out, fid, color, depth, mask)
        manifest["frames"].append({
            "frame_id": fid,
            "color": f"color/{fid}.png",
            "depth": f"depth/{fid}.png",
            "mask": f"mask/{fid}.png",
            "intrinsics": [[float(x) for x in row] for row in k],
            "pose": [[float(x) for x in row] for row in pose],
        })

    if write_points:
        (out / "points").mkdir(exist_ok=True)
    for idx, prim in enumerate(spec.objects):
        oid = idx + 1
        manifest["objects"][str(oid)] = {
            "attributes": list(spec.attributes.get(oid, []))}
        if write_points:
            pts = surface_points(prim, spec.points_resolution,
                                 spec.points_oversample, rng)
            np.savez(out / "points" / f"{oid}.npz", points=pts.astype(np.float64))
            manifest["points"][str(oid)] = f"points/{oid}.npz"

    with open(out / "scene.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out


def ground_truth_surface(spec: SceneSpec, object_id: int, n: int,
                         seed: int = 0) -> np.ndarray:
    """Dense uniform surface samples for geometric evaluation."""
    prim = spec.objects[object_id - 1]
    return prim.sample_surface(n, np.random.default_rng(seed))
