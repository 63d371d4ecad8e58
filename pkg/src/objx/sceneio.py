"""Scene ingestion, canonical object framing, and binary persistence.

A scene directory holds ``scene.json`` plus ``color/{frame}.png`` (8-bit RGB),
``depth/{frame}.png`` (16-bit millimetres, 0 = invalid) and
``mask/{frame}.png`` (16-bit instance ids, 0 = background). Object point
clouds may optionally be shipped as ``points/{object_id}.npz``; otherwise
they are recovered by unprojecting masked depth pixels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from .errors import FormatError, InvalidInputError

EMBEDDING_MAGIC = b"OBJX"
EMBEDDING_VERSION = 1

# Points are subsampled on load so voxel counts stay desk-scale.
DEFAULT_MAX_POINTS = 20000


# ---------------------------------------------------------------------------
# domain types


@dataclass
class CanonicalTransform:
    """Maps world metres into the unit cube: ``c = (p - translation) / scale``.

    ``scale`` is metres per canonical unit; the inverse placement used when
    composing scenes is ``p = translation + scale * c``.
    """

    translation: np.ndarray  # (3,) metres
    scale: float             # > 0

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    @staticmethod
    def identity() -> "CanonicalTransform":
        return CanonicalTransform(np.zeros(3), 1.0)


@dataclass
class Frame:
    """One posed RGB-D view. ``pose`` is camera-to-world; depth 0 = invalid."""

    image: np.ndarray       # (H, W, 3) in [0, 1]
    depth: np.ndarray       # (H, W) metres
    mask: np.ndarray        # (H, W) instance ids, 0 = background
    intrinsics: np.ndarray  # (3, 3) pinhole
    pose: np.ndarray        # (4, 4) rigid camera-to-world
    frame_id: str = ""

    def validate(self) -> None:
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise InvalidInputError("intrinsics must have positive focal entries")
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise InvalidInputError("pose rotation block is not orthonormal")
        if np.any(self.depth < 0):
            raise InvalidInputError("depth must be non-negative")
        if self.image.shape[:2] != self.depth.shape or self.image.shape[:2] != self.mask.shape:
            raise FormatError("color/depth/mask dimensions disagree")

    def restricted_to(self, object_id: int) -> "Frame":
        """Copy with the mask zeroed everywhere this object is absent."""
        mask = np.where(self.mask == object_id, self.mask, 0)
        return Frame(self.image, self.depth, mask, self.intrinsics, self.pose, self.frame_id)


@dataclass
class ObjectObservation:
    object_id: int
    frames: list            # Frames restricted to this object's mask
    points: np.ndarray      # (P, 3) world metres
    attributes: list = field(default_factory=list)
    canonical: CanonicalTransform | None = None


@dataclass
class EmbeddingRecord:
    """Fixed-size per-object latent: a dense D^3 x C' tensor plus placement."""

    object_id: int
    grid_resolution: int            # D
    channels: int                   # C'
    payload: np.ndarray             # (D, D, D, C') float32
    canonical: CanonicalTransform
    attributes: list = field(default_factory=list)

    def validate(self) -> None:
        d, c = self.grid_resolution, self.channels
        if self.payload.shape != (d, d, d, c):
            raise InvalidInputError(
                f"payload shape {self.payload.shape} != ({d},{d},{d},{c})")
        if self.payload.dtype != np.float32:
            raise InvalidInputError("payload must be float32")


# ---------------------------------------------------------------------------
# canonical framing


def canonicalize(points: np.ndarray) -> CanonicalTransform:
    """Padded axis-aligned bounding box into [0,1]^3 with a 5% margin.

    The largest bbox extent maps to 0.9 canonical units (scale = extent/0.9),
    centred per axis. Point-like clouds get the scale clamped to 1e-3 m so the
    transform stays invertible.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidInputError("canonicalize needs a non-empty (P, 3) point cloud")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = max(extent / 0.9, 1e-3)
    center = 0.5 * (lo + hi)
    translation = center - 0.5 * scale
    return CanonicalTransform(translation, scale)


# ---------------------------------------------------------------------------
# PNG helpers


def _read_color(path: Path) -> np.ndarray:
    img = iio.imread(path)
    if img.ndim != 3 or img.shape[2] < 3:
        raise FormatError(f"{path}: expected an RGB image")
    return img[:, :, :3].astype(np.float64) / 255.0


def _read_depth(path: Path) -> np.ndarray:
    raw = iio.imread(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected single-channel depth")
    return raw.astype(np.float64) / 1000.0


def _read_mask(path: Path) -> np.ndarray:
    raw = iio.imread(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected single-channel mask")
    return raw.astype(np.int32)


def write_frame_files(scene_dir: Path, frame_id: str, image: np.ndarray,
                      depth: np.ndarray, mask: np.ndarray) -> None:
    (scene_dir / "color").mkdir(parents=True, exist_ok=True)
    (scene_dir / "depth").mkdir(parents=True, exist_ok=True)
    (scene_dir / "mask").mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    iio.imwrite(scene_dir / "color" / f"{frame_id}.png", rgb)
    mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(np.uint16)
    iio.imwrite(scene_dir / "depth" / f"{frame_id}.png", mm)
    iio.imwrite(scene_dir / "mask" / f"{frame_id}.png", mask.astype(np.uint16))


# ---------------------------------------------------------------------------
# scene loading


def unproject_masked_pixels(frame: Frame, object_id: int) -> np.ndarray:
    """Lift this object's masked depth pixels to world-space points."""
    sel = (frame.mask == object_id) & (frame.depth > 0)
    if not np.any(sel):
        return np.zeros((0, 3))
    vv, uu = np.nonzero(sel)
    z = frame.depth[vv, uu]
    k = frame.intrinsics
    x = (uu - k[0, 2]) / k[0, 0] * z
    y = (vv - k[1, 2]) / k[1, 1] * z
    cam = np.stack([x, y, z], axis=1)
    r = frame.pose[:3, :3]
    t = frame.pose[:3, 3]
    return cam @ r.T + t


def load_frames(path):
    """Load all frames plus metadata; returns (frames, attr_map, points_map)."""
    scene_dir = Path(path)
    manifest_path = scene_dir / "scene.json"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    frames: list[Frame] = []
    for entry in manifest.get("frames", []):
        fid = entry["frame_id"]
        for key in ("color", "depth", "mask"):
            if not (scene_dir / entry[key]).is_file():
                raise FormatError(f"frame {fid}: missing {key} file {entry[key]}")
        image = _read_color(scene_dir / entry["color"])
        depth = _read_depth(scene_dir / entry["depth"])
        mask = _read_mask(scene_dir / entry["mask"])
        if image.shape[:2] != depth.shape:
            raise FormatError(f"frame {fid}: color {image.shape[:2]} vs depth {depth.shape}")
        if mask.shape != depth.shape:
            raise FormatError(f"frame {fid}: mask {mask.shape} vs depth {depth.shape}")
        frame = Frame(
            image=image,
            depth=depth,
            mask=mask,
            intrinsics=np.asarray(entry["intrinsics"], dtype=np.float64),
            pose=np.asarray(entry["pose"], dtype=np.float64),
            frame_id=fid,
        )
        frame.validate()
        frames.append(frame)

    attr_map = {int(k): list(v.get("attributes", []))
                for k, v in manifest.get("objects", {}).items()}
    points_map = {int(k): str(scene_dir / v)
                  for k, v in manifest.get("points", {}).items()}
    return frames, attr_map, points_map


def observations_from_frames(frames: list, attr_map: dict | None = None,
                             points_map: dict | None = None,
                             max_points: int = DEFAULT_MAX_POINTS) -> list[ObjectObservation]:
    """Build per-object observations from in-memory frames.

    Points come from ``points_map`` files when available, otherwise from
    unprojecting the object's masked depth pixels across the given frames.
    """
    attr_map = attr_map or {}
    points_map = points_map or {}
    ids = sorted({int(i) for f in frames for i in np.unique(f.mask) if i != 0})
    observations = []
    for oid in ids:
        obj_frames = [f.restricted_to(oid) for f in frames
                      if np.any(f.mask == oid)]
        if not obj_frames:
            continue
        if oid in points_map:
            with np.load(points_map[oid]) as npz:
                points = npz["points"].astype(np.float64)
        else:
            clouds = [unproject_masked_pixels(f, oid) for f in obj_frames]
            points = np.concatenate(clouds, axis=0)
        if points.shape[0] > max_points:
            rng = np.random.default_rng(oid)
            keep = rng.choice(points.shape[0], size=max_points, replace=False)
            points = points[np.sort(keep)]
        if points.shape[0] == 0:
            continue
        observations.append(ObjectObservation(
            object_id=oid,
            frames=obj_frames,
            points=points,
            attributes=attr_map.get(oid, []),
            canonical=canonicalize(points),
        ))
    return observations


def load_scene(path, max_points: int = DEFAULT_MAX_POINTS) -> list[ObjectObservation]:
    """Load a scene directory into per-object observations.

    One observation per instance id appearing in at least one mask; objects
    with zero valid frames are dropped.
    """
    frames, attr_map, points_map = load_frames(path)
    return observations_from_frames(frames, attr_map, points_map, max_points)


# ---------------------------------------------------------------------------
# embedding persistence
#
# Layout: magic 'OBJX', version u8, object_id u32, D u16, C' u16,
# canonical transform 4 x f32 (tx, ty, tz, scale), attribute block
# (u16 count, then u16 length + UTF-8 bytes per attribute), payload f32 LE.


def save_embedding(rec: EmbeddingRecord, path) -> None:
    rec.validate()
    blob = bytearray()
    blob += EMBEDDING_MAGIC
    blob += struct.pack("<BIHH", EMBEDDING_VERSION, rec.object_id,
                        rec.grid_resolution, rec.channels)
    t = rec.canonical.translation
    blob += struct.pack("<4f", t[0], t[1], t[2], rec.canonical.scale)
    blob += struct.pack("<H", len(rec.attributes))
    for attr in rec.attributes:
        data = attr.encode("utf-8")
        blob += struct.pack("<H", len(data)) + data
    payload = np.ascontiguousarray(rec.payload, dtype="<f4")
    blob += payload.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_embedding(path) -> EmbeddingRecord:
    blob = Path(path).read_bytes()
    if blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, object_id, d, c = struct.unpack_from("<BIHH", blob, 4)
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<BIHH")
    tx, ty, tz, scale = struct.unpack_from("<4f", blob, off)
    off += 16
    (n_attr,) = struct.unpack_from("<H", blob, off)
    off += 2
    attributes = []
    for _ in range(n_attr):
        (length,) = struct.unpack_from("<H", blob, off)
        off += 2
        attributes.append(blob[off:off + length].decode("utf-8"))
        off += length
    expect = d * d * d * c * 4
    if len(blob) - off != expect:
        raise FormatError(f"{path}: payload is {len(blob) - off} bytes, expected {expect}")
    payload = np.frombuffer(blob, dtype="<f4", count=d * d * d * c, offset=off)
    payload = payload.reshape(d, d, d, c).copy()
    canonical = CanonicalTransform(
        np.array([tx, ty, tz], dtype=np.float64), float(scale))
    return EmbeddingRecord(object_id, d, c, payload, canonical, attributes)
