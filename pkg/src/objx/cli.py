"""Command-line interface.

Subcommands: encode, decode, render, mesh, compose, localize, align, ablate,
eval. All reports are JSON; the exit code is 0 iff no error occurred.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from . import latent, meshing, tasks
from .decoder import compose_scene, load_gaussians, save_gaussians
from .features import get_extractor
from .pipeline import (Checkpoints, ablate_resolution, decode_object,
                       encode_object, evaluate_views, split_object)
from .render import Camera, render
from .sceneio import load_embedding, load_scene, save_embedding
from .training import TrainConfig


def _camera_from_json(data: dict) -> Camera:
    return Camera(np.asarray(data["intrinsics"], dtype=np.float64),
                  np.asarray(data["pose"], dtype=np.float64),
                  int(data["width"]), int(data["height"]))


def _write_image(path, img: np.ndarray) -> None:
    iio.imwrite(path, np.clip(np.round(img * 255), 0, 255).astype(np.uint8))


def _cmd_encode(args) -> int:
    ckpt = Checkpoints.load(args.ckpt)
    extractor = get_extractor(args.features)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for obs in load_scene(args.scene):
        rec = encode_object(obs, ckpt, extractor=extractor)
        path = out_dir / f"obj_{obs.object_id}.emb"
        save_embedding(rec, path)
        written.append(str(path))
    print(json.dumps({"embeddings": written}))
    return 0


def _cmd_decode(args) -> int:
    ckpt = Checkpoints.load(args.ckpt)
    rec = load_embedding(args.embedding)
    gauss = decode_object(rec, ckpt)
    save_gaussians(gauss, args.out)
    print(json.dumps({"gaussians": args.out, "count": len(gauss)}))
    return 0


def _cmd_render(args) -> int:
    gauss = load_gaussians(args.gaussians)
    with open(args.camera) as fh:
        cam = _camera_from_json(json.load(fh))
    target = render(gauss, cam)
    _write_image(args.out, target.color)
    return 0


def _cmd_mesh(args) -> int:
    gauss = load_gaussians(args.gaussians)
    with open(args.views) as fh:
        cams = [_camera_from_json(c) for c in json.load(fh)]
    t = gauss.canonical.translation
    s = gauss.canonical.scale
    vol = meshing.volume_for_bounds(t, t + s)
    for cam in cams:
        meshing.integrate(vol, render(gauss, cam), cam)
    mesh = meshing.marching_cubes(vol)
    meshing.save_mesh_ply(mesh, args.out)
    print(json.dumps({"mesh": args.out, "vertices": len(mesh),
                      "faces": int(mesh.faces.shape[0])}))
    return 0


def _cmd_compose(args) -> int:
    ckpt = Checkpoints.load(args.ckpt)
    items = []
    for path in sorted(Path(args.embeddings).glob("*.emb")):
        rec = load_embedding(path)
        gauss = decode_object(rec, ckpt)
        items.append((gauss, rec.canonical))
    scene = compose_scene(items)
    save_gaussians(scene, args.out)
    print(json.dumps({"gaussians": args.out, "count": len(scene)}))
    return 0


def _cmd_localize(args) -> int:
    ckpt = Checkpoints.load(args.ckpt)
    with open(args.pool) as fh:
        pool = json.load(fh)
    candidates = [tasks.load_index(Path(args.index) / name) for name in pool]
    image = iio.imread(args.query).astype(np.float64)[:, :, :3] / 255.0
    query = tasks.encode_query_patches(ckpt.params, image)
    ranked = tasks.localize(query, candidates, rule=args.rule)
    print(json.dumps({"ranking": [{"scene_id": sid, "score": score}
                                  for sid, score in ranked]}))
    return 0


def _cmd_align(args) -> int:
    src = tasks.load_index(args.src)
    dst = tasks.load_index(args.dst)
    _rankings, metrics, excluded = tasks.align(src, dst)
    print(json.dumps({"metrics": metrics, "excluded": excluded}))
    return 0


def _cmd_ablate(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    observations = load_scene(cfg["scene"])
    bundles = [split_object(o, cfg.get("train_views", 8)) for o in observations]
    from .training import train_phase1
    p1_cfg = TrainConfig.phase1(iterations=cfg.get("phase1_iterations", 500))
    params, _ = train_phase1([b.prepared for b in bundles], p1_cfg)
    report = ablate_resolution(
        bundles, params,
        resolutions=tuple(cfg.get("resolutions", [32, 16, 8])),
        modes=tuple(cfg.get("modes", ["naive", "learned"])),
        train_config=TrainConfig.phase2(iterations=cfg.get("phase2_iterations", 400)))
    out = cfg.get("out", "ablation.json")
    with open(out, "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps({"report": out, "rows": len(report["rows"])}))
    return 0


def _cmd_eval(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    ckpt = Checkpoints.load(cfg["ckpt"])
    observations = load_scene(cfg["scene"])
    rows = []
    for obs in observations:
        rec = encode_object(obs, ckpt)
        gauss = decode_object(rec, ckpt)
        cams = [Camera.from_frame(f) for f in obs.frames]
        images = [f.image for f in obs.frames]
        masks = [f.mask == obs.object_id for f in obs.frames]
        m = evaluate_views(gauss, cams, images, masks) if len(gauss) else \
            {"psnr": 0.0, "ssim": 0.0}
        rows.append({"object_id": obs.object_id, "splats": len(gauss), **m})
    report = {"objects": rows}
    out = cfg.get("out")
    if out:
        with open(out, "w") as fh:
            json.dump(report, fh, indent=1)
    print(json.dumps(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objx")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode every object of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", default="handcrafted",
                   help="handcrafted | external:<dir>")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode an embedding to splats")
    p.add_argument("--embedding", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("render", help="rasterize a splat file")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("mesh", help="TSDF-fuse rendered depth and extract a mesh")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("compose", help="decode embeddings and merge into one scene")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compose)

    p = sub.add_parser("localize", help="rank candidate scenes for a query image")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rule", default="mean_max",
                   choices=["mean_max", "topk_mean"])
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("align", help="object-level alignment of two indexes")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("ablate", help="compression-resolution ablation")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("eval", help="encode/decode and report view metrics")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
