import json

import numpy as np
import pytest

from objx import tasks
from objx.cli import main
from objx.decoder import load_gaussians
from objx.pipeline import encode_object
from objx.render import Camera
from objx.sceneio import save_embedding


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory, random_checkpoint):
    path = tmp_path_factory.mktemp("ckpt") / "core.ckpt"
    random_checkpoint.save(path)
    return path


@pytest.fixture(scope="module")
def embedding_dir(tmp_path_factory, tiny_scene_dir, ckpt_path):
    out = tmp_path_factory.mktemp("emb")
    rc = main(["encode", "--scene", str(tiny_scene_dir), "--ckpt", str(ckpt_path),
               "--out", str(out)])
    assert rc == 0
    return out


def _camera_json(path, size=32):
    cam = {
        "width": size, "height": size,
        "intrinsics": [[size * 1.2, 0, (size - 1) / 2],
                       [0, size * 1.2, (size - 1) / 2], [0, 0, 1]],
        "pose": np.eye(4).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(cam, fh)
    return path


def test_encode_writes_embeddings(embedding_dir):
    files = sorted(embedding_dir.glob("*.emb"))
    assert [f.name for f in files] == ["obj_1.emb", "obj_2.emb"]
    for f in files:
        assert f.stat().st_size <= 150 * 1024


def test_decode_render_mesh_chain(embedding_dir, ckpt_path, tmp_path):
    gpath = tmp_path / "g.bin"
    rc = main(["decode", "--embedding", str(embedding_dir / "obj_1.emb"),
               "--ckpt", str(ckpt_path), "--out", str(gpath)])
    assert rc == 0
    gauss = load_gaussians(gpath)

    campath = _camera_json(tmp_path / "cam.json")
    imgpath = tmp_path / "img.png"
    rc = main(["render", "--gaussians", str(gpath), "--camera", str(campath),
               "--out", str(imgpath)])
    assert rc == 0
    assert imgpath.is_file()

    views = [json.load(open(campath))]
    vpath = tmp_path / "views.json"
    with open(vpath, "w") as fh:
        json.dump(views, fh)
    mpath = tmp_path / "mesh.ply"
    rc = main(["mesh", "--gaussians", str(gpath), "--views", str(vpath),
               "--out", str(mpath)])
    assert rc == 0
    assert mpath.read_text().startswith("ply")


def test_compose(embedding_dir, ckpt_path, tmp_path):
    out = tmp_path / "scene.bin"
    rc = main(["compose", "--embeddings", str(embedding_dir), "--ckpt",
               str(ckpt_path), "--out", str(out)])
    assert rc == 0
    assert out.is_file()


def test_align_cli(tmp_path, capsys):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, tasks.TASK_DIM))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    idx = tasks.SceneIndex("s", [1, 2, 3, 4], v)
    tasks.save_index(idx, tmp_path / "a")
    tasks.save_index(idx, tmp_path / "b")
    rc = main(["align", "--src", str(tmp_path / "a"), "--dst", str(tmp_path / "b")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["metrics"]["mrr"] == 1.0


def test_localize_cli(tmp_path, ckpt_path, tiny_scene_dir, capsys):
    rng = np.random.default_rng(1)
    index_dir = tmp_path / "idx"
    index_dir.mkdir()
    names = []
    for i in range(3):
        v = rng.normal(size=(4, tasks.TASK_DIM))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        tasks.save_index(tasks.SceneIndex(f"s{i}", [1, 2, 3, 4], v),
                         index_dir / f"s{i}")
        names.append(f"s{i}")
    pool = tmp_path / "pool.json"
    with open(pool, "w") as fh:
        json.dump(names, fh)
    query = tiny_scene_dir / "color" / "000000.png"
    rc = main(["localize", "--index", str(index_dir), "--query", str(query),
               "--pool", str(pool), "--ckpt", str(ckpt_path)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(out["ranking"]) == 3


def test_eval_cli(tmp_path, ckpt_path, tiny_scene_dir, capsys):
    cfg = {"scene": str(tiny_scene_dir), "ckpt": str(ckpt_path),
           "out": str(tmp_path / "report.json")}
    cpath = tmp_path / "cfg.json"
    with open(cpath, "w") as fh:
        json.dump(cfg, fh)
    rc = main(["eval", "--config", str(cpath)])
    assert rc == 0
    report = json.load(open(tmp_path / "report.json"))
    assert len(report["objects"]) == 2


def test_error_exit_code(tmp_path):
    rc = main(["decode", "--embedding", str(tmp_path / "missing.emb"),
               "--ckpt", str(tmp_path / "missing.ckpt"), "--out",
               str(tmp_path / "g.bin")])
    assert rc == 1
