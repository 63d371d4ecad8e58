import os

# Pin BLAS threading before numpy loads anywhere: keeps reductions in a fixed
# order so reproducibility checks compare like with like.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from objx import synth
from objx.synth import Box, Rect, SceneSpec, SmoothTexture, Sphere, ring_poses


def texture(seed: int, contrast: float = 0.2) -> SmoothTexture:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 0.65, 3)
    grad = rng.uniform(-contrast, contrast, (3, 3))
    return SmoothTexture(base, grad,
                         cosine_axis=rng.uniform(-0.6, 0.6, 3),
                         cosine_color=rng.uniform(0.0, 0.05, 3))


def two_object_spec(size: int = 32, n_views: int = 6,
                    points_resolution: int = 12) -> SceneSpec:
    return SceneSpec(
        objects=[
            Sphere(np.array([0.0, 0.0, 0.45]), 0.28, texture(1)),
            Box(np.array([0.85, 0.15, 0.3]), np.array([0.24, 0.2, 0.26]), texture(2)),
        ],
        poses=ring_poses([0.42, 0.07, 0.4], 1.8, n_views, 24.0, phase=0.2),
        width=size, height=size, focal=size * 1.15,
        attributes={1: ["red", "sphere"], 2: ["blue", "box"]},
        points_resolution=points_resolution,
    )


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_scene")
    synth.generate_synthetic_scene(two_object_spec(), seed=11, out_dir=out)
    return out


@pytest.fixture(scope="session")
def tiny_observations(tiny_scene_dir):
    from objx.sceneio import load_scene
    return load_scene(tiny_scene_dir)


@pytest.fixture(scope="session")
def random_checkpoint():
    """Seeded random-init parameter bundle; enough for interface tests."""
    from objx import latent
    from objx.decoder import init_gs_decoder
    from objx.pipeline import Checkpoints
    from objx.tasks import init_aux_heads

    rng = np.random.default_rng(99)
    params = {}
    latent.init_slat_encoder(rng, params)
    init_gs_decoder(rng, params)
    latent.init_compressor(rng, params)
    init_aux_heads(rng, params)
    return Checkpoints(params)
