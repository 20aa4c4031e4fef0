import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sage_lod.splats import SplatCloud
from sage_lod.synth import (
    STANDARD_ITERATIONS,
    STANDARD_LEVELS,
    generate_scene,
    standard_scene_spec,
)


def random_cloud(rng: np.random.Generator, n: int, sh_degree: int = 0,
                 spread: float = 1.0, scale: float = 0.08) -> SplatCloud:
    """Random but valid splat cloud for renderer/IO tests."""
    rest_w = 3 * ((sh_degree + 1) ** 2 - 1)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    p = rng.uniform(0.2, 0.95, size=n)
    return SplatCloud(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        sh_dc=rng.normal(0.0, 0.8, size=(n, 3)),
        sh_rest=rng.normal(0.0, 0.2, size=(n, rest_w)),
        opacity_raw=np.log(p / (1 - p)),
        scale_raw=np.log(rng.uniform(0.3, 1.5, size=(n, 3)) * scale),
        rotation_raw=quats,
        sh_degree=sh_degree)


@pytest.fixture(scope="session")
def standard_scene():
    """The frozen synthetic fixture shared across the suite."""
    return generate_scene(standard_scene_spec())


@pytest.fixture(scope="session")
def standard_checkpoints(standard_scene, tmp_path_factory):
    from sage_lod.synth import emit_checkpoint_series

    root = tmp_path_factory.mktemp("ckpts")
    return emit_checkpoint_series(standard_scene, STANDARD_LEVELS,
                                  STANDARD_ITERATIONS, root)


@pytest.fixture(scope="session")
def standard_profile(standard_scene, standard_checkpoints):
    from sage_lod.metrics import build_quality_profile

    scene = standard_scene
    return build_quality_profile(
        standard_checkpoints, scene.views, scene.masks, scene.ground_truth,
        scene.labeled_cloud, scene_id="synthetic", label_map=scene.label_map)
