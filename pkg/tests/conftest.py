import numpy as np
import pytest
import torch

from zssrt.field import FieldConfig, init_field
from zssrt.scenekit.cameras import CameraPose, look_at
from zssrt.scenekit.synthetic import build_scene, generate_synthetic_scene

torch.set_num_threads(max(torch.get_num_threads(), 1))


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A small but real dataset: 3 train + 2 test views at 32px."""
    out = tmp_path_factory.mktemp("scene") / "s11"
    generate_synthetic_scene(out, seed=11, n_views=3, res=32, n_test=2)
    return out


@pytest.fixture(scope="session")
def tiny_scene():
    return build_scene(11)


@pytest.fixture()
def small_field():
    cfg = FieldConfig(
        resolution=16, density_rank=2, appearance_rank=3,
        hidden_dim=24, near=0.5, far=5.0,
    )
    return init_field(cfg, seed=3)


@pytest.fixture()
def odd_pose():
    # odd image size so the central pixel ray is exactly the optical axis
    return CameraPose(look_at(np.array([3.0, 0.5, 1.0]), np.zeros(3)), 0.8, 9, 9)
