from .cameras import CameraPose, gen_rays, look_at, rays_for_patch
from .dataset import (
    PosedImage,
    antialiased_downsample,
    box_downsample,
    downsample_gt,
    load_dataset,
    load_refs,
)
from .patches import KEEP_BG, TAU_MASK, PatchBundle, sample_patch_bundles
from .synthetic import (
    AnalyticField,
    Scene,
    build_scene,
    generate_synthetic_scene,
    hemisphere_poses,
    render_analytic_image,
    sample_probe_points,
)

__all__ = [
    "CameraPose",
    "PosedImage",
    "PatchBundle",
    "AnalyticField",
    "Scene",
    "KEEP_BG",
    "TAU_MASK",
    "antialiased_downsample",
    "box_downsample",
    "build_scene",
    "downsample_gt",
    "gen_rays",
    "generate_synthetic_scene",
    "hemisphere_poses",
    "load_dataset",
    "load_refs",
    "look_at",
    "rays_for_patch",
    "render_analytic_image",
    "sample_patch_bundles",
    "sample_probe_points",
]
