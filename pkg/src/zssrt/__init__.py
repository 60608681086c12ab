"""Super-resolving radiance fields from low-resolution posed images.

The pipeline has four parts: a coarse field fit to the captures, a
scene-specific degradation mapping learned by internal supervision, a fine
field trained through that frozen mapping on super-sampling ray patches,
and snapshot ensembling at inference.
"""

from .checkpoint import (
    FORMAT_TAG,
    load_checkpoint,
    load_ensemble,
    load_field,
    load_sdm,
    save_checkpoint,
    save_ensemble,
    save_field,
    save_sdm,
)
from .config import TrainConfig, profile
from .errors import (
    ConfigurationError,
    DivergenceError,
    MissingArtifactError,
    ShapeError,
    ValidationError,
)
from .evaluation import MetricReport, compare_views, consistency_probe, emit_report, psnr, ssim
from .field import (
    EnsembleField,
    FieldConfig,
    FieldSnapshot,
    TensorialField,
    ensemble_query,
    init_field,
    query_field,
    snapshot,
)
from .renderer import (
    RenderedImage,
    RenderedPatch,
    composite,
    render_image,
    render_patch,
    render_rays,
    stratified_samples,
)
from .scenekit import (
    CameraPose,
    PatchBundle,
    PosedImage,
    antialiased_downsample,
    box_downsample,
    downsample_gt,
    gen_rays,
    generate_synthetic_scene,
    load_dataset,
    rays_for_patch,
    sample_patch_bundles,
)
from .sdm import GradientView, PacStage, SdmNetwork, gradient_view, pac_apply, sdm_forward, train_sdm
from .trainer import FeatureExtractor, default_extractor, fine_loss, train_coarse, train_fine

__version__ = "0.1.0"
