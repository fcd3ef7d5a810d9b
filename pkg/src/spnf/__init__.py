"""Few-shot radiance fields distilled from coarse depth priors."""

from .distill import DistillConfig, continuity_loss, knn_neighbors, ranking_loss, sample_pairs
from .field import EncodingConfig, FieldArch, FieldParams, field_backward, field_forward, init_field, positional_encode
from .metrics import psnr, scale_invariant_depth_error, ssim
from .renderer import composite, constraint_budget, generate_ray, render_pixel, stratified_sample
from .scene_io import (
    DepthPrior,
    Scene,
    load_scene,
    make_synthetic_scene,
    normalize_model_depth,
    normalize_sensor_depth,
    select_views,
    write_scene,
)
from .training import LossWeights, TrainConfig, adam_step, lr_at, reconstruction_loss, total_loss, train

__version__ = "0.1.0"
