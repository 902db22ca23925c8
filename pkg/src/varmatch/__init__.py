"""Variational anchor matching on synthetic crowded scenes.

Dense box proposals are modeled as a latent diagonal-Gaussian variable per
anchor; a tractable detection likelihood (smooth recall over anchor bags
plus focal-style suppression of negatives) is optimized in expectation with
reparameterized samples and a KL pull toward the anchor prior.
"""

from .distributions import (
    NoiseDraw,
    draw_noise,
    kl_gradient,
    kl_monte_carlo,
    kl_to_standard_normal,
    reparameterize,
)
from .estimators import (
    GradientEstimate,
    ProposalParams,
    QuadraticObjective,
    SceneObjective,
    SurfaceGrid,
    expected_iou_surface,
    finite_diff_gradient,
    kink_derivative_jump,
    reparam_gradient,
    score_function_gradient,
)
from .evaluation import (
    Detection,
    MetricReport,
    infer,
    log_average_miss_rate,
    nms,
    occlusion_sliced_mr,
    variance_diagnostics,
)
from .geometry import FA, FCOS, box, decode, encode, iou, iou_gradient, iou_matrix
from .likelihood import (
    ObjectiveReport,
    build_bags,
    keep_probability,
    match_quality,
    mean_max,
    negative_log_likelihood,
    positive_log_likelihood,
    pseudo_log_likelihood,
)
from .model import ProposalModel, forward
from .scenes import (
    BANDS,
    AnchorGrid,
    OcclusionInfeasibleError,
    Scene,
    SceneConfig,
    build_anchor_grid,
    generate_scene,
    load_dataset,
    occlusion_labels,
    rasterize,
    save_dataset,
)
from .training import TrainConfig, TrainLog, train, train_step

__version__ = "0.1.0"
