"""latentshield: prompt-independent protective perturbations for images.

Crafts L-infinity bounded perturbations that push the latent Gaussian
distribution of a convolutional image encoder away from its clean
statistics, and evaluates the resulting protection against toy-scale
diffusion fine-tuning, adaptive sigma substitutions, and common data
corruptions.
"""

from latentshield.autodiff import (
    Tensor,
    Tape,
    backward,
    grad_check,
    op_add,
    op_concat_channels,
    op_conv2d,
    op_elementwise,
    op_mul,
    op_reduce,
    op_sub,
)
from latentshield.encoder import (
    EncoderParams,
    LatentDistribution,
    SigmaMode,
    apply_sigma_mode,
    encode,
    init_encoder,
    load_encoder,
    sample,
    save_encoder,
)
from latentshield.diffusion import (
    DenoiserParams,
    NoiseSchedule,
    PromptId,
    TrainConfig,
    forward_noise,
    init_denoiser,
    loss_cond,
    loss_uncond,
    make_schedule,
    train_denoiser,
)
from latentshield.losses import (
    CleanLatentCache,
    LossKind,
    checkerboard_target,
    clean_cache,
    loss_add,
    loss_add_log,
    loss_combo,
    loss_mean,
    loss_mean_targeted,
    loss_sample,
    loss_var,
)
from latentshield.attack import (
    AsplSchedule,
    AttackConfig,
    ProtectedResult,
    aspl_protect,
    fsgm_protect,
    pgd_protect,
    quantize_roundtrip,
)
from latentshield.analytics import (
    Trajectory,
    TrajectoryPoint,
    export_trajectory,
    latent_shift,
    read_trajectory,
)
from latentshield.robustness import (
    CorruptionSpec,
    ExperimentReport,
    corrupt,
    psnr,
    run_adaptive_experiment,
    run_corruption_experiment,
    run_mismatch_experiment,
    ssim,
)

__version__ = "0.1.0"
