"""Compressive-sensing reconstruction toolkit for quantitative acoustic microscopy."""

from .amp import (
    AmpDivergenceError,
    AmpState,
    DenoiserSpec,
    amp_reconstruct,
    cauchy_map_denoise,
    estimate_noise_std,
    soft_threshold_denoise,
)
from .core import (
    BlockGrid,
    ParametricMap,
    block_partition,
    block_reassemble,
    load_map,
    save_map,
    save_mask,
    unvectorize_blocks,
    vectorize_blocks,
)
from .metrics import MetricReport, evaluate, psnr, rmse, ssim
from .qamsim import (
    EchoParams,
    EchoRecord,
    Phantom,
    ReferencePulse,
    acquire_and_map,
    estimate_echo_params,
    generate_phantom,
    sos_from_delays,
    synth_echo,
    synth_reference,
)
from .sampling import (
    BinaryMask,
    CsProblem,
    MeasurementMatrix,
    apply_sampling,
    build_problem,
    compression_ratio,
    gaussian_matrix,
    random_mask,
    raster_mask,
    spiral_mask,
)
from .unfolded import (
    LearnedDenoiser,
    TrainConfig,
    UnfoldedModel,
    gradient_check,
    init_model,
    load_model,
    save_model,
    train_model,
    unfolded_forward,
)

__version__ = "0.1.0"
