"""Mixture-of-experts neural radiance field with hindsight expert
selection via the Gumbel-Max trick, a foresight-gated baseline, a
procedural toy dataset, and the training/evaluation tooling around them.
"""

__version__ = "0.1.0"

from .field import (
    FieldSample,
    GatedMoeModel,
    GumbelNerfModel,
    InstanceCode,
    ModelConfig,
    SelectorOutput,
    build_gated_model,
    build_model,
    compute_logits,
    expert_forward,
    field_evaluator,
    gate_forward,
    init_code,
    map_shape_code,
    map_texture_code,
    moe_field_forward,
    sample_gumbel,
    select_expert,
)
from .metrics import (
    MetricReport,
    UtilizationHistogram,
    evaluate,
    expert_utilization,
    probe_continuity,
    psnr,
    render_decomposition,
    ssim,
)
from .rendering import Camera, RenderConfig, composite_ray, generate_rays, \
    render_image, sample_depths, transmittance
from .training import (
    Checkpoint,
    TemperatureSchedule,
    TrainConfig,
    optimize_latents,
    photometric_loss,
    temperature_at,
    train,
)
from .data import (
    CarFamily,
    Dataset,
    ToyInstanceSpec,
    generate_dataset,
    generate_instance,
    load_dataset,
    oracle_eval,
)
