"""memora-lab: unlearn a concept from a toy diffusion model, then recover it.

The lab trains a small conditional denoiser on a synthetic glyph world,
erases one concept with either of two unlearners, recovers it from a handful
of reference images (DDIM inversion -> spherical-interpolation expansion ->
low-rank adapter fine-tuning), and quantifies the recovery with ASR and
Frechet-distance metrics, classifying the forgetting as short- or long-term.
"""

from .attack import AttackBudget, AttackResult, attack_batch, attack_condition
from .config import RunConfig, default_config, load_config, write_config
from .denoiser import ConditionalDenoiser, fresh_denoiser
from .diffusion import (
    Condition,
    Latent,
    NoiseSchedule,
    cfg_noise,
    ddim_inverse_step,
    ddim_step,
    denoise_from,
    forward_diffuse,
    inference_timesteps,
    make_schedule,
    sample,
)
from .lora import (
    AdaptedDenoiser,
    LoraAdapter,
    adapted_forward,
    init_adapter,
    merge_adapters,
    merge_many,
)
from .metrics import (
    EvalReport,
    ForgettingVerdict,
    RecoveryCurve,
    asr,
    classify_forgetting,
    cosine_report,
    extract_features,
    fid,
    recovery_curve,
)
from .pipeline import (
    ExpansionScheme,
    ExpansionSet,
    LatentTrajectory,
    RelearnConfig,
    RelearnRun,
    automemora_noise,
    automemora_sample,
    build_training_set,
    expand_latents,
    invert_image,
    relearn,
    slerp,
)
from .unlearn import UnlearnResult, unlearn_negative_guidance, unlearn_retrain_excluding
from .world import (
    ConceptClassifier,
    ConceptDataset,
    TrainConfig,
    generate_dataset,
    train_classifier,
    train_denoiser,
)

__version__ = "0.1.0"
