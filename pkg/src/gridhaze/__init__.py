"""gridhaze: a grid-structured multi-scale dehazing network research kit.

Submodules: haze_model (scattering-model synthesis and the derived-input
bank), network (the attention grid architecture and its ablation
variants), losses (fidelity / perceptual / distillation), training
(loops, schedule, checkpoint bundles), metrics (PSNR/SSIM), cli.
"""

from .haze_model import (
    DepthMap,
    DomainShiftParams,
    HazeParams,
    HazeSample,
    apply_asm,
    derive_inputs,
    invert_asm,
    make_dataset,
    synth_depth,
    translate_domain,
    transmission,
)
from .losses import LossWeights, PerceptualExtractor, distill_loss, fidelity_loss, perceptual_loss, total_loss
from .metrics import MetricReport, psnr, ssim
from .network import AttentionGridNet, FeatureTap, GridConfig, ParameterStore, build, param_count
from .training import (
    CheckpointBundle,
    TrainConfig,
    evaluate,
    finetune,
    load_checkpoint,
    lr_schedule,
    model_from_bundle,
    pretrain,
    sample_patches,
    save_checkpoint,
)

__version__ = "0.1.0"
