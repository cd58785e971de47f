"""Text-guided 3D voxel completion via patchification.

Corrupted occupancy grids are split into patches, encoded by a shared
patch VAE, projected into a small autoregressive language model alongside
a caption, and decoded back into a completed grid.
"""

from .voxel import PatchSequence, depatchify, iou, load_voxb, occupied_count, patchify, rotate, save_voxb
from .corruption import CorruptionSpec, TrainRanges, apply_corruption, plane_mask, random_mask, random_noise, sample_corruption
from .dataset import GenConfig, ShapeDataset, augment, build_manifest, load_manifest, load_shapes
from .vae import PatchVae, VaeConfig, VaeTrainConfig, gaussian_kld, train_vae, vae_loss
from .lm import LmConfig, LmTrainConfig, TinyLm, Tokenizer, caption_nll, generate_caption, pretrain_lm
from .lora import LoraConfig, attach_lora
from .projection import (
    STAGE1_INSTRUCTION,
    STAGE2_INSTRUCTION,
    InputProjection,
    OutputProjection,
    assemble_stage1_sequence,
    assemble_stage2_sequence,
)
from .checkpoint import Checkpoint
from .training import PipelineConfig, PipelineState, StageConfig, run_stage1, run_stage2
from .evaluation import DEFAULT_PRESETS, EvalPreset, chamfer, complete, evaluate_suite, iterative_refine

__version__ = "0.1.0"
