"""Desk-scale lab for precision/recall-aware synthesis in data-free knowledge distillation.

The package builds a synthetic factor-structured world, trains a teacher, an
autoencoder and a small conditional latent diffusion model on it, then
synthesizes a transfer set with energy and batch-norm guidance and diversified
prompts, distills a student and measures the result.
"""

from .conditions import ConditionCode, WorldBinding
from .diffusion import DiffusionModel, DiffusionTrainConfig, NoiseSchedule, sample, train_diffusion
from .distill import DistillConfig, evaluate_accuracy, kd_loss, train_student
from .guidance import GuidanceConfig, Prompt, bn_loss, energy, energy_loss, guided_step, synthesize_dataset
from .metrics import MetricsReport, coverage_projection, energy_stats, frechet_distance, knn_precision_recall
from .nets import ClassifierModel, TrainConfig, train_autoencoder, train_classifier
from .tensor import Tape, Tensor
from .world import LabeledSet, World, WorldSpec, build_world, sample_split

__version__ = "0.1.0"
