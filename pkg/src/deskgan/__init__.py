"""deskgan: a framework-free, desk-scale GAN training stack.

Self-attention blocks over spatial locations, spectral normalization on
both networks, hinge adversarial losses, two-timescale Adam, an ablation
harness, Fréchet/inception-style metrics against a pinned extractor, and
attention-map export — all on a small reverse-mode autodiff tensor core.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad
from .attention import SelfAttentionBlock
from .losses import hinge_d_loss, hinge_g_loss, Adam, TTURConfig
from .models import (GeneratorConfig, DiscriminatorConfig, build_generator,
                     build_discriminator, sample)
from .trainer import Trainer, TrainerConfig, TrainingLog
from .metrics import (GaussianStats, frechet_distance, inception_score,
                      matrix_sqrt_psd, intra_fid, FeatureExtractor)
from .data import SyntheticSpec, generate_dataset, load_dataset

__all__ = [
    "Tensor", "backward", "no_grad", "SelfAttentionBlock",
    "hinge_d_loss", "hinge_g_loss", "Adam", "TTURConfig",
    "GeneratorConfig", "DiscriminatorConfig", "build_generator",
    "build_discriminator", "sample", "Trainer", "TrainerConfig", "TrainingLog",
    "GaussianStats", "frechet_distance", "inception_score", "matrix_sqrt_psd",
    "intra_fid", "FeatureExtractor", "SyntheticSpec", "generate_dataset",
    "load_dataset", "__version__",
]
