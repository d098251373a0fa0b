"""Test-time intensity consistency adaptation for shadow segmentation."""

from .adapt import AdaptConfig, TrainConfig, adapt, predict, train_supervised
from .data import SamplePair, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .geometry import AugmentConfig, ViewTransform, apply_transform, sample_view_transform, to_canonical
from .losses import LossWeights, tica_loss
from .metrics import ConfusionCounts, ber, evaluate
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
