"""Point-cloud encoder with local norm pooling and bidirectional selective SSM layers.

Everything runs on a small numpy reverse-mode autodiff (:mod:`mamba3d.tensor`).
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .encoder import EncoderConfig, encoder_forward
from .geometry import PointCloud, chamfer_distance, fps, knn, synth_shapes
from .tensor import Tensor
from .training import TrainHyper, evaluate, pretrain, train_classifier

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "EncoderConfig", "PointCloud", "RunConfig", "Tensor", "TrainHyper",
    "chamfer_distance", "encoder_forward", "evaluate", "fps", "knn", "load_checkpoint",
    "pretrain", "save_checkpoint", "synth_shapes", "train_classifier",
]
