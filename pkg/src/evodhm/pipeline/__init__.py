from .config import PipelineConfig
from .dataset import Dataset, generate_synthetic_dataset, load_dataset, save_dataset
from .networks import (AlignmentResult, ClassicDHMNetwork, FastDHMNetwork, MeanShapePredictor,
                       build_network, classic_forward, fast_forward, load_network)
from .training import TrainingLog, batch_loss, train

__all__ = [
    "AlignmentResult", "ClassicDHMNetwork", "Dataset", "FastDHMNetwork", "MeanShapePredictor",
    "PipelineConfig", "TrainingLog", "batch_loss", "build_network", "classic_forward",
    "fast_forward", "generate_synthetic_dataset", "load_dataset", "load_network", "save_dataset",
    "train",
]
