"""Cross-modal hashing under noisy multi-label supervision.

Two hash networks (image, text) are trained with a neighbour-consensus
weighted classification loss plus attraction / repulsion / quantization
terms over multi-label soft pairs, then evaluated by Hamming ranking.
"""

from .dataset import MultimodalDataset, NoiseSpec, SyntheticSpec, generate_synthetic
from .experiment import EvalOptions, ExperimentConfig, run_experiment
from .model import HashModel, ModelConfig, init_parameters
from .trainer import TrainConfig, train

__all__ = [
    "EvalOptions",
    "ExperimentConfig",
    "HashModel",
    "ModelConfig",
    "MultimodalDataset",
    "NoiseSpec",
    "SyntheticSpec",
    "TrainConfig",
    "generate_synthetic",
    "init_parameters",
    "run_experiment",
    "train",
]

__version__ = "0.1.0"
