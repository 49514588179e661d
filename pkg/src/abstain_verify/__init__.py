"""Certified robustness for ReLU classifiers with several abstain classes."""
from .crown import CrownConfig, verify_crown
from .data import Dataset, toy_dataset
from .ibp import InputRegion, propagate
from .nn import Network, forward, load_network, merge_abstains, predict, random_network, save_network
from .trainer import TrainConfig, train
from .verify import SimplexSettings, VerificationCertificate, verify_ibp

__version__ = "0.1.0"

__all__ = [
    "CrownConfig", "Dataset", "InputRegion", "Network", "SimplexSettings", "TrainConfig",
    "VerificationCertificate", "forward", "load_network", "merge_abstains", "predict", "propagate",
    "random_network", "save_network", "toy_dataset", "train", "verify_crown", "verify_ibp",
]
