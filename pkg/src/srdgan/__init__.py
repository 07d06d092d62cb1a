"""Dual-GAN super-resolution with a learned high-to-low degradation model."""
from .imaging import Image, NoiseSpec
from .losses import LossReport, LossWeights
from .networks import FeatureExtractor, NetworkSpec, NetworkState, build_network
from .training import TrainPlan, TrainState, run

__all__ = [
    "Image", "NoiseSpec", "LossReport", "LossWeights", "FeatureExtractor", "NetworkSpec",
    "NetworkState", "build_network", "TrainPlan", "TrainState", "run",
]
__version__ = "0.1.0"
