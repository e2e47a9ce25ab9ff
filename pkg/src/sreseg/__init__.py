"""Symmetric rotation-equivariant convolutions and rotation-consistent unsupervised segmentation."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .clustering import PCA, DiagonalGaussianMixture, KMeans, KNeighborsClassifier
from .model import CNNClassifier, ModelConfig, Network, TrainConfig, build_model, train
from .pipeline import UnsupervisedSegmenter

__all__ = [
    "CNNClassifier",
    "DiagonalGaussianMixture",
    "KMeans",
    "KNeighborsClassifier",
    "ModelConfig",
    "Network",
    "PCA",
    "TrainConfig",
    "UnsupervisedSegmenter",
    "build_model",
    "train",
    "__version__",
]
