"""Reference backbones for desk-scale experiments.

Both are deliberately small: a three-block convolutional net and a plain
MLP. Full-scale architectures plug in through the same GazeBackbone
contract.
"""

import torch
from torch import nn

from .ensemble import GazeBackbone


class TinyConvBackbone(GazeBackbone):
    """Small convolutional feature extractor with an MLP regression head."""

    architecture_id = "tiny_conv"

    def __init__(self, image_size: int = 32, channels: int = 1, feature_dim: int = 32):
        super().__init__()
        self.image_size = image_size
        self.in_channels = channels
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Conv2d(channels, 8, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.to_features = nn.Linear(16 * 4 * 4, feature_dim)
        self.head = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Linear(feature_dim, 2),
        )

    def extract_features(self, images):
        x = images * 2.0 - 1.0  # pixels arrive in [0, 1]
        x = self.body(x)
        return self.to_features(x.flatten(1))

    def predict_head(self, features):
        return self.head(features)


class MlpBackbone(GazeBackbone):
    """Flatten-and-regress baseline backbone."""

    architecture_id = "mlp"

    def __init__(self, image_size: int = 32, channels: int = 1, feature_dim: int = 32):
        super().__init__()
        self.image_size = image_size
        self.in_channels = channels
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Linear(channels * image_size * image_size, 64),
            nn.ReLU(),
            nn.Linear(64, feature_dim),
        )
        self.head = nn.Linear(feature_dim, 2)

    def extract_features(self, images):
        x = images * 2.0 - 1.0
        return self.body(x.flatten(1))

    def predict_head(self, features):
        return self.head(features)


BACKBONES = {
    TinyConvBackbone.architecture_id: TinyConvBackbone,
    MlpBackbone.architecture_id: MlpBackbone,
}


def build_backbone(name: str, **kwargs) -> GazeBackbone:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; available: {sorted(BACKBONES)}")
    return BACKBONES[name](**kwargs)


def backbone_factory(architecture: dict):
    """Turn an architecture description {'name': ..., kwargs...} into a factory."""
    arch = dict(architecture)
    name = arch.pop("name")
    return lambda: build_backbone(name, **arch)
