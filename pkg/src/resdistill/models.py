"""Small convolutional backbones and the architecture registry.

Backbones return (embedding, logits); adaptive pooling lets the same
architecture consume different input resolutions.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional

import torch
from torch import nn

_REGISTRY: Dict[str, Callable] = {}


def register(name: str):
    def wrap(fn):
        _REGISTRY[name] = fn
        return fn
    return wrap


def registered_architectures():
    return sorted(_REGISTRY)


def build_model(name: str, num_classes: int, embed_dim: int,
                in_channels: int = 1,
                generator: Optional[torch.Generator] = None) -> nn.Module:
    if name not in _REGISTRY:
        raise ValueError(f"unknown architecture {name!r}; known: {registered_architectures()}")
    model = _REGISTRY[name](num_classes=num_classes, embed_dim=embed_dim,
                            in_channels=in_channels)
    _seed_init(model, generator)
    return model


def _seed_init(model: nn.Module, generator: Optional[torch.Generator]):
    # re-run default init layer by layer under an explicit generator
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.dim() > 2 else 1)
            bound = 1.0 / (fan_in ** 0.5)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


INPUT_MEAN = 0.5
INPUT_STD = 0.25


class ConvBackbone(nn.Module):
    """Conv stack + adaptive pool + linear embedding + linear classifier.

    Inputs are pixel images in [0, 1]; forward() centers them so plain SGD
    stays well conditioned.
    """

    def __init__(self, channels, num_classes: int, embed_dim: int, in_channels: int = 1):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, kernel_size=3, padding=1), nn.ReLU()]
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.embed = nn.Linear(prev * 4, embed_dim)
        self.classifier = nn.Linear(embed_dim, num_classes)
        self.embed_dim = embed_dim
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor):
        x = (x - INPUT_MEAN) / INPUT_STD
        feats = self.pool(self.features(x)).flatten(1)
        emb = self.embed(feats)
        return emb, self.classifier(emb)

    def embeddings(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]


@register("tiny_cnn")
def _tiny_cnn(num_classes: int, embed_dim: int, in_channels: int = 1):
    return ConvBackbone([16, 32], num_classes, embed_dim, in_channels)


@register("small_cnn")
def _small_cnn(num_classes: int, embed_dim: int, in_channels: int = 1):
    return ConvBackbone([32, 64, 64], num_classes, embed_dim, in_channels)


@register("linear_probe_ready")
def _linear(num_classes: int, embed_dim: int, in_channels: int = 1):
    # degenerate backbone useful in tests: flatten + linear embedding
    return FlattenBackbone(num_classes, embed_dim, in_channels)


class FlattenBackbone(nn.Module):
    def __init__(self, num_classes: int, embed_dim: int, in_channels: int = 1):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.embed = nn.Linear(in_channels * 16, embed_dim)
        self.classifier = nn.Linear(embed_dim, num_classes)
        self.embed_dim = embed_dim
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor):
        x = (x - INPUT_MEAN) / INPUT_STD
        emb = self.embed(self.pool(x).flatten(1))
        return emb, self.classifier(emb)

    def embeddings(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]
