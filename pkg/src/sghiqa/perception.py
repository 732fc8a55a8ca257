"""Content perception: encoder feature maps pooled into a feature vector."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import InvalidConfigError, InvalidInputError

BUILTIN = "builtin_small_cnn"
EXTERNAL = "external"

SMALL_CNN_CHANNELS = (16, 32, 64, 128)


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = BUILTIN
    feature_dim: int = 128
    input_size: int = 224

    def __post_init__(self):
        if self.kind not in (BUILTIN, EXTERNAL):
            raise InvalidConfigError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim < 1 or self.input_size < 1:
            raise InvalidConfigError("feature_dim and input_size must be positive")
        if self.kind == BUILTIN and self.feature_dim != SMALL_CNN_CHANNELS[-1]:
            raise InvalidConfigError(
                f"builtin encoder has feature_dim {SMALL_CNN_CHANNELS[-1]}, got {self.feature_dim}"
            )


class SmallCNN(nn.Module):
    """Four 3x3 conv blocks, each ReLU + stride-2 downsampling: 224 -> 14."""

    def __init__(self, channels=SMALL_CNN_CHANNELS):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.net = nn.Sequential(*layers)
        self.out_channels = c_in
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                # variance-preserving for ReLU; the framework default shrinks
                # pooled features ~15x over four blocks
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.net(x)


class ExternalEncoder(nn.Module):
    """Wraps any callable mapping (N, 3, H, W) to (N, C, H', W')."""

    def __init__(self, fn: Callable, feature_dim: int):
        super().__init__()
        self.fn = fn
        self.out_channels = feature_dim
        if isinstance(fn, nn.Module):
            self.inner = fn

    def forward(self, x):
        return self.fn(x)


def build_encoder(config: EncoderConfig, external: Callable | None = None) -> nn.Module:
    if config.kind == BUILTIN:
        return SmallCNN()
    if external is None:
        raise InvalidConfigError("external encoder requested but no callable supplied")
    return ExternalEncoder(external, config.feature_dim)


def to_tensor(patches, mean: float = 0.5, std: float = 0.5, dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 patches in [0, 1] into a normalized (N, 3, H, W) tensor."""
    if isinstance(patches, np.ndarray) and patches.ndim == 3:
        patches = [patches]
    arr = np.stack([np.asarray(p) for p in patches]).astype(np.float64 if dtype == torch.float64 else np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected HxWx3 patches, got array of shape {arr.shape}")
    arr = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def encode(patch: torch.Tensor, config: EncoderConfig, encoder: nn.Module) -> torch.Tensor:
    """Feature map of a normalized patch, (3, S, S) or (N, 3, S, S) -> (.., C, H', W')."""
    single = patch.dim() == 3
    x = patch.unsqueeze(0) if single else patch
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise InvalidInputError(
            f"expected patch of shape (3, {config.input_size}, {config.input_size}), got {tuple(patch.shape)}"
        )
    fmap = encoder(x)
    if fmap.dim() != 4 or fmap.shape[1] != config.feature_dim:
        raise InvalidInputError(f"encoder produced {tuple(fmap.shape)}, expected {config.feature_dim} channels")
    return fmap[0] if single else fmap


def gap_flatten(feature_map: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean; (C, H, W) -> (C,) and (N, C, H, W) -> (N, C)."""
    if feature_map.dim() not in (3, 4):
        raise InvalidInputError(f"expected a 3-D feature map, got shape {tuple(feature_map.shape)}")
    if feature_map.shape[-1] == 0 or feature_map.shape[-2] == 0 or feature_map.shape[-3] == 0:
        raise InvalidInputError("feature map has an empty extent")
    return feature_map.mean(dim=(-2, -1))
