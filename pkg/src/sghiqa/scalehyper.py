"""Scale embedding, per-layer head generation and the scale-guided model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError, InvalidScaleError
from .perception import EncoderConfig, encode, gap_flatten

SCALE_DIM = 128
HIDDEN_DIMS = (128, 64, 32, 16, 1)
SIGMOID = "sigmoid"
IDENTITY = "identity"
GENERATOR_GAIN = 0.01


@dataclass(frozen=True)
class HeadLayout:
    dims: tuple
    activations: tuple = (SIGMOID, SIGMOID, SIGMOID, SIGMOID, IDENTITY)

    def __post_init__(self):
        if len(self.dims) < 2 or self.dims[-1] != 1:
            raise ConfigurationError(f"head dims must end in 1, got {self.dims}")
        if len(self.activations) != len(self.dims) - 1:
            raise ConfigurationError("need one activation per layer")
        if any(a not in (SIGMOID, IDENTITY) for a in self.activations):
            raise ConfigurationError(f"unsupported activation in {self.activations}")

    @classmethod
    def for_features(cls, feature_dim: int) -> "HeadLayout":
        return cls(dims=(int(feature_dim),) + HIDDEN_DIMS)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def weight_shapes(self) -> list[tuple[int, int]]:
        return [(self.dims[j], self.dims[j + 1]) for j in range(self.n_layers)]

    def bias_lengths(self) -> list[int]:
        return list(self.dims[1:])


@dataclass
class GeneratedHeadParams:
    """Weights ``(din, dout)`` and biases ``(dout,)``, optionally with a leading batch dim."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def index(self, idx) -> "GeneratedHeadParams":
        return GeneratedHeadParams([w[idx] for w in self.weights], [b[idx] for b in self.biases])


def scale_to_input(scales, dtype=torch.float32) -> torch.Tensor:
    """log2 of each scale factor as an (N, 1) tensor."""
    if isinstance(scales, (int, float, Fraction)):
        scales = [scales]
    values = []
    for s in scales:
        s = Fraction(s) if not isinstance(s, float) else s
        if s < 1:
            raise InvalidScaleError(f"scale factor must be >= 1, got {s}")
        values.append(math.log2(s))
    return torch.tensor(values, dtype=dtype).unsqueeze(1)


class ScaleEmbedder(nn.Module):
    """Two fully connected layers with a ReLU in between: log2(scale) -> 128-d."""

    def __init__(self, dim: int = SCALE_DIM):
        super().__init__()
        self.fc1 = nn.Linear(1, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.dim = dim

    def forward(self, log_scale):
        return self.fc2(torch.relu(self.fc1(log_scale)))


def embed_scale(scale, embedder: ScaleEmbedder) -> torch.Tensor:
    p = next(embedder.parameters())
    x = scale_to_input(scale, dtype=p.dtype)
    return embedder(x)[0]


class ParamGenerator(nn.Module):
    """One affine weight generator and one affine bias generator per head layer."""

    def __init__(self, layout: HeadLayout, scale_dim: int = SCALE_DIM, gain: float = GENERATOR_GAIN):
        super().__init__()
        self.layout = layout
        self.scale_dim = scale_dim
        self.weight_gens = nn.ModuleList(
            nn.Linear(scale_dim, din * dout) for din, dout in layout.weight_shapes()
        )
        self.bias_gens = nn.ModuleList(nn.Linear(scale_dim, dout) for dout in layout.bias_lengths())
        self.reset_parameters(gain)

    @torch.no_grad()
    def reset_parameters(self, gain: float = GENERATOR_GAIN):
        # at init the generated head behaves like a default-initialised MLP:
        # weight blocks are later divided by sqrt(fan_in), so U(-1, 1) here
        for (din, _), wg, bg in zip(self.layout.weight_shapes(), self.weight_gens, self.bias_gens):
            nn.init.xavier_uniform_(wg.weight, gain=gain)
            nn.init.uniform_(wg.bias, -1.0, 1.0)
            nn.init.xavier_uniform_(bg.weight, gain=gain)
            bound = 1.0 / math.sqrt(din)
            nn.init.uniform_(bg.bias, -bound, bound)

    def forward(self, S: torch.Tensor) -> GeneratedHeadParams:
        lead = S.shape[:-1]
        weights, biases = [], []
        for (din, dout), wg, bg in zip(self.layout.weight_shapes(), self.weight_gens, self.bias_gens):
            weights.append(wg(S).reshape(*lead, din, dout) / math.sqrt(din))
            biases.append(bg(S))
        return GeneratedHeadParams(weights, biases)


def generate_params(S: torch.Tensor, layout: HeadLayout, generator: ParamGenerator) -> GeneratedHeadParams:
    if generator.layout != layout or S.shape[-1] != generator.scale_dim:
        raise ConfigurationError(
            f"generator built for {generator.layout.dims} / scale dim {generator.scale_dim}, "
            f"got layout {layout.dims} / S of shape {tuple(S.shape)}"
        )
    if not torch.isfinite(S).all():
        raise InvalidInputError("scale representation has non-finite entries")
    return generator(S)


def _activate(x, name):
    return torch.sigmoid(x) if name == SIGMOID else x


def mlp_forward(x: torch.Tensor, weights: Sequence, biases: Sequence, activations: Sequence) -> torch.Tensor:
    """x_{j+1} = act_j(x_j @ w_j + b_j); weights may carry a batch dim matching x."""
    for w, b, act in zip(weights, biases, activations):
        if w.dim() == 3:
            x = torch.bmm(x.unsqueeze(1), w).squeeze(1) + b
        else:
            x = x @ w + b
        x = _activate(x, act)
    return x[..., 0]


def apply_head(V: torch.Tensor, head: GeneratedHeadParams, layout: HeadLayout) -> torch.Tensor:
    """Score(s) of feature vector(s) ``V`` under a generated head."""
    if V.shape[-1] != layout.dims[0]:
        raise InvalidInputError(f"feature vector has length {V.shape[-1]}, head expects {layout.dims[0]}")
    if len(head.weights) != layout.n_layers or len(head.biases) != layout.n_layers:
        raise InvalidInputError("generated head does not match the layout layer count")
    for w, b, shape, n in zip(head.weights, head.biases, layout.weight_shapes(), layout.bias_lengths()):
        if tuple(w.shape[-2:]) != shape or b.shape[-1] != n:
            raise InvalidInputError(f"generated block {tuple(w.shape)} does not match layout {shape}")
    return mlp_forward(V, head.weights, head.biases, layout.activations)


class SGHModel(nn.Module):
    """Encoder -> GAP -> head whose parameters are generated from the scale factor."""

    framework = "sgh"

    def __init__(self, encoder: nn.Module, encoder_config: EncoderConfig):
        super().__init__()
        self.encoder_config = encoder_config
        self.layout = HeadLayout.for_features(encoder_config.feature_dim)
        self.encoder = encoder
        self.embedder = ScaleEmbedder()
        self.generator = ParamGenerator(self.layout)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return gap_flatten(encode(x, self.encoder_config, self.encoder))

    def forward(self, x: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
        # one generated head per distinct scale in the batch
        V = self.features(x)
        uniq, inverse = torch.unique(log_scales[:, 0], return_inverse=True)
        heads = generate_params(self.embedder(uniq.unsqueeze(1)), self.layout, self.generator)
        out = V.new_zeros(V.shape[0])
        for u in range(uniq.shape[0]):
            idx = (inverse == u).nonzero(as_tuple=True)[0]
            out = out.index_copy(0, idx, apply_head(V[idx], heads.index(u), self.layout))
        return out


def predict(patch: torch.Tensor, scale, model: SGHModel) -> torch.Tensor:
    """Scalar score for one normalized (3, S, S) patch at the given scale factor."""
    V = gap_flatten(encode(patch, model.encoder_config, model.encoder))
    S = embed_scale(scale, model.embedder)
    head = generate_params(S, model.layout, model.generator)
    return apply_head(V, head, model.layout)
