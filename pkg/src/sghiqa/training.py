"""Loss, training protocol, evaluation and the three comparison frameworks."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import __version__
from .datakit import (
    DatasetManifest,
    PatchSpec,
    SplitPlan,
    load_images,
    make_split,
    random_origins,
    tile_eval_patches,
)
from .errors import (
    CheckpointFormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidSplitError,
)
from .evalstats import correlations
from .perception import EncoderConfig, build_encoder, encode, gap_flatten, to_tensor
from .scalehyper import (
    SCALE_DIM,
    HeadLayout,
    ScaleEmbedder,
    SGHModel,
    mlp_forward,
    scale_to_input,
)

FRAMEWORKS = ("sgh", "fusion", "blind")
# parameter groups each framework must carry in its checkpoint
FRAMEWORK_GROUPS = {
    "sgh": ("encoder", "embedder", "generator"),
    "fusion": ("encoder", "embedder", "head"),
    "blind": ("encoder", "head"),
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_patches: int = 64
    records_per_step: int = 8
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    framework: str = "sgh"
    patch_size: int = 224
    freeze_encoder: bool = False
    norm_mean: float = 0.5
    norm_std: float = 0.5
    workers: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_patches < 1 or self.records_per_step < 1:
            raise InvalidConfigError("epochs, batch_patches and records_per_step must be >= 1")
        if self.optimizer != "adam":
            raise InvalidConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.framework not in FRAMEWORKS:
            raise InvalidConfigError(f"framework must be one of {FRAMEWORKS}")
        if self.patch_size < 1 or self.norm_std <= 0:
            raise InvalidConfigError("patch_size must be positive and norm_std > 0")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InvalidConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def mae_loss(predictions, targets):
    """Mean absolute error; works on tensors (differentiable) and array-likes."""
    if not isinstance(predictions, torch.Tensor):
        p = np.asarray(predictions, dtype=np.float64).ravel()
        t = np.asarray(targets, dtype=np.float64).ravel()
        if p.size == 0 or p.shape != t.shape:
            raise InvalidInputError(f"need equal nonzero lengths, got {p.size} and {t.size}")
        return float(np.mean(np.abs(p - t)))
    if predictions.numel() == 0 or predictions.shape != targets.shape:
        raise InvalidInputError(
            f"need equal nonzero lengths, got {tuple(predictions.shape)} and {tuple(targets.shape)}"
        )
    return (predictions - targets).abs().mean()


# ---------------------------------------------------------------------------
# fixed-head frameworks


class FixedHead(nn.Module):
    """Plain MLP with weights stored as (din, dout) blocks."""

    def __init__(self, layout: HeadLayout):
        super().__init__()
        self.layout = layout
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for din, dout in layout.weight_shapes():
            bound = 1.0 / math.sqrt(din)
            self.weights.append(nn.Parameter(torch.empty(din, dout).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.empty(dout).uniform_(-bound, bound)))

    def forward(self, x):
        return mlp_forward(x, list(self.weights), list(self.biases), self.layout.activations)


def _check_head(head: FixedHead, n_in: int):
    if head.layout.dims[0] != n_in:
        raise InvalidInputError(f"head expects input length {head.layout.dims[0]}, got {n_in}")


def fusion_forward(V: torch.Tensor, S: torch.Tensor, head: FixedHead) -> torch.Tensor:
    """Score from the concatenation [V, S] through a fixed MLP."""
    if S.shape[-1] != SCALE_DIM:
        raise InvalidInputError(f"scale representation must have length {SCALE_DIM}, got {S.shape[-1]}")
    x = torch.cat([V, S], dim=-1)
    _check_head(head, x.shape[-1])
    return head(x)


def blind_forward(V: torch.Tensor, head: FixedHead) -> torch.Tensor:
    _check_head(head, V.shape[-1])
    return head(V)


class FusionModel(nn.Module):
    framework = "fusion"

    def __init__(self, encoder: nn.Module, encoder_config: EncoderConfig):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = encoder
        self.embedder = ScaleEmbedder()
        self.head = FixedHead(HeadLayout.for_features(encoder_config.feature_dim + SCALE_DIM))

    def features(self, x):
        return gap_flatten(encode(x, self.encoder_config, self.encoder))

    def forward(self, x, log_scales):
        return fusion_forward(self.features(x), self.embedder(log_scales), self.head)


class BlindModel(nn.Module):
    framework = "blind"

    def __init__(self, encoder: nn.Module, encoder_config: EncoderConfig):
        super().__init__()
        self.encoder_config = encoder_config
        self.encoder = encoder
        self.head = FixedHead(HeadLayout.for_features(encoder_config.feature_dim))

    def features(self, x):
        return gap_flatten(encode(x, self.encoder_config, self.encoder))

    def forward(self, x, log_scales=None):
        return blind_forward(self.features(x), self.head)


MODEL_CLASSES = {"sgh": SGHModel, "fusion": FusionModel, "blind": BlindModel}


def build_model(framework: str, encoder_config: EncoderConfig, seed: int = 0,
                external_encoder: Callable | None = None) -> nn.Module:
    if framework not in MODEL_CLASSES:
        raise InvalidConfigError(f"framework must be one of {FRAMEWORKS}")
    torch.manual_seed(seed)
    return MODEL_CLASSES[framework](build_encoder(encoder_config, external_encoder), encoder_config)


# ---------------------------------------------------------------------------
# checkpoint container: MAGIC | u64 header length | JSON header | float32 LE blocks

MAGIC = b"SGHCKPT1"


@dataclass
class Checkpoint:
    framework: str
    config: TrainConfig
    encoder_config: EncoderConfig
    state: OrderedDict
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def groups(self) -> list[str]:
        return sorted({name.split(".", 1)[0] for name in self.state})

    def validate(self):
        need = set(FRAMEWORK_GROUPS[self.framework])
        have = set(self.groups())
        if need != have:
            raise CheckpointFormatError(
                f"{self.framework} checkpoint must hold groups {sorted(need)}, found {sorted(have)}"
            )

    def header(self) -> dict:
        blocks, offset = [], 0
        for name, t in self.state.items():
            nbytes = t.numel() * 4
            blocks.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return {
            "format": "sgh-checkpoint",
            "tool_version": __version__,
            "framework": self.framework,
            "config": self.config.to_json(),
            "encoder": dataclasses.asdict(self.encoder_config),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "history": self.history,
            "meta": self.meta,
            "dtype": "float32-le",
            "blocks": blocks,
        }

    def to_bytes(self) -> bytes:
        self.validate()
        head = json.dumps(self.header(), sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<Q", len(head)), head]
        for t in self.state.values():
            parts.append(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        head = json.loads(data[16:16 + n].decode())
        base = 16 + n
        state = OrderedDict()
        for blk in head["blocks"]:
            raw = data[base + blk["offset"]: base + blk["offset"] + blk["nbytes"]]
            if len(raw) != blk["nbytes"]:
                raise CheckpointFormatError(f"truncated block {blk['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(blk["shape"]).copy()
            state[blk["name"]] = torch.from_numpy(arr)
        ckpt = cls(head["framework"], TrainConfig.from_json(head["config"]),
                   EncoderConfig(**head["encoder"]), state, head["epoch"],
                   head.get("rng_state", {}), head.get("history", []), head.get("meta", {}))
        ckpt.validate()
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_model(cls, model: nn.Module, config: TrainConfig, **kw) -> "Checkpoint":
        state = OrderedDict((k, v.detach().clone().to(torch.float32)) for k, v in model.state_dict().items())
        return cls(model.framework, config, model.encoder_config, state, **kw)

    def to_model(self, external_encoder: Callable | None = None) -> nn.Module:
        model = build_model(self.framework, self.encoder_config, 0, external_encoder)
        model.load_state_dict(self.state)
        model.eval()
        return model


# ---------------------------------------------------------------------------
# training


def _split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _records_side(manifest: DatasetManifest, split: SplitPlan, side: str):
    recs = split.select(manifest, side)
    if not recs:
        raise InvalidSplitError(f"the {side} side of the split is empty")
    return recs


def steps_per_epoch(n_records: int, records_per_step: int = 8) -> int:
    return math.ceil(n_records / records_per_step)


def draw_batch(images, log_scales, labels, config: TrainConfig, rng: np.random.Generator):
    """Sample ``records_per_step`` records and split ``batch_patches`` crops among them."""
    n = len(images)
    k = min(config.records_per_step, config.batch_patches)
    picks = rng.choice(n, size=k, replace=n < k)
    s = config.patch_size
    patches, scales, targets = [], [], []
    for idx, count in zip(picks, _split_counts(config.batch_patches, k)):
        img = images[idx]
        for y, x in random_origins(img.shape[0], img.shape[1], s, count, rng):
            patches.append(img[y:y + s, x:x + s])
        scales += [log_scales[idx]] * count
        targets += [labels[idx]] * count
    x = to_tensor(patches, config.norm_mean, config.norm_std)
    return x, torch.tensor(scales, dtype=torch.float32).unsqueeze(1), torch.tensor(targets, dtype=torch.float32)


def make_optimizer(model: nn.Module, config: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=config.learning_rate, betas=config.betas,
                            eps=config.eps, weight_decay=config.weight_decay)


def train_step(model, optimizer, x, log_scales, targets) -> float:
    optimizer.zero_grad()
    loss = mae_loss(model(x, log_scales), targets)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train(manifest: DatasetManifest, split: SplitPlan, config: TrainConfig,
          encoder_config: EncoderConfig | None = None, external_encoder: Callable | None = None,
          log: Callable | None = None) -> Checkpoint:
    """Fit one framework on the training side of ``split``.

    Each epoch runs ceil(n_train / records_per_step) Adam steps on
    ``batch_patches`` random crops. Everything is seeded from
    ``config.seed``; the result is a deterministic function of the inputs.
    """
    encoder_config = encoder_config or EncoderConfig(input_size=config.patch_size)
    if encoder_config.input_size != config.patch_size:
        raise InvalidConfigError("encoder input_size must equal patch_size")
    records = _records_side(manifest, split, "train")
    images = load_images([manifest.resolve(r) for r in records], config.workers)
    log_scales = [float(scale_to_input(r.scale, torch.float64)[0, 0]) for r in records]
    labels = [manifest.normalized_label(r) for r in records]

    model = build_model(config.framework, encoder_config, config.seed, external_encoder)
    if config.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    model.train()
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)

    history = []
    n_steps = steps_per_epoch(len(records), config.records_per_step)
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(n_steps):
            batch = draw_batch(images, log_scales, labels, config, rng)
            total += train_step(model, optimizer, *batch)
        history.append(total / n_steps)
        if log:
            log(f"[{config.framework} seed={config.seed}] epoch {epoch + 1}/{config.epochs} loss {history[-1]:.5f}")
    model.eval()
    return Checkpoint.from_model(model, config, epoch=config.epochs,
                                 rng_state=rng.bit_generator.state, history=history)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    seed: int
    framework: str
    srcc: float
    plcc: float
    krcc: float
    n_test: int
    per_image_scores: list

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@torch.no_grad()
def score_image(model: nn.Module, image: np.ndarray, scale, spec: PatchSpec,
                config: TrainConfig, chunk: int = 64) -> tuple[float, list[float]]:
    """Mean of the per-patch scores over the edge-clamped evaluation grid."""
    patches = tile_eval_patches(image, spec)
    log_scale = float(scale_to_input(scale, torch.float64)[0, 0])
    scores = []
    for i in range(0, len(patches), chunk):
        x = to_tensor(patches[i:i + chunk], config.norm_mean, config.norm_std)
        s = torch.full((x.shape[0], 1), log_scale, dtype=torch.float32)
        scores += [float(v) for v in model(x, s)]
    return float(np.mean(np.asarray(scores, dtype=np.float64))), scores


def evaluate(manifest: DatasetManifest, split: SplitPlan, checkpoint: Checkpoint,
             spec: PatchSpec | None = None, external_encoder: Callable | None = None) -> EvalReport:
    config = checkpoint.config
    spec = spec or PatchSpec(size=config.patch_size)
    if spec.size != checkpoint.encoder_config.input_size:
        raise InvalidConfigError(
            f"patch size {spec.size} does not match the encoder input size {checkpoint.encoder_config.input_size}"
        )
    records = _records_side(manifest, split, "test")
    model = checkpoint.to_model(external_encoder)
    images = load_images([manifest.resolve(r) for r in records], config.workers)
    per_image, preds, targets = [], [], []
    for rec, img in zip(records, images):
        score, patch_scores = score_image(model, img, rec.scale, spec, config)
        target = manifest.normalized_label(rec)
        preds.append(score)
        targets.append(target)
        per_image.append({"sr_path": rec.sr_path, "content_id": rec.content_id,
                          "method_id": rec.method_id, "scale": str(rec.scale),
                          "label": target, "score": score, "n_patches": len(patch_scores)})
    metrics = correlations(preds, targets)
    return EvalReport(split.seed, checkpoint.framework, metrics["srcc"], metrics["plcc"],
                      metrics["krcc"], len(records), per_image)


def run_trials(manifest: DatasetManifest, config: TrainConfig, n_trials: int = 10,
               spec: PatchSpec | None = None, ratio: float = 0.8, split_key: str = "content",
               encoder_config: EncoderConfig | None = None, log: Callable | None = None) -> list[EvalReport]:
    """Split/train/evaluate once per seed 0..n_trials-1."""
    if n_trials < 1:
        raise InvalidConfigError("n_trials must be >= 1")
    reports = []
    for seed in range(n_trials):
        split = make_split(manifest, seed, ratio, split_key)
        ckpt = train(manifest, split, config.replace(seed=seed), encoder_config, log=log)
        reports.append(evaluate(manifest, split, ckpt, spec))
        if log:
            log(f"[{config.framework}] trial {seed}: srcc {reports[-1].srcc:.4f}")
    return reports


def summarize_trials(reports: list[EvalReport]) -> dict:
    out = {"n_trials": len(reports)}
    for key in ("srcc", "plcc", "krcc"):
        vals = [getattr(r, key) for r in reports]
        out[key] = {"values": vals, "mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out
