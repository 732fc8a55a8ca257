"""Dataset manifests, splits, patch extraction and the synthetic SR benchmark."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    CannotSplitError,
    InvalidConfigError,
    InvalidRecordError,
    TooSmallImageError,
)

HIGHER_IS_BETTER = "higher_is_better"
HIGHER_IS_WORSE = "higher_is_worse"
POLARITIES = (HIGHER_IS_BETTER, HIGHER_IS_WORSE)

SYNTH_METHOD_ID = "synthetic-bilinear"
SYNTH_SCALES = frozenset({2, 3, 4, 5, 6, 8})
# PSNR (dB) -> [0, 1] squashing used for synthetic labels
SYNTH_PSNR_CENTER = 26.0
SYNTH_PSNR_WIDTH = 4.0


def derive_scale(hr_width: int, lr_width: int) -> Fraction:
    """Scale factor of an SR image as the exact ratio of HR to LR width."""
    if lr_width < 1:
        raise InvalidRecordError(f"lr_width must be >= 1, got {lr_width}")
    if hr_width < lr_width:
        raise InvalidRecordError(f"hr_width {hr_width} is smaller than lr_width {lr_width}")
    return Fraction(int(hr_width), int(lr_width))


def parse_scale(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10_000)
    return Fraction(str(value))


def format_scale(scale: Fraction) -> str:
    return str(Fraction(scale))


@dataclass(frozen=True)
class SampleRecord:
    sr_path: str
    lr_width: int
    hr_width: int
    scale: Fraction
    label: float
    content_id: str
    method_id: str

    def __post_init__(self):
        expected = derive_scale(self.hr_width, self.lr_width)
        if Fraction(self.scale) != expected:
            raise InvalidRecordError(
                f"{self.sr_path}: scale {self.scale} != {self.hr_width}/{self.lr_width}"
            )
        if not self.content_id or not self.method_id:
            raise InvalidRecordError(f"{self.sr_path}: content_id and method_id must be non-empty")

    @classmethod
    def create(cls, sr_path, lr_width, hr_width, label, content_id, method_id):
        return cls(str(sr_path), int(lr_width), int(hr_width),
                   derive_scale(hr_width, lr_width), float(label),
                   str(content_id), str(method_id))

    def to_json(self) -> dict:
        return {
            "sr_path": self.sr_path,
            "lr_width": self.lr_width,
            "hr_width": self.hr_width,
            "scale": format_scale(self.scale),
            "label": self.label,
            "content_id": self.content_id,
            "method_id": self.method_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        try:
            return cls(
                sr_path=str(obj["sr_path"]),
                lr_width=int(obj["lr_width"]),
                hr_width=int(obj["hr_width"]),
                scale=parse_scale(obj.get("scale", Fraction(int(obj["hr_width"]), max(int(obj["lr_width"]), 1)))),
                label=float(obj["label"]),
                content_id=str(obj["content_id"]),
                method_id=str(obj["method_id"]),
            )
        except KeyError as exc:
            raise InvalidRecordError(f"record is missing field {exc}") from None


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    label_range: tuple[float, float]
    label_polarity: str
    name: str
    root: Path = field(default_factory=Path, compare=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.label_range)
        if not lo < hi:
            raise InvalidRecordError(f"label_range must satisfy lo < hi, got {self.label_range}")
        self.label_range = (lo, hi)
        if self.label_polarity not in POLARITIES:
            raise InvalidRecordError(f"label_polarity must be one of {POLARITIES}")
        for rec in self.records:
            if not lo <= rec.label <= hi:
                raise InvalidRecordError(
                    f"{rec.sr_path}: label {rec.label} outside label_range [{lo}, {hi}]"
                )

    def content_ids(self) -> list[str]:
        return sorted({r.content_id for r in self.records})

    def method_ids(self) -> list[str]:
        return sorted({r.method_id for r in self.records})

    def scales(self) -> list[Fraction]:
        return sorted({r.scale for r in self.records})

    def resolve(self, record: SampleRecord) -> Path:
        return self.root / record.sr_path

    def normalized_label(self, record: SampleRecord) -> float:
        """Label mapped to [0, 1] with "higher is better" orientation."""
        lo, hi = self.label_range
        value = (record.label - lo) / (hi - lo)
        if self.label_polarity == HIGHER_IS_WORSE:
            value = 1.0 - value
        return value

    def header(self) -> dict:
        head = {
            "name": self.name,
            "label_range": list(self.label_range),
            "label_polarity": self.label_polarity,
        }
        if self.meta:
            head["meta"] = self.meta
        return head

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise InvalidRecordError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if "records" in head or "sr_path" in head:
            raise InvalidRecordError(f"{path}: first line must be the header object")
        records = [SampleRecord.from_json(json.loads(ln)) for ln in lines[1:]]
        return cls(
            records=records,
            label_range=tuple(head["label_range"]),
            label_polarity=head["label_polarity"],
            name=head.get("name", path.stem),
            root=path.parent,
            meta=head.get("meta", {}),
        )


@dataclass(frozen=True)
class SplitPlan:
    train_ids: frozenset
    test_ids: frozenset
    seed: int
    ratio: float
    key: str = "content"

    def side_of(self, record: SampleRecord) -> str:
        ident = record.content_id if self.key == "content" else record.method_id
        if ident in self.train_ids:
            return "train"
        if ident in self.test_ids:
            return "test"
        raise InvalidRecordError(f"{self.key} id {ident!r} is not covered by the split")

    def select(self, manifest: DatasetManifest, side: str) -> list[SampleRecord]:
        return [r for r in manifest.records if self.side_of(r) == side]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "key": self.key,
            "train_ids": sorted(self.train_ids),
            "test_ids": sorted(self.test_ids),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPlan":
        return cls(frozenset(obj["train_ids"]), frozenset(obj["test_ids"]),
                   int(obj["seed"]), float(obj["ratio"]), obj.get("key", "content"))


def make_split(manifest: DatasetManifest, seed: int, ratio: float = 0.8,
               key: str = "content") -> SplitPlan:
    """Partition the manifest by content id (or by method id with ``key="method"``).

    Deterministic in (manifest, seed). The training side holds
    ``round(ratio * n)`` ids, clamped so both sides are nonempty.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError(f"ratio must lie in (0, 1), got {ratio}")
    if key == "content":
        ids = manifest.content_ids()
    elif key == "method":
        ids = manifest.method_ids()
    else:
        raise InvalidConfigError(f"unknown split key {key!r}")
    if len(ids) < 2:
        raise CannotSplitError(f"need at least 2 distinct {key} ids, found {len(ids)}")
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = frozenset(ids[i] for i in order[:n_train])
    test = frozenset(ids[i] for i in order[n_train:])
    return SplitPlan(train, test, int(seed), float(ratio), key)


@dataclass(frozen=True)
class PatchSpec:
    size: int = 224
    stride: int = 64
    count: int = 64

    def __post_init__(self):
        if self.size <= 0 or self.stride <= 0 or self.count <= 0:
            raise InvalidConfigError(f"patch size, stride and count must be positive: {self}")


def _check_fits(image: np.ndarray, size: int):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise TooSmallImageError(f"image {h}x{w} is smaller than patch size {size}")


def random_origins(height: int, width: int, size: int, count: int, rng) -> np.ndarray:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ys = rng.integers(0, height - size + 1, size=count)
    xs = rng.integers(0, width - size + 1, size=count)
    return np.stack([ys, xs], axis=1)


def sample_training_patches(image: np.ndarray, spec: PatchSpec, rng_state) -> list[np.ndarray]:
    """Uniformly random ``spec.size`` crops; ``rng_state`` is a seed or a Generator."""
    _check_fits(image, spec.size)
    origins = random_origins(image.shape[0], image.shape[1], spec.size, spec.count, rng_state)
    s = spec.size
    return [image[y:y + s, x:x + s] for y, x in origins]


def axis_origins(dim: int, size: int, stride: int) -> list[int]:
    if dim < size:
        raise TooSmallImageError(f"dimension {dim} is smaller than patch size {size}")
    last = dim - size
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def tile_origins(height: int, width: int, spec: PatchSpec) -> list[tuple[int, int]]:
    ys = axis_origins(height, spec.size, spec.stride)
    xs = axis_origins(width, spec.size, spec.stride)
    return [(y, x) for y in ys for x in xs]


def tile_eval_patches(image: np.ndarray, spec: PatchSpec) -> list[np.ndarray]:
    """Row-major grid of patches; the last origin per axis is clamped to the edge."""
    _check_fits(image, spec.size)
    s = spec.size
    return [image[y:y + s, x:x + s] for y, x in tile_origins(image.shape[0], image.shape[1], spec)]


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def load_images(paths: Sequence, workers: int = 1) -> list[np.ndarray]:
    """Decode images in order; the result does not depend on ``workers``."""
    if workers <= 1:
        return [load_image(p) for p in paths]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_image, paths))


def save_png(path, image: np.ndarray) -> None:
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.clip(np.rint(image * 255.0), 0, 255) / 255.0).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic benchmark


def area_downsample(image: np.ndarray, scale: int) -> np.ndarray:
    h, w, c = image.shape
    if h % scale or w % scale:
        raise InvalidConfigError(f"image {h}x{w} is not divisible by scale {scale}")
    return image.reshape(h // scale, scale, w // scale, scale, c).mean(axis=(1, 3))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edges clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_upsample(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = image.shape
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    rows = image[y0] * (1 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(reference, np.float64) - np.asarray(test, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def squash_psnr(value: float) -> float:
    """Monotone map of PSNR in dB onto [0, 1]."""
    if math.isinf(value):
        return 1.0
    return 1.0 / (1.0 + math.exp(-(value - SYNTH_PSNR_CENTER) / SYNTH_PSNR_WIDTH))


def degrade(image: np.ndarray, scale: int) -> tuple[np.ndarray, int, int]:
    """Area-downsample then bilinear-upsample; returns (sr, lr_width, hr_width).

    The source is cropped to the largest size divisible by ``scale`` first so
    that the scale factor is exactly ``hr_width / lr_width``.
    """
    h, w = image.shape[:2]
    hh, ww = (h // scale) * scale, (w // scale) * scale
    hr = image[:hh, :ww]
    lr = area_downsample(hr, scale)
    sr = bilinear_upsample(lr, hh, ww)
    return sr, ww // scale, ww


@dataclass(frozen=True)
class SourceImage:
    content_id: str
    pixels: np.ndarray


def _dead_leaves(rng: np.random.Generator, size: int, r_min: float, r_max: float,
                 texture: float, decay: float = 3.0) -> np.ndarray:
    """Occluding random disks with power-law radii, front to back."""
    img = np.full((size, size, 3), 0.5)
    filled = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = r_min ** (1 - decay), r_max ** (1 - decay)
    for _ in range(40_000):
        if filled.all():
            break
        r = (lo + rng.uniform() * (hi - lo)) ** (1 / (1 - decay))
        cy, cx = rng.uniform(-r_max / 2, size + r_max / 2, 2)
        y0, y1 = int(max(cy - r, 0)), int(min(cy + r + 1, size))
        x0, x1 = int(max(cx - r, 0)), int(min(cx + r + 1, size))
        colour = rng.uniform(0.1, 0.9, 3)
        if y0 >= y1 or x0 >= x1:
            continue
        disk = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2 < r * r
        new = disk & ~filled[y0:y1, x0:x1]
        img[y0:y1, x0:x1][new] = colour
        filled[y0:y1, x0:x1] |= new
    img += texture * rng.standard_normal((size, size, 1))
    return np.clip(img, 0.0, 1.0)


def procedural_sources(n: int, size: int = 256, seed: int = 0, max_defocus: float = 0.5,
                       min_contrast: float = 1.0, detail: tuple = (2.5, 3.5),
                       max_grain: float = 0.0) -> list[SourceImage]:
    """Deterministic dead-leaves images with per-image detail, grain, defocus and contrast.

    Defocus (Gaussian sigma uniform on [0, max_defocus]) softens some
    sources before any degradation, so sharpness alone does not reveal the
    scale factor. Contrast (log-uniform on [min_contrast, 1]) shifts the
    reconstruction error of a source at every scale.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        r_min = float(np.exp(rng.uniform(np.log(detail[0]), np.log(detail[1]))))
        texture = float(rng.uniform(0.0, max_grain))
        sigma = float(rng.uniform(0.0, max_defocus))
        contrast = float(np.exp(rng.uniform(np.log(min_contrast), 0.0)))
        pixels = _dead_leaves(rng, size, r_min, size / 3, texture)
        if sigma > 0:
            pixels = gaussian_filter(pixels, (sigma, sigma, 0), mode="reflect")
        pixels = 0.5 + contrast * (pixels - 0.5)
        out.append(SourceImage(f"src{i:03d}", quantize(pixels)))
    return out


def load_sources(paths: Iterable) -> list[SourceImage]:
    return [SourceImage(Path(p).stem, load_image(p).astype(np.float64)) for p in paths]


def synth_benchmark(source_images: Sequence[SourceImage], scales: Iterable[int], seed: int,
                    out_dir, name: str = "synthetic") -> DatasetManifest:
    """Write SR-like images for every (source, scale) pair plus ``manifest.jsonl``.

    Labels are squashed PSNR of the saved reconstruction against the
    (cropped) source, so they are "higher is better" in [0, 1].
    """
    scales = sorted({int(s) for s in scales})
    if not source_images:
        raise InvalidConfigError("no source images given")
    if not scales:
        raise InvalidConfigError("empty scale set")
    bad = [s for s in scales if s not in SYNTH_SCALES]
    if bad:
        raise InvalidConfigError(f"scales {bad} not in {sorted(SYNTH_SCALES)}")
    ids = [src.content_id for src in source_images]
    if len(set(ids)) != len(ids):
        raise InvalidConfigError("source content ids must be unique")
    for src in source_images:
        h, w = src.pixels.shape[:2]
        if h < 256 or w < 256:
            raise InvalidConfigError(f"source {src.content_id} is {h}x{w}, need at least 256x256")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for src in source_images:
        pixels = np.asarray(src.pixels, dtype=np.float64)[..., :3]
        for scale in scales:
            sr, lr_w, hr_w = degrade(pixels, scale)
            sr = quantize(sr)
            ref = pixels[:sr.shape[0], :sr.shape[1]]
            rel = f"images/{src.content_id}_x{scale}.png"
            save_png(out_dir / rel, sr)
            label = squash_psnr(psnr(ref, sr))
            records.append(SampleRecord.create(rel, lr_w, hr_w, label, src.content_id, SYNTH_METHOD_ID))
    manifest = DatasetManifest(records, (0.0, 1.0), HIGHER_IS_BETTER, name, root=out_dir,
                               meta={"seed": int(seed), "scales": scales})
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
