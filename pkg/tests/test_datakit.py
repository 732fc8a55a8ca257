from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import tile_origins_brute
from sghiqa.datakit import (
    HIGHER_IS_WORSE,
    DatasetManifest,
    PatchSpec,
    SampleRecord,
    SourceImage,
    SplitPlan,
    area_downsample,
    bilinear_upsample,
    degrade,
    derive_scale,
    load_images,
    make_split,
    procedural_sources,
    psnr,
    quantize,
    random_origins,
    sample_training_patches,
    synth_benchmark,
    tile_eval_patches,
    tile_origins,
)
from sghiqa.errors import (
    CannotSplitError,
    InvalidConfigError,
    InvalidRecordError,
    TooSmallImageError,
)


def _records(contents, methods=("m",)):
    return [SampleRecord.create(f"{c}_{m}.png", 64, 128, 0.5, c, m) for c in contents for m in methods]


def _manifest(contents, methods=("m",)):
    return DatasetManifest(_records(contents, methods), (0.0, 1.0), "higher_is_better", "t")


# --- derive_scale -----------------------------------------------------------

@pytest.mark.parametrize("hr, lr, expected", [(512, 256, 2), (224, 224, 1), (1024, 128, 8), (300, 200, Fraction(3, 2))])
def test_derive_scale_examples(hr, lr, expected):
    s = derive_scale(hr, lr)
    assert s == expected
    assert isinstance(s, Fraction)


@pytest.mark.parametrize("hr, lr", [(10, 0), (100, 200)])
def test_derive_scale_rejects(hr, lr):
    with pytest.raises(InvalidRecordError):
        derive_scale(hr, lr)


@given(st.integers(1, 5000), st.integers(1, 64))
def test_derive_scale_recovers_integer_factor(w, k):
    assert derive_scale(w * k, w) == k


# --- records and manifests --------------------------------------------------

def test_record_rejects_inconsistent_scale():
    with pytest.raises(InvalidRecordError):
        SampleRecord("a.png", 100, 200, Fraction(3), 0.5, "c", "m")


def test_record_rejects_empty_ids():
    with pytest.raises(InvalidRecordError):
        SampleRecord.create("a.png", 100, 200, 0.5, "", "m")


def test_manifest_rejects_label_outside_range():
    rec = SampleRecord.create("a.png", 100, 200, 7.0, "c", "m")
    with pytest.raises(InvalidRecordError):
        DatasetManifest([rec], (1.0, 5.0), "higher_is_better", "t")


def test_manifest_roundtrip(tmp_path):
    m = _manifest(["a", "b", "c"])
    path = m.save(tmp_path / "sub" / "manifest.jsonl")
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert '"label_polarity"' in lines[0]
    back = DatasetManifest.load(path)
    assert back.records == m.records
    assert back.label_range == m.label_range
    assert back.root == tmp_path / "sub"


def test_normalized_label_flips_rank_polarity():
    rec = SampleRecord.create("a.png", 100, 200, 2.0, "c", "m")
    m = DatasetManifest([rec], (1.0, 5.0), HIGHER_IS_WORSE, "waterloo-like")
    assert m.normalized_label(rec) == pytest.approx(0.75)


# --- splits -----------------------------------------------------------------

def test_split_ten_contents():
    plan = make_split(_manifest([f"c{i}" for i in range(10)]), seed=0, ratio=0.8)
    assert (len(plan.train_ids), len(plan.test_ids)) == (8, 2)


def test_split_deterministic():
    m = _manifest([f"c{i}" for i in range(10)])
    assert make_split(m, 3) == make_split(m, 3)


def test_split_seed_sweep_gives_distinct_plans():
    m = _manifest([f"c{i:02d}" for i in range(30)])
    plans = [make_split(m, s) for s in range(10)]
    assert all((len(p.train_ids), len(p.test_ids)) == (24, 6) for p in plans)
    keys = {tuple(sorted(p.test_ids)) for p in plans}
    assert len(keys) == 10


def test_split_needs_two_contents():
    with pytest.raises(CannotSplitError):
        make_split(_manifest(["only"]), 0)


@given(st.integers(2, 60), st.integers(0, 10_000), st.floats(0.05, 0.95))
@settings(max_examples=60, deadline=None)
def test_split_partition_properties(n, seed, ratio):
    ids = [f"c{i}" for i in range(n)]
    plan = make_split(_manifest(ids), seed, ratio)
    assert not plan.train_ids & plan.test_ids
    assert plan.train_ids | plan.test_ids == set(ids)
    assert abs(len(plan.train_ids) - ratio * n) <= 1


def test_split_by_method():
    m = _manifest(["a", "b"], methods=[f"m{i}" for i in range(5)])
    plan = make_split(m, 0, key="method")
    assert plan.train_ids | plan.test_ids == set(m.method_ids())
    for side in ("train", "test"):
        methods = {r.method_id for r in plan.select(m, side)}
        assert methods <= (plan.train_ids if side == "train" else plan.test_ids)


def test_split_json_sorted_and_roundtrips():
    plan = make_split(_manifest([f"c{i}" for i in range(12)]), 1)
    obj = plan.to_json()
    assert obj["train_ids"] == sorted(obj["train_ids"])
    assert SplitPlan.from_json(obj) == plan


# --- patches ----------------------------------------------------------------

def test_sample_patches_single_origin():
    img = np.random.default_rng(0).uniform(size=(224, 224, 3)).astype(np.float32)
    patches = sample_training_patches(img, PatchSpec(224, 64, 64), 0)
    assert len(patches) == 64
    assert all(np.array_equal(p, img) for p in patches)


def test_sample_patches_origin_bounds():
    origins = random_origins(256, 256, 224, 4, 7)
    assert origins.shape == (4, 2)
    assert origins.min() >= 0 and origins.max() <= 32


def test_sample_patches_reproducible_300():
    img = np.random.default_rng(1).uniform(size=(300, 300, 3))
    a = sample_training_patches(img, PatchSpec(224, 64, 64), 5)
    b = sample_training_patches(img, PatchSpec(224, 64, 64), 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    origins = random_origins(300, 300, 224, 64, 5)
    assert origins.max() <= 76
    # the recorded origins replay to the same crops
    for (y, x), p in zip(origins, a):
        assert np.array_equal(img[y:y + 224, x:x + 224], p)


def test_sample_patches_too_small():
    with pytest.raises(TooSmallImageError):
        sample_training_patches(np.zeros((100, 300, 3)), PatchSpec(224, 64, 1), 0)


@pytest.mark.parametrize("h, w, expected", [(224, 224, 1), (288, 288, 4), (290, 350, 9)])
def test_tile_counts(h, w, expected):
    patches = tile_eval_patches(np.zeros((h, w, 3)), PatchSpec(224, 64, 1))
    assert len(patches) == expected
    assert all(p.shape == (224, 224, 3) for p in patches)


def test_tile_origins_350x290():
    origins = tile_origins(350, 290, PatchSpec(224, 64, 1))
    assert sorted({y for y, _ in origins}) == [0, 64, 126]
    assert sorted({x for _, x in origins}) == [0, 64, 66]


def test_tile_too_small():
    with pytest.raises(TooSmallImageError):
        tile_eval_patches(np.zeros((223, 500, 3)), PatchSpec(224, 64, 1))


@given(st.integers(16, 200), st.integers(16, 200), st.integers(4, 40), st.integers(1, 50))
@settings(max_examples=100, deadline=None)
def test_tiling_matches_brute_force_and_covers(h, w, size, stride):
    size = min(size, h, w)
    spec = PatchSpec(size, stride, 1)
    origins = tile_origins(h, w, spec)
    assert sorted({y for y, _ in origins}) == tile_origins_brute(h, size, stride)
    assert sorted({x for _, x in origins}) == tile_origins_brute(w, size, stride)
    if stride <= size:
        covered = np.zeros((h, w), dtype=bool)
        for y, x in origins:
            covered[y:y + size, x:x + size] = True
        assert covered.all()


def test_tiling_covers_every_pixel_default_spec():
    spec = PatchSpec(224, 64, 1)
    covered = np.zeros((517, 301), dtype=bool)
    for y, x in tile_origins(517, 301, spec):
        covered[y:y + 224, x:x + 224] = True
    assert covered.all()


def test_load_images_independent_of_workers(tiny_manifest):
    paths = [tiny_manifest.resolve(r) for r in tiny_manifest.records]
    a = load_images(paths, 1)
    b = load_images(paths, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].dtype == np.float32 and a[0].max() <= 1.0


# --- synthetic benchmark ----------------------------------------------------

def test_area_downsample_and_bilinear_identity():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert np.allclose(area_downsample(img, 2)[0, 0], img[:2, :2].mean(axis=(0, 1)))
    assert np.allclose(bilinear_upsample(img, 8, 8), img)
    flat = np.full((4, 4, 3), 0.3)
    assert np.allclose(bilinear_upsample(flat, 12, 12), 0.3)


def test_degrade_exact_scale():
    img = np.random.default_rng(0).uniform(size=(256, 256, 3))
    sr, lr_w, hr_w = degrade(img, 3)
    assert (lr_w, hr_w) == (85, 255)
    assert sr.shape == (255, 255, 3)
    assert derive_scale(hr_w, lr_w) == 3


def test_synth_rejects_scale_one(tmp_path):
    src = procedural_sources(1)
    with pytest.raises(InvalidConfigError):
        synth_benchmark(src, {1}, 0, tmp_path)


def test_synth_rejects_empty(tmp_path):
    with pytest.raises(InvalidConfigError):
        synth_benchmark([], {2}, 0, tmp_path)
    with pytest.raises(InvalidConfigError):
        synth_benchmark(procedural_sources(1), set(), 0, tmp_path)


def test_synth_rejects_small_source(tmp_path):
    with pytest.raises(InvalidConfigError):
        synth_benchmark([SourceImage("s", np.zeros((100, 300, 3)))], {2}, 0, tmp_path)


def test_synth_labels_match_psnr_oracle_and_decrease(tmp_path):
    sources = procedural_sources(3, seed=4)
    m = synth_benchmark(sources, {2, 4, 8}, 0, tmp_path)
    assert m.label_polarity == "higher_is_better"
    for src in sources:
        recs = sorted((r for r in m.records if r.content_id == src.content_id), key=lambda r: r.scale)
        oracle = []
        for r in recs:
            k = int(r.scale)
            hh, ww = (256 // k) * k, (256 // k) * k
            lr = src.pixels[:hh, :ww].reshape(hh // k, k, ww // k, k, 3).mean(axis=(1, 3))
            up = quantize(bilinear_upsample(lr, hh, ww))
            oracle.append(psnr(src.pixels[:hh, :ww], up))
        assert all(a > b for a, b in zip(oracle, oracle[1:]))
        labels = [r.label for r in recs]
        assert all(a > b for a, b in zip(labels, labels[1:]))
        assert all(0.0 <= v <= 1.0 for v in labels)
        assert all(r.method_id == "synthetic-bilinear" for r in recs)


def test_synth_deterministic_bytes(tmp_path):
    a = synth_benchmark(procedural_sources(2, seed=1), {2, 3}, 1, tmp_path / "a")
    b = synth_benchmark(procedural_sources(2, seed=1), {2, 3}, 1, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for r in a.records:
        assert (tmp_path / "a" / r.sr_path).read_bytes() == (tmp_path / "b" / r.sr_path).read_bytes()
    assert len(b.records) == 4


def test_procedural_sources_deterministic():
    a = procedural_sources(2, seed=3)
    b = procedural_sources(2, seed=3)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert a[0].pixels.shape == (256, 256, 3)
