import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sghiqa.datakit import (  # noqa: E402
    HIGHER_IS_BETTER,
    DatasetManifest,
    SampleRecord,
    save_png,
)

torch.set_num_threads(1)


def write_manifest(root: Path, n_contents=10, scales=(2, 4), size=40, methods=("m0",), seed=0,
                   label_range=(0.0, 1.0), polarity=HIGHER_IS_BETTER, name="tiny") -> DatasetManifest:
    """Small on-disk manifest of random images; labels decrease with scale."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    lo, hi = label_range
    records = []
    for c in range(n_contents):
        for method in methods:
            for s in scales:
                img = rng.uniform(0, 1, (size, size, 3))
                rel = f"img/c{c}_{method}_x{s}.png"
                save_png(root / rel, img)
                frac = float(np.clip(1.0 / s + rng.uniform(-0.05, 0.05), 0, 1))
                records.append(SampleRecord.create(rel, size // s, (size // s) * s,
                                                   lo + frac * (hi - lo), f"c{c}", method))
    manifest = DatasetManifest(records, label_range, polarity, name, root=root)
    manifest.save(root / "manifest.jsonl")
    return manifest


@pytest.fixture
def tiny_manifest(tmp_path):
    return write_manifest(tmp_path)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
