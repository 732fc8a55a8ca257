"""Correlation metrics, the Alexander-Govern test and diagnostic exports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaincc

from .errors import (
    DegenerateGroupError,
    InsufficientDataError,
    InvalidInputError,
    WrongFrameworkError,
    ZeroVarianceError,
)

# ---------------------------------------------------------------------------
# correlation metrics


def _pair(x, y, min_len=3):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise InvalidInputError(f"need at least {min_len} observations, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidInputError("non-finite values")
    return x, y


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    new_group = np.r_[True, sorted_a[1:] != sorted_a[:-1]]
    group_id = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    ends = np.r_[starts[1:], a.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(a.size)
    ranks[order] = mean_rank[group_id]
    return ranks


def _pearson(x, y):
    xm = x - x.mean()
    ym = y - y.mean()
    sxx = float(np.dot(xm, xm))
    syy = float(np.dot(ym, ym))
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("zero variance in input")
    r = float(np.dot(xm, ym)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def plcc(x, y) -> float:
    """Pearson linear correlation."""
    x, y = _pair(x, y)
    return _pearson(x, y)


def srcc(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = _pair(x, y)
    return _pearson(average_ranks(x), average_ranks(y))


def krcc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _pair(x, y)
    n = x.size
    iu = np.triu_indices(n, k=1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = n * (n - 1) // 2
    n1 = int(np.count_nonzero(dx == 0))
    n2 = int(np.count_nonzero(dy == 0))
    if n1 == n0 or n2 == n0:
        raise ZeroVarianceError("all values tied")
    s = float(np.sum(dx * dy))
    tau = s / math.sqrt(float(n0 - n1) * float(n0 - n2))
    return max(-1.0, min(1.0, tau))


def correlations(pred, target) -> dict:
    return {"srcc": srcc(pred, target), "plcc": plcc(pred, target), "krcc": krcc(pred, target)}


# ---------------------------------------------------------------------------
# Alexander-Govern


@dataclass(frozen=True)
class AGResult:
    statistic: float
    p_value: float
    df: int


def chi2_sf(x: float, df: int) -> float:
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def alexander_govern(groups) -> AGResult:
    """Heteroscedastic one-way test for equal means.

    ``groups`` is a mapping of key -> observations or a sequence of
    observation arrays. Each group is normalised through Hill's
    approximation before summing squares into a chi-square statistic.
    """
    samples = list(groups.values()) if isinstance(groups, Mapping) else list(groups)
    samples = [np.asarray(g, dtype=np.float64).ravel() for g in samples]
    if len(samples) < 2:
        raise InsufficientDataError(f"need at least 2 groups, got {len(samples)}")
    for g in samples:
        if g.size < 2:
            raise InsufficientDataError("every group needs at least 2 observations")
    n = np.array([g.size for g in samples], dtype=np.float64)
    means = np.array([g.mean() for g in samples])
    var = np.array([g.var(ddof=1) for g in samples])
    if np.any(var == 0):
        raise DegenerateGroupError("a group has zero within-group variance")

    se2 = var / n
    inv = 1.0 / se2
    w = inv / inv.sum()
    grand = float(np.sum(w * means))
    t = (means - grand) / np.sqrt(se2)

    nu = n - 1.0
    a = nu - 0.5
    b = 48.0 * a ** 2
    c = np.sqrt(a * np.log1p(t ** 2 / nu)) * np.sign(t)
    z = (c + (c ** 3 + 3 * c) / b
         - (4 * c ** 7 + 33 * c ** 5 + 240 * c ** 3 + 855 * c) / (10 * b ** 2 + 8 * b * c ** 4 + 1000 * b))
    stat = float(np.sum(z ** 2))
    df = len(samples) - 1
    return AGResult(stat, chi2_sf(stat, df), df)


def significance_decision(p: float, alpha: float = 0.05) -> bool:
    return p <= alpha


# ---------------------------------------------------------------------------
# grouping and exports


def group_by_scale(records) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault(r.scale, []).append(r.label)
    return dict(sorted(groups.items()))


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3), "min": float(v.min()), "max": float(v.max())}


@dataclass
class ViolinData:
    groups: dict
    summary: dict
    polarity: str

    def observations_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scale", "label"])
        for scale, values in self.groups.items():
            for v in values:
                w.writerow([str(scale), repr(float(v))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["n", "mean", "median", "q1", "q3", "min", "max"]
        w.writerow(["scale"] + cols)
        for scale, s in self.summary.items():
            w.writerow([str(scale)] + [repr(s[c]) if c != "n" else s[c] for c in cols])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "label_polarity": self.polarity,
            "groups": {str(k): [float(v) for v in vals] for k, vals in self.groups.items()},
            "summary": {str(k): s for k, s in self.summary.items()},
        }


def violin_data(manifest) -> ViolinData:
    """Per-scale label groups (raw labels) with linear-interpolation quartiles."""
    if not manifest.records:
        raise InvalidInputError("empty manifest")
    groups = group_by_scale(manifest.records)
    return ViolinData(groups, {k: _summary(v) for k, v in groups.items()}, manifest.label_polarity)


POOLED = "pooled"
PER_METHOD_AVG = "per-method-avg"


def scale_effect_test(manifest, mode: str = PER_METHOD_AVG, alpha: float = 0.05) -> dict:
    """Alexander-Govern test of label means across scale groups.

    ``pooled`` groups every record by scale. ``per-method-avg`` runs one
    test per SR method and reports the mean statistic and the mean p-value.
    Methods with fewer than two usable scale groups are listed as skipped.
    """
    if mode == POOLED:
        res = alexander_govern(group_by_scale(manifest.records))
        return {"dataset": manifest.name, "mode": mode, "statistic": res.statistic,
                "p_value": res.p_value, "df": res.df, "alpha": alpha,
                "significant": significance_decision(res.p_value, alpha)}
    if mode != PER_METHOD_AVG:
        raise InvalidInputError(f"unknown mode {mode!r}")
    per_method, skipped = [], []
    for method in manifest.method_ids():
        recs = [r for r in manifest.records if r.method_id == method]
        try:
            res = alexander_govern(group_by_scale(recs))
        except (InsufficientDataError, DegenerateGroupError) as exc:
            skipped.append({"method_id": method, "reason": exc.category})
            continue
        per_method.append({"method_id": method, "statistic": res.statistic,
                           "p_value": res.p_value, "df": res.df})
    if not per_method:
        raise InsufficientDataError("no SR method has two or more testable scale groups")
    mean_stat = float(np.mean([m["statistic"] for m in per_method]))
    mean_p = float(np.mean([m["p_value"] for m in per_method]))
    dfs = sorted({m["df"] for m in per_method})
    return {"dataset": manifest.name, "mode": mode, "statistic": mean_stat,
            "p_value": mean_p, "df": dfs[0] if len(dfs) == 1 else dfs,
            "statistic_aggregation": "mean over methods", "p_value_aggregation": "mean over methods",
            "alpha": alpha, "significant": significance_decision(mean_p, alpha),
            "per_method": per_method, "skipped": skipped}


# ---------------------------------------------------------------------------
# generated-weight similarity


def cosine_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    k = len(vectors)
    vs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    sq = [float(np.dot(v, v)) for v in vs]
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            denom = math.sqrt(sq[i] * sq[j])
            c = float(np.dot(vs[i], vs[j])) / denom if denom > 0 else 0.0
            out[i, j] = out[j, i] = c
    return out


def weight_similarity(checkpoint, scales: Sequence) -> list[np.ndarray]:
    """Per generated layer, the cosine similarity matrix of w_j across ``scales``."""
    if checkpoint.framework != "sgh":
        raise WrongFrameworkError(f"weight similarity needs an sgh checkpoint, got {checkpoint.framework}")
    if not scales:
        raise InvalidInputError("need at least one scale")
    import torch

    from .scalehyper import embed_scale, generate_params

    model = checkpoint.to_model()
    per_scale = []
    with torch.no_grad():
        for s in scales:
            head = generate_params(embed_scale(Fraction(s), model.embedder), model.layout, model.generator)
            per_scale.append([w.double().numpy() for w in head.weights])
    n_layers = len(per_scale[0])
    return [cosine_matrix([p[j] for p in per_scale]) for j in range(n_layers)]


def similarity_csv(matrices: Sequence[np.ndarray], scales: Sequence) -> str:
    """Long format: layer, scale_a, scale_b, cosine."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "scale_a", "scale_b", "cosine"])
    labels = [str(Fraction(s)) for s in scales]
    for j, m in enumerate(matrices):
        for a, la in enumerate(labels):
            for b, lb in enumerate(labels):
                w.writerow([j, la, lb, repr(float(m[a, b]))])
    return buf.getvalue()
