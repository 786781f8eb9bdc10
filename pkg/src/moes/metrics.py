"""Saliency evaluation metrics and report assembly.

Definitions follow the common saliency-benchmark conventions, pinned
here because published numbers are sensitive to them:

* NSS standardizes the prediction with the population (not sample)
  standard deviation and averages it over fixated pixels.
* CC is the plain Pearson correlation over pixels.
* KLD and SIM first shift each map by its minimum, add EPS = 1e-7 per
  pixel and renormalize to sum 1; KLD is sum q * log(q / p) with q the
  ground-truth distribution (predictions that miss ground-truth mass
  pay for it), SIM is the histogram intersection sum min(p, q).
* AUC treats fixated pixels as positives. AUC-Borji samples, per split,
  as many random non-fixated pixels as there are fixations and averages
  the trapezoidal ROC area over seeded splits; AUC-Judd thresholds at
  the prediction values of the fixations against all non-fixated
  pixels. "Above threshold" means >= everywhere.

Degenerate inputs (constant maps, all pixels fixated) return the
documented fallback and are flagged in the report instead of raising.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import SaliencySample, category_name
from .errors import ConfigurationError, UsageError

EPS = 1e-7

KNOWN_METRICS = ("nss", "cc", "kld", "sim", "auc_borji", "auc_judd")
DEFAULT_AUC_SPLITS = 100


def _flat(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def _as_distribution(arr: np.ndarray) -> np.ndarray:
    shifted = arr - arr.min()
    shifted = shifted + EPS
    return shifted / shifted.sum()


def nss(pred, fixations) -> float:
    """Mean standardized prediction value at fixated pixels.

    A constant prediction has no standard deviation; the score is
    defined as 0 in that case.
    """
    p = _flat(pred)
    f = _flat(fixations) > 0.5
    if not f.any():
        raise UsageError("nss needs at least one fixation")
    std = p.std()
    if std == 0.0:
        return 0.0
    z = (p - p.mean()) / std
    return float(z[f].mean())


def cc(pred, density) -> float:
    """Pearson linear correlation between two maps, 0 if either is flat."""
    a, b = _flat(pred), _flat(density)
    if a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def kld(pred, density) -> float:
    """KL divergence from the prediction to the ground-truth distribution."""
    p = _as_distribution(_flat(pred))
    q = _as_distribution(_flat(density))
    return float(np.sum(q * np.log(q / p)))


def sim(pred, density) -> float:
    """Histogram intersection of the two normalized maps, in [0, 1]."""
    p = _as_distribution(_flat(pred))
    q = _as_distribution(_flat(density))
    return float(np.minimum(p, q).sum())


def _roc_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Trapezoidal ROC area over all distinct thresholds (>= comparison)."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append(float(np.count_nonzero(pos >= t)) / pos.size)
        fpr.append(float(np.count_nonzero(neg >= t)) / neg.size)
    return float(np.trapezoid(tpr, fpr))


def auc_borji_splits(pred, fixations, n_splits: int = DEFAULT_AUC_SPLITS,
                     seed: int = 0) -> np.ndarray:
    """Per-split ROC areas; negatives are uniform non-fixated pixels."""
    p = _flat(pred)
    f = _flat(fixations) > 0.5
    n_fix = int(f.sum())
    if n_fix == 0:
        raise UsageError("auc_borji needs at least one fixation")
    non_fixated = p[~f]
    if non_fixated.size == 0:
        return np.full(n_splits, np.nan)
    pos = p[f]
    rng = np.random.default_rng([seed, 0xA0C])
    areas = np.empty(n_splits)
    for s in range(n_splits):
        neg = non_fixated[rng.integers(0, non_fixated.size, size=n_fix)]
        areas[s] = _roc_auc(pos, neg)
    return areas


def auc_borji(pred, fixations, n_splits: int = DEFAULT_AUC_SPLITS,
              seed: int = 0) -> float:
    areas = auc_borji_splits(pred, fixations, n_splits=n_splits, seed=seed)
    return float(areas.mean())


def auc_borji_stats(pred, fixations, n_splits: int = DEFAULT_AUC_SPLITS,
                    seed: int = 0) -> tuple[float, float]:
    """Mean ROC area and its standard error over the random splits."""
    areas = auc_borji_splits(pred, fixations, n_splits=n_splits, seed=seed)
    return float(areas.mean()), float(areas.std(ddof=1) / np.sqrt(n_splits))


def auc_judd(pred, fixations) -> float:
    """ROC area thresholding at the prediction values of the fixations."""
    p = _flat(pred)
    f = _flat(fixations) > 0.5
    n_fix = int(f.sum())
    if n_fix == 0:
        raise UsageError("auc_judd needs at least one fixation")
    non_fixated = p[~f]
    if non_fixated.size == 0:
        return float("nan")
    pos = p[f]
    thresholds = np.unique(pos)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append(float(np.count_nonzero(pos >= t)) / pos.size)
        fpr.append(float(np.count_nonzero(non_fixated >= t)) / non_fixated.size)
    tpr.append(1.0)
    fpr.append(1.0)
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-sample metric rows plus per-category and overall means.

    The overall mean is the mean over per-sample values, not the mean
    of the category means; categories of different sizes therefore
    weigh proportionally to their sample counts.
    """

    per_sample: list[tuple[str, str, str, float]] = field(default_factory=list)
    flags: list[tuple[str, str, str]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def aggregates(self) -> list[tuple[str, str, float, int]]:
        # rows are sorted before summing so the result is invariant to
        # the order samples were evaluated in
        groups: dict[tuple[str, str], list[float]] = {}
        for sid, category, metric, value in sorted(self.per_sample):
            for key in ((category, metric), ("overall", metric)):
                bucket = groups.setdefault(key, [])
                if np.isfinite(value):
                    bucket.append(value)
        rows = []
        for category, metric in sorted(groups):
            values = groups[(category, metric)]
            mean = float(np.mean(values)) if values else float("nan")
            rows.append((category, metric, mean, len(values)))
        return rows

    def overall(self, metric: str) -> float:
        for category, m, mean, _ in self.aggregates():
            if category == "overall" and m == metric:
                return mean
        raise KeyError(metric)

    def write_per_sample_csv(self, path) -> None:
        lines = ["sample_id,category,metric,value"]
        for sid, category, metric, value in self.per_sample:
            lines.append(f"{sid},{category},{metric},{value!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_aggregate_csv(self, path) -> None:
        lines = ["category,metric,mean,n"]
        for category, metric, mean, n in self.aggregates():
            lines.append(f"{category},{metric},{mean!r},{n}")
        Path(path).write_text("\n".join(lines) + "\n")


PredictionSource = Mapping[str, np.ndarray] | Callable[[SaliencySample], np.ndarray | None]


def evaluate(predictions: PredictionSource, samples: Sequence[SaliencySample],
             metric_names: Sequence[str], seed: int = 0,
             n_splits: int = DEFAULT_AUC_SPLITS) -> MetricReport:
    """Score every sample with every requested metric.

    ``predictions`` maps sample ids to 2-D maps (or is a callable doing
    the same); samples without a prediction are recorded under
    ``missing`` and excluded from the aggregates.
    """
    unknown = [m for m in metric_names if m not in KNOWN_METRICS]
    if unknown:
        raise ConfigurationError(
            f"unknown metrics {unknown}; valid names: {', '.join(KNOWN_METRICS)}"
        )
    report = MetricReport()
    for sample in samples:
        if callable(predictions):
            pred = predictions(sample)
        else:
            pred = predictions.get(sample.sample_id)
        if pred is None:
            report.missing.append(sample.sample_id)
            continue
        pred = np.asarray(pred, dtype=np.float64)
        if pred.ndim == 3:
            pred = pred[0]
        if pred.shape != sample.density.shape[1:]:
            raise UsageError(
                f"prediction for {sample.sample_id} has shape {pred.shape}, "
                f"expected {sample.density.shape[1:]}"
            )
        cat = category_name(sample.category)
        constant = pred.max() == pred.min()
        for metric in metric_names:
            if metric == "nss":
                value = nss(pred, sample.fixations)
                if constant:
                    report.flags.append((sample.sample_id, metric, "constant prediction"))
            elif metric == "cc":
                value = cc(pred, sample.density[0])
                if constant or sample.density.max() == sample.density.min():
                    report.flags.append((sample.sample_id, metric, "constant map"))
            elif metric == "kld":
                value = kld(pred, sample.density[0])
            elif metric == "sim":
                value = sim(pred, sample.density[0])
            elif metric == "auc_borji":
                value = auc_borji(pred, sample.fixations, n_splits=n_splits,
                                  seed=_per_sample_seed(seed, sample.sample_id))
                if not np.isfinite(value):
                    report.flags.append((sample.sample_id, metric, "undefined"))
            elif metric == "auc_judd":
                value = auc_judd(pred, sample.fixations)
                if not np.isfinite(value):
                    report.flags.append((sample.sample_id, metric, "undefined"))
            report.per_sample.append((sample.sample_id, cat, metric, float(value)))
    return report


def _per_sample_seed(seed: int, sample_id: str) -> int:
    # keyed by sample id, not position: shuffling the samples must not
    # change any per-sample AUC stream
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
