"""Metrics comparing guided samples against the rejection-sampling oracle.

The workhorse is the l1 histogram distance D(X, Y) = 0.5 * sum_i |x_i - y_i|
over empirical bin probabilities on a shared equal-width binning; it is
bounded by 1. The self-distance between two halves of one sample gives the
noise floor against which guided-vs-oracle distances should be judged.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import decoded_matrix
from .logic import eval_hard

DEFAULT_BINS = 50


def l1_hist_distance(x, y, bins=DEFAULT_BINS):
    """Half the l1 difference of binned empirical marginals; in [0, 1]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("samples must be nonempty")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    px = np.histogram(x, bins=edges)[0] / len(x)
    py = np.histogram(y, bins=edges)[0] / len(y)
    return 0.5 * float(np.abs(px - py).sum())


def column_l1_distances(X, Y, bins=DEFAULT_BINS):
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("samples have different dimensionality")
    return np.array([l1_hist_distance(X[:, j], Y[:, j], bins) for j in range(X.shape[1])])


def corr_l1(X, Y):
    """Mean |corr_X(i,j) - corr_Y(i,j)| over off-diagonal upper-triangle
    pairs; pairs touching a zero-variance column are excluded (warned)."""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if X.shape[1] < 2 or X.shape[1] != Y.shape[1]:
        raise ValueError("need >= 2 matching columns")
    if len(X) < 3 or len(Y) < 3:
        raise ValueError("need >= 3 rows")
    d = X.shape[1]
    dead = (X.std(axis=0) == 0) | (Y.std(axis=0) == 0)
    if dead.any():
        warnings.warn(f"corr_l1: excluding zero-variance columns {np.nonzero(dead)[0].tolist()}")
    with np.errstate(invalid="ignore", divide="ignore"):
        cx = np.corrcoef(X, rowvar=False)
        cy = np.corrcoef(Y, rowvar=False)
    iu = np.triu_indices(d, k=1)
    diff = np.abs(cx - cy)[iu]
    keep = ~(dead[iu[0]] | dead[iu[1]])
    if not keep.any():
        return 0.0
    return float(diff[keep].mean())


def satisfaction_rate(formula, samples_original, schema, instances=1):
    """Fraction of original-unit rows on which the formula holds classically."""
    rows = np.atleast_2d(samples_original)
    if len(rows) == 0:
        raise ValueError("no samples")
    hits = sum(bool(eval_hard(formula, r, schema, instances)) for r in rows)
    return hits / len(rows)


def self_distance(X, bins=DEFAULT_BINS, split_seed=0):
    """Per-dimension noise floor: l1 distance between two halves of X.

    ``split_seed=None`` splits deterministically into first/second half;
    an integer seed shuffles first.
    """
    X = np.atleast_2d(X)
    if len(X) < 4:
        raise ValueError("need at least 4 rows")
    if split_seed is None:
        perm = np.arange(len(X))
    else:
        perm = np.random.default_rng(split_seed).permutation(len(X))
    half = len(X) // 2
    a, b = X[perm[:half]], X[perm[half : 2 * half]]
    return column_l1_distances(a, b, bins)


@dataclass
class MetricReport:
    l1_distances: list
    l1_median: float
    l1_mean: float
    l1_max: float
    corr_l1: float | None
    satisfaction_rate: float | None
    rs_acceptance_rate: float | None
    n_samples: int
    n_reference: int
    bins: int
    self_distance_median: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "l1_distances": [float(v) for v in self.l1_distances],
            "l1_median": self.l1_median,
            "l1_mean": self.l1_mean,
            "l1_max": self.l1_max,
            "corr_l1": self.corr_l1,
            "satisfaction_rate": self.satisfaction_rate,
            "rs_acceptance_rate": self.rs_acceptance_rate,
            "n_samples": self.n_samples,
            "n_reference": self.n_reference,
            "binning": {"kind": "equal-width over joint range", "bins": self.bins},
            **({"self_distance_median": self.self_distance_median} if self.self_distance_median is not None else {}),
            "extras": self.extras,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _decode_blocks(matrix, schema, normalization, instances):
    width = schema.width
    blocks = [
        decoded_matrix(matrix[:, i * width : (i + 1) * width], schema, normalization)
        for i in range(instances)
    ]
    return np.hstack(blocks)


def build_report(
    samples,
    reference,
    bins=DEFAULT_BINS,
    formula=None,
    schema=None,
    normalization=None,
    instances=1,
    rs_acceptance_rate=None,
    extras=None,
):
    """Full comparison of guided samples against an oracle reference.

    Inputs are model-space matrices; with a schema both sides are decoded
    to original units first, so integer and categorical columns compare at
    the resolution they are reported in (for real columns decoding is an
    affine relabeling and the distances are unchanged).
    """
    samples = np.atleast_2d(samples)
    reference = np.atleast_2d(reference)
    sat = None
    if schema is not None and normalization is not None:
        samples_cmp = _decode_blocks(samples, schema, normalization, instances)
        reference_cmp = _decode_blocks(reference, schema, normalization, instances)
        if formula is not None:
            sat = satisfaction_rate(formula, samples_cmp, schema, instances)
    else:
        samples_cmp, reference_cmp = samples, reference
    dists = column_l1_distances(samples_cmp, reference_cmp, bins)
    corr = corr_l1(samples_cmp, reference_cmp) if samples_cmp.shape[1] >= 2 else None
    self_med = float(np.median(self_distance(reference_cmp, bins))) if len(reference_cmp) >= 4 else None
    return MetricReport(
        l1_distances=list(map(float, dists)),
        l1_median=float(np.median(dists)),
        l1_mean=float(np.mean(dists)),
        l1_max=float(np.max(dists)),
        corr_l1=corr,
        satisfaction_rate=sat,
        rs_acceptance_rate=rs_acceptance_rate,
        n_samples=len(samples),
        n_reference=len(reference),
        bins=bins,
        self_distance_median=self_med,
        extras=extras or {},
    )


def write_histogram_csv(path, x, y, bins=DEFAULT_BINS, labels=("samples", "reference")):
    """Per-dimension histogram dump (bin_left, bin_right, p_x, p_y)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    px = np.histogram(x, bins=edges)[0] / len(x)
    py = np.histogram(y, bins=edges)[0] / len(y)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", f"p_{labels[0]}", f"p_{labels[1]}"])
        for i in range(bins):
            w.writerow([edges[i], edges[i + 1], px[i], py[i]])
