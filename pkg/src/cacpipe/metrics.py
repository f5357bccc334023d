"""Evaluation statistics: voxel overlap, weighted means, ICC(2,1), kappa, Pearson r."""

from __future__ import annotations

import warnings

import numpy as np

from .volume import Volume, assert_same_grid


def overlap_metrics(pred: Volume, gt: Volume, candidate_region: Volume) -> dict:
    """DICE / sensitivity / specificity from voxelwise counts inside a candidate region.

    Conventions for empty denominators: gt and pred both empty gives dice = 1
    and sensitivity = 1; no negatives gives specificity = 1.
    """
    assert_same_grid(pred, gt)
    assert_same_grid(pred, candidate_region)
    p = pred.bool_mask()
    g = gt.bool_mask()
    region = candidate_region.bool_mask()
    if (p & ~region).any() or (g & ~region).any():
        warnings.warn("pred or gt has voxels outside the candidate region; they are ignored")
    p = p & region
    g = g & region

    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(region & ~p & ~g))

    dice = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    sensitivity = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
    specificity = 1.0 if (tn + fp) == 0 else tn / (tn + fp)
    return {"dice": dice, "sensitivity": sensitivity, "specificity": specificity,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn}


def weighted_mean(values, weights=None) -> float:
    """Sum(w*v)/Sum(w); weights=None means uniform. All-zero weights are an error."""
    v = np.asarray(values, dtype=np.float64)
    if weights is None:
        w = np.ones_like(v)
    else:
        w = np.asarray(weights, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"values and weights differ in length: {v.shape} vs {w.shape}")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    total = float(w.sum())
    if total == 0.0:
        raise ValueError("weights sum to zero")
    return float((w * v).sum() / total)


def icc_2_1(ratings) -> float:
    """ICC(2,1): two-way random effects, absolute agreement, single measurement.

    From the two-way ANOVA mean squares (rows = subjects, columns = raters):
        ICC = (MSR - MSE) / (MSR + (k-1) MSE + (k/n)(MSC - MSE))
    """
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"ratings must be an n x 2 matrix, got shape {x.shape}")
    n, k = x.shape
    if n < 3:
        raise ValueError(f"need at least 3 subjects, got {n}")

    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    msr = k * np.square(row_means - grand).sum() / (n - 1)
    msc = n * np.square(col_means - grand).sum() / (k - 1)
    resid = x - row_means[:, None] - col_means[None, :] + grand
    mse = np.square(resid).sum() / ((n - 1) * (k - 1))

    denom = msr + (k - 1) * mse + (k / n) * (msc - mse)
    if denom <= 0:
        raise ValueError("degenerate ICC denominator (no variance between subjects)")
    return float((msr - mse) / denom)


def cohens_kappa(a, b) -> float:
    """Chance-corrected categorical agreement between two equal-length sequences."""
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ValueError(f"sequences differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("sequences are empty")
    n = len(a)
    cats = sorted(set(a) | set(b), key=repr)
    index = {c: i for i, c in enumerate(cats)}
    table = np.zeros((len(cats), len(cats)), dtype=np.int64)
    for ai, bi in zip(a, b):
        table[index[ai], index[bi]] += 1
    p_o = float(np.trace(table)) / n
    p_e = float((table.sum(axis=1) * table.sum(axis=0)).sum()) / (n * n)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise ValueError("kappa undefined: chance agreement is 1 but observed is not")
    return (p_o - p_e) / (1.0 - p_e)


def pearson_r(x, y) -> float:
    """Centered product-moment correlation; zero variance in either input is an error."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise ValueError("x and y must be 1-D sequences of equal length")
    if xv.size < 2:
        raise ValueError("need at least 2 points")
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance input")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))
