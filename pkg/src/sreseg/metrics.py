"""Agreement, overlap and significance metrics, plus report writers.

Label maps may contain the ``IGNORE`` sentinel; positions where either map
is ``IGNORE`` are dropped pairwise.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .imaging import IGNORE

ALL_PAIRS = "all-pairs"
REFERENCE = "reference"
CSV_COLUMNS = ("subject_id", "model", "method", "metric", "value")


class NoVarianceError(ValueError):
    """ICC is undefined because the ratings carry no usable variance."""


def icc(M) -> float:
    """ICC(3,1): two-way mixed effects, consistency, single rater.

    ``M`` is (n_targets, n_raters).  Computed from the two-way ANOVA as
    ``(MS_rows - MS_err) / (MS_rows + (r - 1) MS_err)``.

    Raises
    ------
    NoVarianceError
        If all entries are equal, or both mean squares vanish.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"ratings must be 2-D (targets, raters), got shape {M.shape}")
    n, r = M.shape
    if n < 2 or r < 2:
        raise ValueError(f"need at least 2 targets and 2 raters, got {n}x{r}")
    if not np.all(np.isfinite(M)):
        raise ValueError("ratings contain non-finite values")
    grand = M.mean()
    row_mean = M.mean(axis=1)
    col_mean = M.mean(axis=0)
    if np.all(M == M.flat[0]):
        raise NoVarianceError("all ratings are equal")
    ss_rows = r * np.sum((row_mean - grand) ** 2)
    resid = M - row_mean[:, None] - col_mean[None, :] + grand
    ss_err = np.sum(resid**2)
    ms_rows = ss_rows / (n - 1)
    ms_err = ss_err / ((n - 1) * (r - 1))
    if ms_err == 0.0:
        if ms_rows > 0.0:
            return 1.0
        raise NoVarianceError("ratings differ only by rater offsets")
    return float((ms_rows - ms_err) / (ms_rows + (r - 1) * ms_err))


def _valid_pair(a, b, ignore):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in size: {a.size} vs {b.size}")
    if ignore is not None:
        keep = (a != ignore) & (b != ignore)
        a, b = a[keep], b[keep]
    if a.size == 0:
        raise ValueError("no valid positions to compare")
    return a, b


def cohen_kappa(a, b, ignore=IGNORE) -> float:
    """Cohen's kappa; 1.0 when chance agreement is already 1."""
    a, b = _valid_pair(a, b, ignore)
    cats, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    ia, ib = inv[: a.size], inv[a.size :]
    n = a.size
    p_o = np.count_nonzero(ia == ib) / n
    pa = np.bincount(ia, minlength=len(cats)) / n
    pb = np.bincount(ib, minlength=len(cats)) / n
    p_e = float(pa @ pb)
    if p_e == 1.0:
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


def dice(a, b, K=None, ignore=IGNORE) -> float:
    """Macro Dice over classes present in either map (restricted to [0, K) if given)."""
    a, b = _valid_pair(a, b, ignore)
    classes = np.union1d(np.unique(a), np.unique(b))
    if K is not None:
        classes = classes[(classes >= 0) & (classes < K)]
    if classes.size == 0:
        raise ValueError("no classes present in the valid region")
    scores = []
    for c in classes:
        in_a, in_b = a == c, b == c
        scores.append(2.0 * np.count_nonzero(in_a & in_b) / (np.count_nonzero(in_a) + np.count_nonzero(in_b)))
    return float(np.mean(scores))


def rank_sum_test(x, y):
    """Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

    Returns ``(U, p)`` where ``U`` is the statistic of ``x``.  Small untied
    samples (both sizes <= 8) get the exact null distribution; otherwise
    the normal approximation with tie-corrected variance and continuity
    correction is used.  Samples whose pooled values are all equal give
    ``p = 1``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 3 or y.size < 3:
        raise ValueError(f"each sample needs at least 3 values, got {x.size} and {y.size}")
    pooled = np.concatenate([x, y])
    if not np.all(np.isfinite(pooled)):
        raise ValueError("samples contain non-finite values")
    ranks = stats.rankdata(pooled)
    u = float(ranks[: x.size].sum() - x.size * (x.size + 1) / 2)
    if np.all(pooled == pooled[0]):
        return u, 1.0
    tied = np.unique(pooled).size < pooled.size
    method = "exact" if max(x.size, y.size) <= 8 and not tied else "asymptotic"
    res = stats.mannwhitneyu(x, y, alternative="two-sided", use_continuity=True, method=method)
    return u, float(min(1.0, res.pvalue))


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.size != truth.size or pred.size == 0:
        raise ValueError("pred and truth must be non-empty and equally long")
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# agreement across several label maps


def rater_pairs(r, mode=ALL_PAIRS):
    """Index pairs compared across ``r`` label maps."""
    if mode == ALL_PAIRS:
        return list(itertools.combinations(range(r), 2))
    if mode == REFERENCE:
        return [(0, j) for j in range(1, r)]
    raise ValueError(f"mode must be {ALL_PAIRS!r} or {REFERENCE!r}, got {mode!r}")


def rotation_consistency(stack, K=None, mode=ALL_PAIRS) -> dict:
    """ICC, mean Kappa and mean Dice for an (r, n) stack of label vectors.

    Every column must be valid in every row (the caller restricts to the
    mask intersection).  ICC is NaN when the labels carry no variance.
    """
    stack = np.asarray(stack)
    if stack.ndim != 2 or stack.shape[0] < 2:
        raise ValueError(f"need at least 2 label vectors, got shape {stack.shape}")
    if stack.shape[1] == 0:
        raise ValueError("empty valid region")
    pairs = rater_pairs(stack.shape[0], mode)
    out = {
        "kappa": float(np.mean([cohen_kappa(stack[i], stack[j], ignore=None) for i, j in pairs])),
        "dice": float(np.mean([dice(stack[i], stack[j], K, ignore=None) for i, j in pairs])),
    }
    try:
        out["icc"] = icc(stack.T)
    except NoVarianceError:
        out["icc"] = math.nan
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricRow:
    subject_id: str
    model: str
    method: str
    metric: str
    value: float


def format_value(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.subject_id, r.model, r.method, r.metric, format_value(r.value)])


def write_metrics_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            v = float(r.value)
            rec = {"subject_id": r.subject_id, "model": r.model, "method": r.method,
                   "metric": r.metric, "value": None if math.isnan(v) else v}
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(r["subject_id"], r["model"], r["method"], r["metric"], float(r["value"]))
                for r in reader]
