"""Rater-agreement and significance statistics for human evaluation tables.

Annotations use a small ordinal label set, by default suitable = 2,
neutral = 1, unsuitable = 0, presented in that (descending) order. The
chi-square survival function is implemented here directly (regularized
incomplete gamma via series and continued fraction) so p-values carry no
external dependency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnnotationTable",
    "score_summary",
    "fleiss_kappa",
    "friedman_test",
    "chi_square_sf",
    "load_annotations_csv",
    "load_scores_csv",
]

DEFAULT_CATEGORIES = (2, 1, 0)


@dataclass
class AnnotationTable:
    """Item x rater categorical labels.

    labels[i, j] is rater j's label for item i; every value must be one of
    `categories`, whose order is the presentation order used for fractions.
    """

    labels: np.ndarray
    categories: tuple = DEFAULT_CATEGORIES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError(
                f"labels must be an items x raters matrix, got shape {self.labels.shape}")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"categories must be distinct, got {self.categories}")
        if self.labels.size:
            seen = set(np.unique(self.labels).tolist())
            bad = seen - set(self.categories)
            if bad:
                raise ValueError(
                    f"labels contain values {sorted(bad)} outside categories "
                    f"{self.categories}")

    @property
    def n_items(self) -> int:
        return self.labels.shape[0]

    @property
    def n_raters(self) -> int:
        return self.labels.shape[1]


def score_summary(table: AnnotationTable):
    """Mean label value and per-category fractions (in table.categories order)."""
    if table.labels.size == 0:
        raise ValueError("cannot summarize an empty annotation table")
    mean = float(table.labels.mean())
    total = table.labels.size
    fractions = tuple(float((table.labels == c).sum()) / total
                      for c in table.categories)
    return mean, fractions


def fleiss_kappa(table: AnnotationTable) -> float:
    """Chance-corrected multi-rater agreement.

    Per item, agreement P_i = [sum_c n_ic (n_ic - 1)] / [k (k - 1)]; kappa is
    (mean P_i - P_e) / (1 - P_e) with P_e the squared category proportions
    summed. Undefined (raises) when every annotation is the same category.
    """
    n, k = table.labels.shape
    if n < 1:
        raise ValueError("need at least one item")
    if k < 2:
        raise ValueError(f"agreement needs at least two raters, got {k}")
    counts = np.stack([(table.labels == c).sum(axis=1) for c in table.categories],
                      axis=1).astype(np.float64)
    p_i = (np.square(counts).sum(axis=1) - k) / (k * (k - 1))
    p_bar = float(p_i.mean())
    p_cat = counts.sum(axis=0) / (n * k)
    p_e = float(np.square(p_cat).sum())
    if p_e == 1.0:
        raise ValueError(
            "all annotations fall in a single category; kappa is undefined")
    return (p_bar - p_e) / (1.0 - p_e)


def _rank_desc(row: np.ndarray) -> np.ndarray:
    """Ranks with 1 = largest value; tied values share their average rank."""
    higher = (row[None, :] > row[:, None]).sum(axis=1)
    equal = (row[None, :] == row[:, None]).sum(axis=1)
    return higher + (equal + 1) / 2.0


def friedman_test(scores):
    """Friedman rank test over an N subjects x k treatments score matrix.

    Returns (statistic, dof, p_value, average ranks per treatment). Ranks run
    descending (rank 1 = highest score), ties get average ranks, and the
    statistic carries the standard tie-correction divisor
    1 - sum(t^3 - t) / (N k (k^2 - 1)). When every subject ranks all
    treatments identically tied, the statistic is 0 and p = 1.
    """
    m = np.asarray(scores, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"scores must be a 2-d matrix, got shape {m.shape}")
    n, k = m.shape
    if n < 1 or k < 2:
        raise ValueError(f"need N >= 1 subjects and k >= 2 treatments, got {n} x {k}")
    if not np.isfinite(m).all():
        raise ValueError("scores must be finite")

    ranks = np.empty_like(m)
    tie_sum = 0.0
    for i in range(n):
        ranks[i] = _rank_desc(m[i])
        _, tie_counts = np.unique(m[i], return_counts=True)
        tie_sum += float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())

    avg_ranks = tuple(float(r) for r in ranks.mean(axis=0))
    dof = k - 1
    correction = 1.0 - tie_sum / (n * k * (k * k - 1.0))
    centered = float(np.square(np.asarray(avg_ranks) - (k + 1) / 2.0).sum())
    if correction == 0.0:
        # fully tied everywhere; the numerator is necessarily zero too
        return 0.0, dof, 1.0, avg_ranks
    statistic = (12.0 * n / (k * (k + 1.0))) * centered / correction
    return statistic, dof, chi_square_sf(statistic, dof), avg_ranks


# --- chi-square survival function -------------------------------------------

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10000


def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) for x < a + 1."""
    term = 1.0 / a
    total = term
    for n in range(1, _MAX_ITER):
        term *= x / (a + n)
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise RuntimeError(f"series for P({a}, {x}) did not converge")


def _upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) for x >= a + 1, by the
    Lentz continued-fraction evaluation."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b if b != 0.0 else 1.0 / _TINY
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise RuntimeError(f"continued fraction for Q({a}, {x}) did not converge")


def chi_square_sf(x: float, dof: int) -> float:
    """P(X >= x) for a chi-square variable with `dof` degrees of freedom.

    Computed as the regularized upper incomplete gamma Q(dof/2, x/2); the
    series branch serves small x and the continued fraction the rest, with
    absolute error below 1e-10 across the tested range.
    """
    if dof < 1 or int(dof) != dof:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    if not x >= 0.0:
        raise ValueError(f"x must be >= 0, got {x}")
    if x == 0.0:
        return 1.0
    a = dof / 2.0
    half = x / 2.0
    if half < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _lower_gamma_series(a, half)))
    return min(1.0, max(0.0, _upper_gamma_cf(a, half)))


# --- file formats -------------------------------------------------------------


def load_annotations_csv(path, categories: tuple = DEFAULT_CATEGORIES) -> AnnotationTable:
    """Read a CSV with header item,rater,label into an AnnotationTable.

    Items keep first-appearance order; every item must carry the same number
    of labels, and an (item, rater) pair may appear only once.
    """
    per_item: dict[str, list] = {}
    seen_pairs = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["item", "rater", "label"]:
            raise ValueError(f"{path}: expected CSV header 'item,rater,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            item, rater, label_text = (f.strip() for f in row)
            if (item, rater) in seen_pairs:
                raise ValueError(f"{path}:{lineno}: duplicate rating for "
                                 f"item {item!r} by rater {rater!r}")
            seen_pairs.add((item, rater))
            try:
                label = int(label_text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {label_text!r} is not "
                                 f"an integer") from None
            per_item.setdefault(item, []).append(label)
    if not per_item:
        raise ValueError(f"{path}: no annotations found")
    k_counts = {len(v) for v in per_item.values()}
    if len(k_counts) != 1:
        raise ValueError(
            f"{path}: items have unequal numbers of ratings ({sorted(k_counts)})")
    labels = np.array(list(per_item.values()), dtype=np.int64)
    return AnnotationTable(labels=labels, categories=categories)


def load_scores_csv(path):
    """Read a Friedman score matrix: header row of treatment names, one CSV
    row of scores per subject. Returns (names, N x k float matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise ValueError(f"{path}: expected a header row with at least "
                             f"two treatment names")
        names = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(names):
                raise ValueError(f"{path}:{lineno}: expected {len(names)} "
                                 f"scores, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric score") from None
    if not rows:
        raise ValueError(f"{path}: no score rows found")
    return names, np.array(rows, dtype=np.float64)
