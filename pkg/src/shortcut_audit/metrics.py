"""Confusion-matrix metrics, chance baselines and the exact binomial tail."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import PRESENT, LabeledDataset
from .errors import EmptyMatrix, InvalidBaseline

FIXED_BASELINE = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with "present" (label 1) as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def correct(self) -> int:
        return self.tp + self.tn

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionMatrix":
        t = np.asarray(y_true) == PRESENT
        p = np.asarray(y_pred) == PRESENT
        if t.shape != p.shape:
            raise ValueError(f"{t.size} labels vs {p.size} predictions")
        return cls(int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metric_set(cm: ConfusionMatrix) -> MetricSet:
    """Accuracy, precision, recall and F1 as fractions; 0/0 gives 0."""
    if cm.total < 1:
        raise EmptyMatrix("confusion matrix is empty")
    return MetricSet(
        accuracy=cm.correct / cm.total,
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        recall=_ratio(cm.tp, cm.tp + cm.fn),
        # harmonic mean of precision and recall, single rounding
        f1=_ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
    )


def binomial_exceedance(k: int, n: int, p0: float) -> float:
    """One-sided exact tail P[X >= k] for X ~ Binomial(n, p0).

    Terms are formed in log space (exact integer binomial coefficients) and
    combined with a running log-sum-exp, so tiny tails do not underflow
    before the final exponentiation.
    """
    if not 0.0 < p0 < 1.0 or math.isnan(p0):
        raise InvalidBaseline(f"baseline rate must lie in (0, 1), got {p0}")
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need n >= 1 and 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return 1.0
    log_p, log_q = math.log(p0), math.log1p(-p0)
    acc = -math.inf
    for j in range(k, n + 1):
        term = math.log(math.comb(n, j)) + j * log_p + (n - j) * log_q
        if term > acc:
            acc = term + math.log1p(math.exp(acc - term))
        else:
            acc = acc + math.log1p(math.exp(term - acc))
    return min(1.0, math.exp(acc))


def binomial_interval(n: int, p: float, coverage: float = 0.95) -> tuple[float, float]:
    """Central interval [lo, hi] (as rates) holding >= ``coverage`` of Binomial(n, p).

    ``lo`` is the largest k/n with P[X < k] <= (1-coverage)/2, ``hi`` the
    smallest with P[X > k] <= (1-coverage)/2.
    """
    tail = (1.0 - coverage) / 2.0
    lo = 0
    while lo < n and 1.0 - binomial_exceedance(lo + 1, n, p) <= tail:
        lo += 1
    hi = n
    while hi > 0 and binomial_exceedance(hi, n, p) <= tail:
        hi -= 1
    return lo / n, hi / n


@dataclass(frozen=True)
class ChanceBaselines:
    fixed: float
    majority_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def chance_baselines(dataset: LabeledDataset) -> ChanceBaselines:
    if len(dataset) == 0:
        raise ValueError("cannot compute baselines of an empty dataset")
    counts = dataset.label_counts()
    return ChanceBaselines(FIXED_BASELINE, max(counts.values()) / len(dataset))
