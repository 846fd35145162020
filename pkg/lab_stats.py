"""
Wiener Lab Statistics
Mergeable (count, mean, M2) accumulators and Monte Carlo standard errors.

Every estimator in the lab reduces per-path contributions batch by batch into
RunningStats and merges the batch accumulators in batch-index order, so the
result does not depend on how many workers produced the batches.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class RunningStats:
    """Welford accumulator; mean and m2 may be scalars or arrays (elementwise)."""
    count: int = 0
    mean: object = 0.0
    m2: object = 0.0

    @classmethod
    def from_array(cls, values, axis=0):
        values = np.asarray(values, dtype=float)
        count = values.shape[axis]
        if count == 0:
            shape = values.shape[:axis] + values.shape[axis + 1:]
            zeros = np.zeros(shape) if shape else 0.0
            return cls(0, zeros, zeros)
        mean = values.mean(axis=axis)
        m2 = ((values - np.expand_dims(mean, axis)) ** 2).sum(axis=axis)
        return cls(int(count), mean, m2)

    def push(self, value):
        self.count += 1
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)

    def merge(self, other):
        """Chan et al. pairwise merge; returns a new accumulator."""
        if other.count == 0:
            return RunningStats(self.count, self.mean, self.m2)
        if self.count == 0:
            return RunningStats(other.count, other.mean, other.m2)
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / count)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / count)
        return RunningStats(count, mean, m2)

    def size(self):
        return self.count

    def var(self):
        if self.count < 2:
            return self.m2 * 0.0
        return self.m2 / (self.count - 1)

    def std(self):
        return np.sqrt(self.var())

    def sem(self):
        if self.count < 2:
            return self.m2 * 0.0
        return np.sqrt(self.var() / self.count)


def merge_all(stats):
    """Fold accumulators left to right."""
    total = RunningStats()
    for s in stats:
        total = total.merge(s)
    return total


def batched_stats(contrib, batch):
    """Reduce per-path contributions (M,) or (M, R) batch by batch, merged in index order."""
    contrib = np.asarray(contrib, dtype=float)
    batch = np.asarray(batch)
    if contrib.shape[0] == 0:
        return RunningStats.from_array(contrib)
    order = np.argsort(batch, kind='stable')
    sorted_batch = batch[order]
    cuts = np.flatnonzero(np.diff(sorted_batch)) + 1
    parts = np.split(order, cuts)
    return merge_all(RunningStats.from_array(contrib[idx]) for idx in parts)


def mean_and_se(contrib, batch):
    """Monte Carlo mean and its standard error from per-path contributions."""
    stats = batched_stats(contrib, batch)
    return stats.mean, stats.sem()


def paired_difference(contrib_a, contrib_b, batch):
    """Mean and SE of a - b computed on shared paths (correlated, sharper SE)."""
    diff = np.asarray(contrib_a, dtype=float) - np.asarray(contrib_b, dtype=float)
    return mean_and_se(diff, batch)


def combined_se(*ses):
    """SE of a difference of independent estimates."""
    return float(np.sqrt(sum(float(s) ** 2 for s in ses)))


def z_score(value, reference, se):
    """|value - reference| in units of se (inf when se is zero and they differ)."""
    gap = abs(float(value) - float(reference))
    if se > 0:
        return gap / float(se)
    return 0.0 if gap == 0 else float('inf')


def fit_line(x, y, weights=None):
    """Weighted least-squares line y = a + b x; returns (a, b, se_a, se_b).

    weights multiply squared residuals (inverse variances). With only two points
    the residual scale is undefined and both SEs are NaN.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = None if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    if len(x) > 2:
        (b, a), cov = np.polyfit(x, y, 1, w=w, cov=True)
        return float(a), float(b), float(np.sqrt(cov[1, 1])), float(np.sqrt(cov[0, 0]))
    b, a = np.polyfit(x, y, 1, w=w)
    return float(a), float(b), np.nan, np.nan
