"""Ranking metrics and the reward-distribution analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. a single class)."""


def auc(scores, labels) -> float:
    """ROC AUC via the rank-sum statistic with average ranks for ties.

    Equals P(score_pos > score_neg) + 0.5 * P(tie) over all pos/neg pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, users) -> float:
    """Impression-weighted mean of per-user AUC over users with both labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    users = np.asarray(users)
    order = np.argsort(users, kind="stable")
    u_sorted = users[order]
    cuts = np.flatnonzero(u_sorted[1:] != u_sorted[:-1]) + 1
    num = 0.0
    den = 0
    for rows in np.split(order, cuts):
        y = labels[rows]
        if y.size == 0 or y.min() == y.max():
            continue
        num += rows.size * auc(scores[rows], y)
        den += rows.size
    if den == 0:
        raise UndefinedMetricError("GAUC needs a user with both clicked and unclicked impressions")
    return num / den


N_BUCKETS = 100


@dataclass
class RewardDistribution:
    """Per-bucket proportions for the four curves, keyed like ``"tsp/click"``."""

    curves: dict[str, np.ndarray]
    degenerate: dict[str, bool]
    n_buckets: int = N_BUCKETS

    def mean_bucket(self, curve: str) -> float:
        return float(np.dot(np.arange(self.n_buckets), self.curves[curve]))

    def occupied(self, curve: str) -> int:
        return int((self.curves[curve] > 0).sum())

    def support(self, model: str) -> int:
        """Buckets holding any of ``model``'s records, clicked or not."""
        return int(((self.curves[f"{model}/click"] > 0) | (self.curves[f"{model}/unclick"] > 0)).sum())

    def summary(self) -> dict:
        return {name: {"mean_bucket": self.mean_bucket(name), "occupied_buckets": self.occupied(name)}
                for name in self.curves}

    def table_rows(self) -> list[list]:
        names = list(self.curves)
        return [[b] + [float(self.curves[n][b]) for n in names] for b in range(self.n_buckets)]


def bucketize(rewards, n_buckets: int = N_BUCKETS) -> tuple[np.ndarray, bool]:
    """Min-max normalise and assign equal-width buckets; flag zero variance."""
    r = np.asarray(rewards, dtype=np.float64)
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros(r.size, dtype=np.int64), True
    norm = (r - lo) / (hi - lo)
    return np.minimum((norm * n_buckets).astype(np.int64), n_buckets - 1), False


def reward_distribution(records_a, records_b, names=("tsp", "non_tsp"),
                        n_buckets: int = N_BUCKETS) -> RewardDistribution:
    """Four bucket-proportion curves from two models' (reward, label) records.

    Each record set is a pair ``(rewards, labels)``; rewards are normalised
    within their own model before bucketing.
    """
    curves: dict[str, np.ndarray] = {}
    degenerate: dict[str, bool] = {}
    for name, (rewards, labels) in zip(names, (records_a, records_b)):
        rewards = np.asarray(rewards)
        labels = np.asarray(labels)
        if rewards.size == 0:
            raise ValueError(f"no records for {name!r}")
        buckets, flat = bucketize(rewards, n_buckets)
        degenerate[name] = flat
        for tag, value in (("click", 1), ("unclick", 0)):
            sel = buckets[labels == value]
            counts = np.bincount(sel, minlength=n_buckets).astype(np.float64)
            curves[f"{name}/{tag}"] = counts / counts.sum() if counts.sum() else counts
    return RewardDistribution(curves=curves, degenerate=degenerate, n_buckets=n_buckets)
