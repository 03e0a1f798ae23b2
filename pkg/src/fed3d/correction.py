"""Local-global class-aware gradient correction.

Per-sample measures are ``g_i = 1 - p_i`` with ``p_i`` the softmax
probability of the true class: the magnitude of the cross-entropy gradient at
the true-class logit. Clients summarise them per class; the server turns the
summaries into per-class exponents that sharpen or flatten the batch weights.

Class statistics use ``nan`` as the marker for a class the client never saw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fed3d import tensor as tn

log = logging.getLogger(__name__)

ABSENT = float("nan")


def grad_measure(true_class_prob):
    """``|p - 1|`` for a probability (or array of probabilities) in [0, 1]."""
    p = np.asarray(true_class_prob, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"probability outside [0, 1]: {true_class_prob!r}")
    g = np.abs(p - 1.0)
    return float(g) if g.ndim == 0 else g


def _normalise(weights: np.ndarray) -> np.ndarray:
    b = weights.shape[0]
    total = weights.sum()
    if total <= 0.0:
        log.warning("degenerate batch of %d samples: all measures zero, using unit weights", b)
        return np.ones(b)
    return b * weights / total


def local_coefficients(measures) -> np.ndarray:
    """``R_i = B g_i / sum_b g_b``; all ones when every measure is zero."""
    g = np.asarray(measures, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("need a non-empty 1-d batch of measures")
    return _normalise(g)


def corrected_coefficients(measures, labels, global_coeffs) -> np.ndarray:
    """Batch weights after raising each measure to its class exponent.

    ``R_hat_i = B g_i^{G[y_i]} / sum_b g_b^{G[y_b]}``. A zero measure stays
    zero for any positive exponent.
    """
    g = np.asarray(measures, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    G = np.asarray(global_coeffs, dtype=np.float64)
    if g.shape != y.shape:
        raise ValueError(f"{g.size} measures but {y.size} labels")
    return _normalise(np.power(g, G[y]))


def weighted_loss(per_sample_losses: tn.Tensor, coefficients) -> tn.Tensor:
    """Mean of coefficient-scaled losses; coefficients carry no gradient."""
    return tn.weighted_mean(per_sample_losses, coefficients)


def class_distribution_stats(measures, labels, n_classes: int) -> np.ndarray:
    """Mean measure per class over a client's samples, ``nan`` where absent."""
    g = np.asarray(measures, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if g.size == 0:
        raise ValueError("class statistics need at least one sample")
    sums = np.bincount(y, weights=g, minlength=n_classes)
    counts = np.bincount(y, minlength=n_classes)
    out = np.full(n_classes, ABSENT)
    seen = counts > 0
    out[seen] = sums[seen] / counts[seen]
    return out


class StatsAccumulator:
    """Streaming version of :func:`class_distribution_stats`."""

    def __init__(self, n_classes: int):
        self.sums = np.zeros(n_classes)
        self.counts = np.zeros(n_classes, dtype=np.int64)

    def update(self, measures, labels) -> None:
        y = np.asarray(labels, dtype=np.int64)
        n = self.sums.size
        self.sums += np.bincount(y, weights=np.asarray(measures, dtype=np.float64), minlength=n)
        self.counts += np.bincount(y, minlength=n)

    def result(self) -> np.ndarray:
        out = np.full(self.sums.size, ABSENT)
        seen = self.counts > 0
        out[seen] = self.sums[seen] / self.counts[seen]
        return out


def global_coefficients(client_stats, n_classes: int, previous=None) -> np.ndarray:
    """Per-class exponents from the selected clients' class statistics.

    ``G_o = ln(1 + 2 S O sum_c R[c, o] / sum_c sum_o R[c, o])`` with absent
    entries counted as zero. If every statistic is zero the previous
    coefficients are kept (ones when there are none).
    """
    stats = np.atleast_2d(np.asarray(client_stats, dtype=np.float64))
    S = stats.shape[0]
    if stats.shape[1] != n_classes:
        raise ValueError(f"stats have {stats.shape[1]} classes, expected {n_classes}")
    filled = np.where(np.isnan(stats), 0.0, stats)
    per_class = filled.sum(axis=0)
    total = per_class.sum()
    if not total > 0.0:
        log.warning("all class statistics are zero across %d clients; keeping previous coefficients", S)
        return np.ones(n_classes) if previous is None else np.asarray(previous, dtype=np.float64).copy()
    return np.log1p(2.0 * S * n_classes * per_class / total)


@dataclass
class CorrectionState:
    n_classes: int
    global_coeffs: np.ndarray = field(default=None)
    client_stats: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.global_coeffs is None:
            self.global_coeffs = np.ones(self.n_classes)

    def refresh(self, stats_by_client: dict[int, np.ndarray]) -> np.ndarray:
        self.client_stats = dict(sorted(stats_by_client.items()))
        if self.client_stats:
            rows = [self.client_stats[c] for c in self.client_stats]
            self.global_coeffs = global_coefficients(rows, self.n_classes, self.global_coeffs)
            log.debug("refreshed global coefficients from S=%d clients: %s", len(rows),
                      np.array2string(self.global_coeffs, precision=4))
        return self.global_coeffs


def sample_weights(mode: str, true_prob: np.ndarray, labels, global_coeffs) -> np.ndarray:
    """Batch coefficients for a correction mode: ``off``, ``local`` or ``local_global``."""
    if mode == "off":
        return np.ones(len(true_prob))
    g = grad_measure(np.clip(true_prob, 0.0, 1.0))
    if mode == "local":
        return local_coefficients(g)
    if mode == "local_global":
        return corrected_coefficients(g, labels, global_coeffs)
    raise ValueError(f"unknown correction mode {mode!r}")
