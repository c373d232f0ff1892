"""Per-region biomarker calls from a posterior chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampler import PosteriorChain

__all__ = ["DetectionReport", "canonical_sign", "covariance_intervals", "rank_regions"]


@dataclass(frozen=True)
class DetectionReport:
    """Posterior summaries of the region/attribute covariances.

    ``reflected`` records whether the global reflection was applied to put
    the largest-magnitude posterior mean on the positive side.
    """

    node_labels: tuple
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    significant: np.ndarray
    level: float
    reflected: bool

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())

    def rows(self):
        for u, lab in enumerate(self.node_labels):
            yield (u + 1, lab, float(self.mean[u]), float(self.lower[u]),
                   float(self.upper[u]), bool(self.significant[u]))


def canonical_sign(samples: np.ndarray) -> int:
    """+1 or -1 so that the entry with the largest |posterior mean| is positive."""
    m = samples.mean(axis=0)
    if m.size == 0 or not np.any(m):
        return 1
    j = int(np.argmax(np.abs(m)))
    return -1 if m[j] < 0 else 1


def covariance_intervals(chain: PosteriorChain, level: float = 0.95) -> DetectionReport:
    """Equal-tailed credible intervals for each region's coupling covariance."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    samples = np.asarray(chain.lambda_ztheta, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("chain has no retained draws")
    sign = canonical_sign(samples)
    samples = sign * samples
    alpha = 0.5 * (1.0 - level)
    lower, upper = np.quantile(samples, [alpha, 1.0 - alpha], axis=0)
    labels = tuple(chain.node_labels) or tuple(f"R{u + 1}" for u in range(samples.shape[1]))
    return DetectionReport(
        node_labels=labels, mean=samples.mean(axis=0), lower=lower, upper=upper,
        significant=(lower > 0) | (upper < 0), level=level, reflected=sign < 0)


def rank_regions(report: DetectionReport) -> np.ndarray:
    """Region indices (0-based) by |posterior mean| descending, index ascending on ties."""
    m = np.abs(np.asarray(report.mean))
    return np.lexsort((np.arange(m.size), -m))
