"""Initial trajectory preferences from a multinomial logit choice model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

DEFAULT_EPSILON = 1e-3


@dataclass(frozen=True)
class PreferenceParams:
    """Vehicle-specific MNL parameters.

    The raw score of a trajectory is
    ``comfort_weight * avg_accel + efficiency_weight * (s_max - s)`` and its
    systematic utility is ``-(alpha + beta * score)``, so lower scores are
    preferred when ``beta > 0``.
    """

    alpha: float = 0.0
    beta: float = 1.0
    comfort_weight: float = 1.0
    efficiency_weight: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.beta) or not math.isfinite(self.alpha):
            raise ValueError("alpha and beta must be finite")
        if self.comfort_weight < 0 or self.efficiency_weight < 0:
            raise ValueError("mixing weights must be >= 0")
        if self.comfort_weight == 0 and self.efficiency_weight == 0:
            raise ValueError("mixing weights cannot both be zero")


def raw_preference(stats: Tuple[float, float], params: PreferenceParams,
                   s_max: float) -> float:
    s, acc = stats
    return params.comfort_weight * acc + params.efficiency_weight * (s_max - s)


def raw_preferences(stats: np.ndarray, params: PreferenceParams) -> np.ndarray:
    """Scores for a whole library; ``stats`` is the ``(k, 2)`` table of (s, accel)."""
    stats = np.asarray(stats, dtype=float).reshape(-1, 2)
    s_max = float(stats[:, 0].max())
    return np.array([raw_preference(row, params, s_max) for row in stats])


def mnl_probabilities(scores: Sequence[float], params: PreferenceParams) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty score vector")
    v = -(params.alpha + params.beta * scores)
    v = v - v.max()
    w = np.exp(v)
    return w / w.sum()


def initial_preferences(stats: np.ndarray, params: PreferenceParams) -> np.ndarray:
    return mnl_probabilities(raw_preferences(stats, params), params)
