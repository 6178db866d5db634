"""Episode metrics and the safety/efficiency weight decomposition."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Hashable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .sim import EpisodeLog, count_braking, min_pairwise_distance


@dataclass
class EpisodeMetrics:
    """Summary of one episode.

    ``f`` is whole-pipeline planning cycles per wall-clock second and
    ``f_solve`` the same for the IM solve alone; both are ``None`` without
    timing data. ``t_total`` is ``None`` when some vehicle never arrived and
    ``d_min`` when no two vehicles approach from different directions.
    """

    f: Optional[float]
    f_solve: Optional[float]
    t_total: Optional[float]
    d_min: Optional[float]
    cycles: int
    braking: int

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


def _different_directions(directions: Mapping[str, str]):
    # unlabeled vehicles count as their own direction
    def pred(a, b):
        da, db = directions.get(a, ""), directions.get(b, "")
        return not da or not db or da != db
    return pred


def compute_metrics(log: EpisodeLog) -> EpisodeMetrics:
    plan = sum(t["plan_seconds"] for t in log.timing)
    solve = sum(t["solve_seconds"] for t in log.timing)
    n = len(log.timing)
    f = n / plan if n and plan > 0 else None
    f_solve = n / solve if n and solve > 0 else None
    arrivals = list(log.completion.values())
    t_total = None
    if arrivals and all(a is not None for a in arrivals):
        t_total = float(max(arrivals))
    d_min = None
    if len(log.vehicles) >= 2:
        d_min = min_pairwise_distance(log, _different_directions(log.directions))
    braking = int(sum(count_braking(log).values()))
    return EpisodeMetrics(f, f_solve, t_total, d_min, len(log.cycles), braking)


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def safety_efficiency_weights(runs: Mapping[Hashable, Tuple[float, float]]
                              ) -> Dict[Hashable, Tuple[float, float]]:
    """Per-algorithm ``(w_s, w_e)`` from ``{name: (d_min, t_total)}``.

    ``d_min`` and ``1 / t_total`` are min-max normalised across algorithms and
    each algorithm's pair of scores goes through a softmax. A metric on which
    all algorithms tie gives every algorithm a score of 0.5.
    """
    names = list(runs)
    if len(names) < 2:
        raise ValueError("need at least two algorithms to normalise")
    d = np.array([float(runs[k][0]) for k in names])
    t = np.array([float(runs[k][1]) for k in names])
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("d_min must be finite and >= 0")
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise ValueError("t_total must be finite and > 0")
    safety = _minmax(d)
    efficiency = _minmax(1.0 / t)
    out = {}
    for k, s, e in zip(names, safety, efficiency):
        m = max(s, e)
        ws, we = np.exp(s - m), np.exp(e - m)
        out[k] = (float(ws / (ws + we)), float(we / (ws + we)))
    return out


def braking_histogram(totals: Sequence[int]) -> Dict[int, float]:
    """Relative frequency of each total braking count."""
    totals = [int(x) for x in totals]
    if not totals:
        return {}
    counts = np.bincount(totals)
    return {k: float(c) / len(totals) for k, c in enumerate(counts) if c}
