"""Trajectory sampling and safety corridors (time-stamped rectangles)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .library import CoarseTrajectory, TrajectoryLibrary
from .stgrid import GridSpec, cell_bounds

CellXY = Tuple[int, int]
SeedLike = Union[int, Sequence[int], np.random.Generator, None]

_NORMALS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


class CorridorError(ValueError):
    pass


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def inverse_cdf_index(p: Sequence[float], u: float) -> int:
    """Smallest index whose cumulative probability exceeds ``u`` in [0, 1)."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValueError("empty distribution")
    if np.any(p < 0) or not p.sum() > 0:
        raise ValueError("invalid distribution")
    cdf = np.cumsum(p) / p.sum()
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


def sample_index(p: Sequence[float], seed: SeedLike = None) -> int:
    return inverse_cdf_index(p, _rng(seed).random())


def sample_trajectory(p: Sequence[float], library: Union[TrajectoryLibrary, Sequence[CoarseTrajectory]],
                      seed: SeedLike = None) -> CoarseTrajectory:
    """Draw one trajectory of ``library`` with probabilities ``p`` (inverse CDF)."""
    trajs = list(library)
    if not trajs:
        raise ValueError("empty library")
    if len(p) != len(trajs):
        raise ValueError(f"{len(p)} probabilities for {len(trajs)} trajectories")
    return trajs[sample_index(p, seed)]


@dataclass(frozen=True)
class CorridorSegment:
    """Axis-aligned box ``A x <= b`` that the vehicle occupies for ``duration`` seconds."""

    A: np.ndarray
    b: np.ndarray
    duration: float
    cells: Tuple[CellXY, ...]

    @property
    def lower(self) -> np.ndarray:
        return np.array([-self.b[1], -self.b[3]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.b[0], self.b[2]])

    def contains(self, point, tol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(point, dtype=float) <= self.b + tol))


def box_segment(lower, upper, duration: float, cells=()) -> CorridorSegment:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(upper < lower):
        raise CorridorError("empty rectangle")
    if not duration > 0:
        raise CorridorError("segment duration must be > 0")
    b = np.array([upper[0], -lower[0], upper[1], -lower[1]])
    return CorridorSegment(_NORMALS.copy(), b, float(duration), tuple(tuple(c) for c in cells))


@dataclass
class Corridor:
    segments: List[CorridorSegment]
    start_state: Optional[tuple] = None
    end_state: Optional[tuple] = None

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    @property
    def durations(self) -> np.ndarray:
        return np.array([s.duration for s in self.segments])

    @property
    def duration(self) -> float:
        return float(self.durations.sum())

    def start_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)[:-1]])


def _union_box(cells: Sequence[CellXY], spec: GridSpec):
    boxes = [cell_bounds(c, spec) for c in cells]
    lower = [min(b[0][0] for b in boxes), min(b[1][0] for b in boxes)]
    upper = [max(b[0][1] for b in boxes), max(b[1][1] for b in boxes)]
    return lower, upper


def build_corridor(traj: Union[CoarseTrajectory, Sequence[CellXY]], spec: GridSpec,
                   merge_waits: bool = True) -> Corridor:
    """Safety corridor of a coarse trajectory.

    Each move between consecutive cells gives the union rectangle of the two
    cells for one time step. With ``merge_waits`` (the default) a wait step
    adds its time to the preceding move segment, or to the first move when the
    trajectory starts by waiting, so the total duration is always
    ``(N - 1) * dt``. Without it every wait step becomes its own one-cell
    segment, which pins the schedule of every coarse step.
    """
    cells = [tuple(c) for c in (traj.cells if isinstance(traj, CoarseTrajectory) else traj)]
    if len(cells) < 2:
        raise CorridorError("need at least two trajectory points")
    dt = spec.temporal_resolution
    for a, b in zip(cells, cells[1:]):
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) > 1:
            raise CorridorError(f"cells {a} and {b} are not adjacent")

    if not merge_waits:
        segs = []
        for a, b in zip(cells, cells[1:]):
            pair = (a,) if a == b else (a, b)
            segs.append(box_segment(*_union_box(pair, spec), dt, pair))
        return Corridor(segs)

    # (cells, step count) per segment
    parts: List[list] = []
    leading = 0
    for a, b in zip(cells, cells[1:]):
        if a == b:
            if parts:
                parts[-1][1] += 1
            else:
                leading += 1
        else:
            parts.append([(a, b), 1 + leading])
            leading = 0
    if not parts:
        return Corridor([box_segment(*_union_box([cells[0]], spec), leading * dt, (cells[0],))])
    return Corridor([box_segment(*_union_box(pair, spec), n * dt, pair) for pair, n in parts])
