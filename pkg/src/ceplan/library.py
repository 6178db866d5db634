"""Global grid path (A*) and the per-vehicle coarse trajectory library."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import AbstractSet, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .stgrid import GridBoundsError, GridSpec

CellXY = Tuple[int, int]


class UnreachableError(RuntimeError):
    pass


class DegenerateTrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class CoarseTrajectory:
    """N grid cells, one per time step, plus the path index of each cell."""

    cells: Tuple[CellXY, ...]
    path_indices: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def waits(self) -> int:
        return sum(1 for a, b in zip(self.cells, self.cells[1:]) if a == b)


@dataclass
class TrajectoryLibrary:
    vehicle_id: Hashable
    start_index: int
    trajectories: List[CoarseTrajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i: int) -> CoarseTrajectory:
        return self.trajectories[i]

    def __iter__(self):
        return iter(self.trajectories)


def _neighbors(cell: CellXY):
    x, y = cell
    return ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1))


def astar(start: CellXY, goal: CellXY, obstacles: AbstractSet[CellXY],
          spec: GridSpec) -> List[CellXY]:
    """Shortest 4-connected path from ``start`` to ``goal`` (both inclusive).

    Manhattan heuristic; ties broken by the smaller heuristic value and then by
    insertion order so the result is deterministic.
    """
    start, goal = tuple(start), tuple(goal)
    for c in (start, goal):
        if not spec.contains(c):
            raise GridBoundsError(f"cell {c} outside the grid")
        if c in obstacles:
            raise UnreachableError(f"cell {c} is an obstacle")

    def h(c):
        return abs(c[0] - goal[0]) + abs(c[1] - goal[1])

    counter = itertools.count()
    open_heap = [(h(start), h(start), next(counter), start)]
    g_cost = {start: 0}
    parent = {start: None}
    closed = set()
    while open_heap:
        _, _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        closed.add(cur)
        for nb in _neighbors(cur):
            if not spec.contains(nb) or nb in obstacles or nb in closed:
                continue
            g = g_cost[cur] + 1
            if g < g_cost.get(nb, math.inf):
                g_cost[nb] = g
                parent[nb] = cur
                heapq.heappush(open_heap, (g + h(nb), h(nb), next(counter), nb))
    raise UnreachableError(f"no path from {start} to {goal}")


def project_onto_path(position: Sequence[float], path: Sequence[CellXY],
                      spec: GridSpec) -> int:
    """Index of the path cell whose center is nearest to ``position``.

    Ties go to the larger index (forward progress).
    """
    best, best_d = 0, math.inf
    for i, cell in enumerate(path):
        cx, cy = spec.cell_center(cell)
        d = (cx - position[0]) ** 2 + (cy - position[1]) ** 2
        if d <= best_d:
            best, best_d = i, d
    return best


def generate_trajectory_library(path: Sequence[CellXY], N: int, m: int, l: int,
                                vehicle_id: Hashable = None) -> TrajectoryLibrary:
    """Enumerate every N-step trajectory that walks the path forward from index ``l``.

    Each path point is held for 1..m consecutive steps. Once the final path
    point (the goal) is reached the remaining steps are spent waiting there,
    exempt from the ``m`` bound. Trajectories come out in depth-first order with
    the shortest stays first, so index 0 is always the fastest trajectory.
    """
    if not path:
        raise ValueError("empty path")
    if N < 1 or m < 1:
        raise ValueError("N and m must be >= 1")
    if not 0 <= l < len(path):
        raise ValueError(f"start index {l} outside path of length {len(path)}")
    last = len(path) - 1
    out: List[CoarseTrajectory] = []
    idx: List[int] = []

    def expand(j: int, remaining: int):
        if j == last:
            idx.extend([j] * remaining)
            out.append(_make(path, idx))
            del idx[-remaining:]
            return
        for stay in range(1, min(m, remaining) + 1):
            idx.extend([j] * stay)
            if stay == remaining:
                out.append(_make(path, idx))
            else:
                expand(j + 1, remaining - stay)
            del idx[-stay:]

    expand(l, N)
    return TrajectoryLibrary(vehicle_id=vehicle_id, start_index=l, trajectories=out)


def _make(path, idx) -> CoarseTrajectory:
    return CoarseTrajectory(cells=tuple(tuple(path[j]) for j in idx),
                            path_indices=tuple(idx))


def composition_count(N: int, m: int) -> int:
    """Number of compositions of N into parts from 1..m."""
    c = [1] + [0] * N
    for n in range(1, N + 1):
        c[n] = sum(c[n - j] for j in range(1, min(m, n) + 1))
    return c[N]


def trajectory_stats(traj, spec: GridSpec) -> Tuple[float, float]:
    """Arc length (m) and mean second-difference acceleration (m/s^2).

    Positions are cell centers sampled every ``spec.temporal_resolution``
    seconds. With only two points the acceleration is reported as 0.
    """
    cells = traj.cells if isinstance(traj, CoarseTrajectory) else traj
    if len(cells) < 2:
        raise DegenerateTrajectoryError("need at least two trajectory points")
    pts = (np.asarray(cells, dtype=float) + 0.5) * spec.spatial_resolution
    s = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    if len(cells) < 3:
        return s, 0.0
    dd = pts[2:] - 2.0 * pts[1:-1] + pts[:-2]
    acc = float(np.mean(np.linalg.norm(dd, axis=1))) / spec.temporal_resolution ** 2
    return s, acc


def library_stats(library: TrajectoryLibrary, spec: GridSpec,
                  path: Optional[Sequence[CellXY]] = None) -> np.ndarray:
    """``(k, 2)`` array of (arc length, mean acceleration) per trajectory.

    With ``path`` the goal-padding steps are scored as if the path carried on
    straight past the goal (see :func:`extend_past_goal`).
    """
    trajs = list(library)
    if path is not None:
        trajs = [extend_past_goal(t, path) for t in trajs]
    return np.array([trajectory_stats(t, spec) for t in trajs], dtype=float).reshape(-1, 2)


def extend_past_goal(traj: CoarseTrajectory, path: Sequence[CellXY]) -> List[CellXY]:
    """Cells of ``traj`` with the padding at the goal replaced by virtual cells.

    Goal padding is an artifact of the finite path: idling at the goal would
    otherwise score like an equally long wait earlier on, and the stop at the
    goal would count as braking. The virtual cells continue at one cell per
    step along the last path direction; they may lie outside the grid and are
    only used for scoring.
    """
    last = len(path) - 1
    cells = [tuple(c) for c in traj.cells]
    if last < 1:
        return cells
    dx = path[last][0] - path[last - 1][0]
    dy = path[last][1] - path[last - 1][1]
    out, extra = [], 0
    for c, j in zip(cells, traj.path_indices):
        if extra or (j == last and out and out[-1] == tuple(path[last])):
            extra += 1
            out.append((path[last][0] + extra * dx, path[last][1] + extra * dy))
        else:
            out.append(c)
    return out


def path_lookup(path: Sequence[CellXY]) -> dict:
    return {tuple(c): i for i, c in enumerate(path)}


def current_path_index(position, path: Sequence[CellXY], spec: GridSpec,
                       cell: Optional[CellXY] = None) -> int:
    # the containing cell wins over the nearest-center projection when on path
    if cell is not None:
        lut = path_lookup(path)
        if tuple(cell) in lut:
            return lut[tuple(cell)]
    return project_onto_path(position, path, spec)
