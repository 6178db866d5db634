"""Spatial-temporal grid map and the cell -> vehicle occupancy index."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, NamedTuple, Sequence, Set, Tuple


class GridBoundsError(ValueError):
    pass


class DuplicateTrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Discretisation of the plane and of time.

    ``spatial_resolution`` is meters per cell, ``temporal_resolution`` seconds
    per time step. ``horizon`` is the number of time steps of a planning window.
    """

    spatial_resolution: float
    temporal_resolution: float
    width: int
    height: int
    horizon: int

    def __post_init__(self):
        if not self.spatial_resolution > 0:
            raise ValueError("spatial_resolution must be > 0")
        if not self.temporal_resolution > 0:
            raise ValueError("temporal_resolution must be > 0")
        for name in ("width", "height", "horizon"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def contains(self, cell: Tuple[int, int]) -> bool:
        x, y = cell[0], cell[1]
        return 0 <= x < self.width and 0 <= y < self.height

    def cell_center(self, cell: Tuple[int, int]) -> Tuple[float, float]:
        r = self.spatial_resolution
        return ((cell[0] + 0.5) * r, (cell[1] + 0.5) * r)

    def check_vehicle_size(self, vehicle_length: float) -> None:
        # cells must hold a whole vehicle; soft check only
        if vehicle_length > self.spatial_resolution:
            warnings.warn(
                f"vehicle length {vehicle_length} m exceeds cell size "
                f"{self.spatial_resolution} m",
                stacklevel=2,
            )


class Cell(NamedTuple):
    x: int
    y: int
    t: int


def world_to_cell(position: Sequence[float], spec: GridSpec) -> Tuple[int, int]:
    """Map a planar point in meters to the (half-open) cell that contains it."""
    res = spec.spatial_resolution
    ix = math.floor(position[0] / res)
    iy = math.floor(position[1] / res)
    # keep the result consistent with cell_bounds under representation error
    if (ix + 1) * res <= position[0]:
        ix += 1
    elif ix * res > position[0]:
        ix -= 1
    if (iy + 1) * res <= position[1]:
        iy += 1
    elif iy * res > position[1]:
        iy -= 1
    if not spec.contains((ix, iy)):
        raise GridBoundsError(f"position {tuple(position)} outside the grid")
    return ix, iy


def cell_bounds(cell: Tuple[int, int], spec: GridSpec) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Return ``((xmin, xmax), (ymin, ymax))`` of a spatial cell in meters."""
    if not spec.contains(cell):
        raise GridBoundsError(f"cell {tuple(cell)} outside the grid")
    r = spec.spatial_resolution
    x, y = cell[0], cell[1]
    return (x * r, (x + 1) * r), (y * r, (y + 1) * r)


class OccupancyIndex:
    """Hash map from spatial-temporal cell to the trajectories passing through it.

    Keys are :class:`Cell` values; each value is the set of
    ``(vehicle_id, trajectory_index)`` pairs whose trajectory occupies the
    spatial cell at that time index.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self._cells: Dict[Cell, Set[Tuple[Hashable, int]]] = defaultdict(set)
        self._inserted: Set[Tuple[Hashable, int]] = set()

    def insert_trajectory(self, vehicle_id: Hashable, traj_index: int,
                          trajectory: Iterable[Tuple[int, int]]) -> "OccupancyIndex":
        key = (vehicle_id, traj_index)
        if key in self._inserted:
            raise DuplicateTrajectoryError(f"trajectory {key} already inserted")
        cells = [tuple(c) for c in trajectory]
        if len(cells) != self.spec.horizon:
            raise ValueError(
                f"trajectory length {len(cells)} != horizon {self.spec.horizon}")
        for c in cells:
            if not self.spec.contains(c):
                raise GridBoundsError(f"cell {c} outside the grid")
        for t, (x, y) in enumerate(cells):
            self._cells[Cell(x, y, t)].add(key)
        self._inserted.add(key)
        return self

    def remove_vehicle(self, vehicle_id: Hashable) -> None:
        for cell in list(self._cells):
            members = {k for k in self._cells[cell] if k[0] != vehicle_id}
            if members:
                self._cells[cell] = members
            else:
                del self._cells[cell]
        self._inserted = {k for k in self._inserted if k[0] != vehicle_id}

    def query(self, cell: Cell) -> Set[Tuple[Hashable, int]]:
        return set(self._cells.get(Cell(*cell), ()))

    def items(self):
        return self._cells.items()

    def entry_count(self) -> int:
        return sum(len(v) for v in self._cells.values())

    def __len__(self) -> int:
        return len(self._cells)

    def __contains__(self, cell) -> bool:
        return Cell(*cell) in self._cells
