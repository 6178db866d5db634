"""Scenario configuration: JSON schema, validation and round trip.

Units: ``spatial_resolution`` in meters per cell, ``temporal_resolution`` in
seconds per time step, ``safety_threshold`` in meters (``null`` means one
cell). Cells are ``[x, y]`` integer pairs. ``roads`` lists the drivable rows
and columns of a crossroad; every other cell is an obstacle, as is every cell
in ``obstacles``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple, Union

from .preference import PreferenceParams
from .stgrid import GridSpec

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Malformed scenario; carries the offending field path and line when known."""

    def __init__(self, message: str, field_path: str = "", line: Optional[int] = None):
        self.field_path = field_path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(f"field '{field_path}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class SimConfig:
    horizon: int = 6
    max_stay: int = 2
    d_tor: float = 2.0
    epsilon: float = 1e-3
    execute_steps: int = 1
    safety_threshold: Optional[float] = None
    ticks_per_step: int = 4
    max_cycles: int = 100
    seed: int = 0
    solver_max_iter: int = 500
    merge_waits: bool = False

    def validate(self):
        if self.horizon < 2:
            raise ScenarioError("must be >= 2", "sim.horizon")
        if self.max_stay < 1:
            raise ScenarioError("must be >= 1", "sim.max_stay")
        if not 1 <= self.execute_steps < self.horizon:
            raise ScenarioError("must satisfy 1 <= execute_steps < horizon", "sim.execute_steps")
        if self.d_tor < 0:
            raise ScenarioError("must be >= 0", "sim.d_tor")
        if not self.epsilon > 0:
            raise ScenarioError("must be > 0", "sim.epsilon")
        if self.safety_threshold is not None and not self.safety_threshold > 0:
            raise ScenarioError("must be > 0", "sim.safety_threshold")
        if self.ticks_per_step < 1:
            raise ScenarioError("must be >= 1", "sim.ticks_per_step")
        if self.max_cycles < 1:
            raise ScenarioError("must be >= 1", "sim.max_cycles")


@dataclass
class VehicleConfig:
    id: str
    start: Tuple[int, int]
    goal: Tuple[int, int]
    direction: str = ""
    alpha: float = 0.0
    beta: float = 1.0
    comfort_weight: float = 1.0
    efficiency_weight: float = 1.0

    @property
    def params(self) -> PreferenceParams:
        return PreferenceParams(self.alpha, self.beta, self.comfort_weight, self.efficiency_weight)


@dataclass
class GridConfig:
    spatial_resolution: float = 0.3
    temporal_resolution: float = 0.6
    width: int = 10
    height: int = 10


@dataclass
class ScenarioConfig:
    name: str
    grid: GridConfig
    vehicles: List[VehicleConfig]
    roads: Optional[Dict[str, List[int]]] = None
    obstacles: List[Tuple[int, int]] = field(default_factory=list)
    sim: SimConfig = field(default_factory=SimConfig)
    description: str = ""
    schema_version: int = SCHEMA_VERSION

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return GridSpec(g.spatial_resolution, g.temporal_resolution, g.width, g.height,
                        self.sim.horizon)

    def obstacle_set(self) -> Set[Tuple[int, int]]:
        out = {tuple(c) for c in self.obstacles}
        if self.roads is not None:
            rows = set(self.roads.get("rows", []))
            cols = set(self.roads.get("columns", []))
            for x in range(self.grid.width):
                for y in range(self.grid.height):
                    if y not in rows and x not in cols:
                        out.add((x, y))
        return out

    @property
    def safety_threshold(self) -> float:
        t = self.sim.safety_threshold
        return self.grid.spatial_resolution if t is None else t

    def validate(self) -> "ScenarioConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported schema version {self.schema_version}", "schema_version")
        try:
            spec = self.grid_spec()
        except ValueError as exc:
            raise ScenarioError(str(exc), "grid") from exc
        self.sim.validate()
        if self.roads is not None:
            extra = set(self.roads) - {"rows", "columns"}
            if extra:
                raise ScenarioError(f"unknown keys {sorted(extra)}", "roads")
        for i, c in enumerate(self.obstacles):
            if not spec.contains(c):
                raise ScenarioError(f"cell {list(c)} outside the grid", f"obstacles[{i}]")
        if not self.vehicles:
            raise ScenarioError("at least one vehicle is required", "vehicles")
        blocked = self.obstacle_set()
        seen_ids, seen_starts = set(), set()
        for i, v in enumerate(self.vehicles):
            for name in ("start", "goal"):
                c = getattr(v, name)
                if not spec.contains(c):
                    raise ScenarioError(f"cell {list(c)} outside the grid", f"vehicles[{i}].{name}")
                if tuple(c) in blocked:
                    raise ScenarioError(f"cell {list(c)} is an obstacle", f"vehicles[{i}].{name}")
            if v.id in seen_ids:
                raise ScenarioError(f"duplicate vehicle id {v.id!r}", f"vehicles[{i}].id")
            if tuple(v.start) in seen_starts:
                raise ScenarioError(f"start {list(v.start)} shared with another vehicle",
                                    f"vehicles[{i}].start")
            seen_ids.add(v.id)
            seen_starts.add(tuple(v.start))
            try:
                v.params
            except ValueError as exc:
                raise ScenarioError(str(exc), f"vehicles[{i}]") from exc
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "schema_version": self.schema_version,
            "name": self.name,
            "description": self.description,
            "grid": asdict(self.grid),
            "roads": self.roads,
            "obstacles": [list(c) for c in self.obstacles],
            "vehicles": [],
            "sim": asdict(self.sim),
        }
        for v in self.vehicles:
            vd = asdict(v)
            vd["start"], vd["goal"] = list(v.start), list(v.goal)
            d["vehicles"].append(vd)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_overrides(self, **sim_overrides) -> "ScenarioConfig":
        data = self.to_dict()
        for k, v in sim_overrides.items():
            if v is not None:
                data["sim"][k] = v
        return scenario_from_dict(data)


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _build(cls, data: Any, path: str, text: Optional[str]):
    if not isinstance(data, dict):
        raise ScenarioError("expected an object", path, _line_of(text, path.rsplit(".", 1)[-1]))
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ScenarioError("unknown field", f"{path}.{key}" if path else key, _line_of(text, key))
    try:
        return cls(**data)
    except TypeError as exc:
        raise ScenarioError(str(exc), path) from exc


def _cell(value, path, text, key):
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(c, int) and not isinstance(c, bool) for c in value)):
        raise ScenarioError("expected an [x, y] integer pair", path, _line_of(text, key))
    return (int(value[0]), int(value[1]))


def _check_types(obj, path, text):
    for f in fields(obj):
        v = getattr(obj, f.name)
        want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        bad = False
        if want == "int":
            bad = not isinstance(v, int) or isinstance(v, bool)
        elif want == "float":
            bad = not isinstance(v, (int, float)) or isinstance(v, bool)
            if not bad:
                setattr(obj, f.name, float(v))
        elif want == "Optional[float]":
            bad = v is not None and (not isinstance(v, (int, float)) or isinstance(v, bool))
            if not bad and v is not None:
                setattr(obj, f.name, float(v))
        elif want == "bool":
            bad = not isinstance(v, bool)
        elif want == "str":
            bad = not isinstance(v, str)
        if bad:
            raise ScenarioError(f"expected {want}, got {type(v).__name__}",
                                f"{path}.{f.name}", _line_of(text, f.name))


def scenario_from_dict(data: Dict[str, Any], text: Optional[str] = None) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object")
    data = dict(data)
    for key in ("name", "grid", "vehicles"):
        if key not in data:
            raise ScenarioError("missing required field", key)
    grid = _build(GridConfig, data.pop("grid"), "grid", text)
    _check_types(grid, "grid", text)
    sim = _build(SimConfig, data.pop("sim", {}) or {}, "sim", text)
    _check_types(sim, "sim", text)
    raw_vehicles = data.pop("vehicles")
    if not isinstance(raw_vehicles, list):
        raise ScenarioError("expected a list", "vehicles", _line_of(text, "vehicles"))
    vehicles = []
    for i, rv in enumerate(raw_vehicles):
        v = _build(VehicleConfig, rv, f"vehicles[{i}]", text)
        v.start = _cell(v.start, f"vehicles[{i}].start", text, "start")
        v.goal = _cell(v.goal, f"vehicles[{i}].goal", text, "goal")
        v.id = str(v.id)
        _check_types(v, f"vehicles[{i}]", text)
        vehicles.append(v)
    obstacles = [_cell(c, f"obstacles[{i}]", text, "obstacles")
                 for i, c in enumerate(data.pop("obstacles", []) or [])]
    roads = data.pop("roads", None)
    known = {f.name for f in fields(ScenarioConfig)}
    for key in data:
        if key not in known:
            raise ScenarioError("unknown field", key, _line_of(text, key))
    cfg = ScenarioConfig(grid=grid, vehicles=vehicles, sim=sim, obstacles=obstacles,
                         roads=roads, **data)
    return cfg.validate()


def load_scenario(source: Union[str, Path]) -> ScenarioConfig:
    """Read a scenario file, or a bundled scenario by name (e.g. ``"two_vehicle_crossing"``)."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        text = bundled_scenario_text(str(source))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno) from exc
    return scenario_from_dict(data, text)


def bundled_scenarios() -> List[str]:
    files = resources.files("ceplan").joinpath("scenarios").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def bundled_scenario_text(name: str) -> str:
    name = name[:-5] if name.endswith(".json") else name
    res = resources.files("ceplan").joinpath("scenarios", f"{name}.json")
    if not res.is_file():
        raise ScenarioError(f"no scenario file or bundled scenario named {name!r}")
    return res.read_text()
