"""Receding-horizon closed-loop simulation of vehicles coordinated by the IM.

Every cycle each active vehicle projects itself onto its global path, builds
its trajectory library and initial preferences, and the IM solves for the
recommended distributions. Vehicles then sample, refine the sampled coarse
trajectory inside its safety corridor and track the refinement exactly for
``execute_steps`` coarse steps before the next cycle.

Sampling is joint: the IM acts as the correlation device and draws the
vehicles one after another in id order. A vehicle only considers library
entries whose executed steps are compatible with what the earlier vehicles
drew and with a fallback move reserved for every later vehicle (waiting in
place, or a single forced step when it is already moving), so a safe option
always exists when ``execute_steps < max_stay``. Within that set the draw is
an inverse-CDF draw on the renormalised recommendation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .coordinator import CEProblem, locate_risk_points, solve_recommendation
from .corridor import build_corridor, inverse_cdf_index
from .library import (CoarseTrajectory, astar, current_path_index, generate_trajectory_library,
                      library_stats, path_lookup)
from .preference import PreferenceParams, initial_preferences
from .refine import PiecewiseTrajectory, evaluate, refine_trajectory
from .scenario import ScenarioConfig, ScenarioError, SimConfig
from .stgrid import GridSpec, OccupancyIndex, world_to_cell

log = logging.getLogger(__name__)

CellXY = Tuple[int, int]
MOVING_SPEED = 1e-9


@dataclass
class VehicleState:
    vid: str
    order: int
    path: List[CellXY]
    goal: CellXY
    params: PreferenceParams
    direction: str
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    cell: CellXY
    path_index: int
    done: bool = False
    finish_time: Optional[float] = None

    @property
    def moving(self) -> bool:
        return float(np.linalg.norm(self.velocity)) > MOVING_SPEED


@dataclass
class CycleRecord:
    cycle: int
    time: float
    vehicles: List[str]
    risk_cells: List[Tuple[int, int, int]]
    initial: Dict[str, List[float]]
    recommended: Dict[str, List[float]]
    objective: float
    initial_objective: float
    converged: bool
    iterations: int
    used_fallback: bool
    chosen: Dict[str, int]
    coarse: Dict[str, List[CellXY]]
    unsafe_draws: List[str]


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    vehicles: List[str]
    directions: Dict[str, str]
    spatial_resolution: float
    temporal_resolution: float
    safety_threshold: float
    times: List[float] = field(default_factory=list)
    positions: List[Dict[str, Tuple[float, float]]] = field(default_factory=list)
    steps: List[Dict[str, CellXY]] = field(default_factory=list)
    braking: Dict[str, int] = field(default_factory=dict)
    completion: Dict[str, Optional[float]] = field(default_factory=dict)
    cycles: List[CycleRecord] = field(default_factory=list)
    collision: bool = False
    completed: bool = False
    # wall-clock data is kept out of equality so identical runs compare equal
    timing: List[Dict[str, float]] = field(default_factory=list, compare=False)

    @property
    def min_distance(self) -> Optional[float]:
        return min_pairwise_distance(self)


def pairwise_distances(positions: Mapping[str, Sequence[float]], pairs=None):
    ids = sorted(positions)
    out = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if pairs is not None and not pairs(ids[a], ids[b]):
                continue
            pa, pb = positions[ids[a]], positions[ids[b]]
            out.append(float(np.hypot(pa[0] - pb[0], pa[1] - pb[1])))
    return out


def min_pairwise_distance(log_: EpisodeLog, pairs=None) -> Optional[float]:
    best = None
    for pos in log_.positions:
        for d in pairwise_distances(pos, pairs):
            best = d if best is None else min(best, d)
    return best


def count_braking(log_: EpisodeLog) -> Dict[str, int]:
    """Executed coarse steps in which a vehicle stayed in its cell (before reaching its goal)."""
    counts = {v: 0 for v in log_.vehicles}
    for prev, cur in zip(log_.steps, log_.steps[1:]):
        for vid, cell in cur.items():
            if vid in prev and tuple(prev[vid]) == tuple(cell):
                counts[vid] += 1
    return counts


def step_cell_conflicts(log_: EpisodeLog) -> List[Tuple[int, CellXY]]:
    """(step, cell) pairs occupied by more than one vehicle in the executed steps."""
    out = []
    for k, cells in enumerate(log_.steps):
        seen = {}
        for vid in sorted(cells):
            c = tuple(cells[vid])
            if c in seen:
                out.append((k, c))
            seen[c] = vid
    return out


# -- joint sampling -----------------------------------------------------------

@dataclass(frozen=True)
class _Plan:
    swept: Tuple[FrozenSet[CellXY], ...]  # cells touched in executed steps 1..e
    end: CellXY
    next_swept: Optional[FrozenSet[CellXY]]  # step e+1 when still moving at the end
    hold: Optional[CellXY] = None  # cell the vehicle is committed to reach (end, or one more if moving)
    after: Optional[CellXY] = None  # next path cell beyond ``hold``


def _next_cells(path: Sequence[CellXY]) -> Dict[CellXY, CellXY]:
    return {tuple(a): tuple(b) for a, b in zip(path, path[1:])}


def _plan_of(cells: Sequence[CellXY], e: int, nxt_map: Optional[Mapping] = None) -> _Plan:
    swept = tuple(frozenset((cells[k - 1], cells[k])) for k in range(1, e + 1))
    nxt = None
    if e + 1 < len(cells) and cells[e - 1] != cells[e] and cells[e] != cells[e + 1]:
        nxt = frozenset((cells[e], cells[e + 1]))
    hold = tuple(cells[e + 1]) if nxt is not None else tuple(cells[e])
    after = nxt_map.get(hold) if nxt_map else None
    return _Plan(swept, cells[e], nxt, hold, after)


def _fallback_plan(v: VehicleState, e: int) -> _Plan:
    c0 = v.cell
    nxt_map = _next_cells(v.path)
    if v.moving and v.path_index + 1 < len(v.path):
        c1 = tuple(v.path[v.path_index + 1])
        swept = (frozenset((c0, c1)),) + tuple(frozenset((c1,)) for _ in range(e - 1))
        return _Plan(swept, c1, None, c1, nxt_map.get(c1))
    return _Plan(tuple(frozenset((c0,)) for _ in range(e)), c0, None, c0, nxt_map.get(c0))


def _closes_wait_cycle(plan: _Plan, others: Sequence[_Plan]) -> bool:
    """True when every vehicle on a chain starting at ``plan`` waits for the next one's cell.

    Such a ring can only advance by all members moving at once, which puts
    followers within one cell of each other, so it would never clear.
    """
    owner = {o.hold: o for o in others}
    target = plan.after
    for _ in range(len(others) + 1):
        if target is None:
            return False
        if target == plan.hold:
            return True
        o = owner.get(target)
        if o is None:
            return False
        target = o.after
    return False


def _compatible(plan: _Plan, other: _Plan) -> bool:
    for a, b in zip(plan.swept, other.swept):
        if a & b:
            return False
    if other.next_swept is not None and plan.end in other.next_swept:
        return False
    if plan.next_swept is not None:
        if other.end in plan.next_swept:
            return False
        if other.next_swept is not None and plan.next_swept & other.next_swept:
            return False
    return True


def joint_sample(vehicles: Sequence[VehicleState], libraries: Mapping[str, Sequence[CoarseTrajectory]],
                 distributions: Mapping[str, np.ndarray], draws: Mapping[str, float],
                 e: int) -> Tuple[Dict[str, int], List[str]]:
    """Choose one library entry per vehicle; returns (choices, vehicles without a safe option)."""
    reserved = {v.vid: _fallback_plan(v, e) for v in vehicles}
    choices, unsafe = {}, []
    for v in sorted(vehicles, key=lambda s: s.vid):
        others = [p for vid, p in reserved.items() if vid != v.vid]
        lib = libraries[v.vid]
        nxt_map = _next_cells(v.path)
        plans = [_plan_of(t.cells, e, nxt_map) for t in lib]
        mask = np.array([
            (not v.moving or t.cells[1] != t.cells[0]) and all(_compatible(p, o) for o in others)
            and not _closes_wait_cycle(p, others)
            for t, p in zip(lib, plans)])
        p = np.asarray(distributions[v.vid], dtype=float)
        if mask.any():
            idx = inverse_cdf_index(np.where(mask, p, 0.0), draws[v.vid])
        else:
            idx = int(np.argmax(p))
            unsafe.append(v.vid)
            log.warning("no safe trajectory for vehicle %s", v.vid)
        choices[v.vid] = idx
        reserved[v.vid] = plans[idx]
    return choices, unsafe


# -- refinement ---------------------------------------------------------------

def refine_coarse(traj: CoarseTrajectory, state: VehicleState, spec: GridSpec, config: SimConfig):
    """Refine a sampled coarse trajectory starting from the vehicle's actual state."""
    cells = list(traj.cells)
    N = len(cells)
    centers = [np.array(spec.cell_center(c)) for c in cells]
    zero = np.zeros(2)
    start = (state.position, state.velocity, state.acceleration)
    if config.merge_waits:
        corridor = build_corridor(traj, spec, merge_waits=True)
        end = (centers[-1], zero, zero) if cells[-1] == cells[-2] else (centers[-1], None, None)
        return refine_trajectory(corridor, start, end)
    corridor = build_corridor(traj, spec, merge_waits=False)
    # pin the cell center at every coarse instant; come to rest around waits
    waypoints = {}
    for k in range(1, N - 1):
        if cells[k - 1] == cells[k] or cells[k] == cells[k + 1]:
            waypoints[k - 1] = (centers[k], zero, zero)
        else:
            waypoints[k - 1] = (centers[k], None, None)
    if cells[-1] == cells[-2] or config.execute_steps == N - 1:
        end = (centers[-1], zero, zero)
    else:
        end = (centers[-1], None, None)
    return refine_trajectory(corridor, start, end, waypoints=waypoints)


# -- episode --------------------------------------------------------------------

def init_vehicles(scenario: ScenarioConfig,
                  params: Optional[Mapping[str, PreferenceParams]] = None) -> List[VehicleState]:
    spec = scenario.grid_spec()
    obstacles = scenario.obstacle_set()
    out = []
    for order, vc in enumerate(sorted(scenario.vehicles, key=lambda v: v.id)):
        try:
            path = astar(vc.start, vc.goal, obstacles, spec)
        except Exception as exc:
            raise ScenarioError(f"vehicle {vc.id}: {exc}", "vehicles") from exc
        pos = np.array(spec.cell_center(vc.start))
        p = params[vc.id] if params and vc.id in params else vc.params
        out.append(VehicleState(vc.id, order, path, tuple(vc.goal), p, vc.direction, pos,
                                np.zeros(2), np.zeros(2), tuple(vc.start), 0,
                                done=tuple(vc.start) == tuple(vc.goal)))
        if out[-1].done:
            out[-1].finish_time = 0.0
    return out


def run_episode(scenario: ScenarioConfig, config: Optional[SimConfig] = None,
                seed: Optional[int] = None,
                params: Optional[Mapping[str, PreferenceParams]] = None) -> EpisodeLog:
    """Simulate one episode; deterministic for a given scenario, config, seed and params."""
    config = config or scenario.sim
    config.validate()
    seed = config.seed if seed is None else seed
    spec = scenario.grid_spec()
    if spec.horizon != config.horizon:
        spec = GridSpec(spec.spatial_resolution, spec.temporal_resolution, spec.width,
                        spec.height, config.horizon)
    dt = spec.temporal_resolution
    e = config.execute_steps
    threshold = scenario.safety_threshold if config.safety_threshold is None else config.safety_threshold
    vehicles = init_vehicles(scenario, params)
    ids = [v.vid for v in vehicles]
    out = EpisodeLog(scenario.name, int(seed), ids, {v.vid: v.direction for v in vehicles},
                     spec.spatial_resolution, dt, float(threshold))
    out.completion = {v.vid: v.finish_time for v in vehicles}
    out.braking = {v: 0 for v in ids}
    out.times.append(0.0)
    out.positions.append({v.vid: _pt(v.position) for v in vehicles if not v.done})
    out.steps.append({v.vid: v.cell for v in vehicles if not v.done})

    for cycle in range(config.max_cycles):
        active = [v for v in vehicles if not v.done]
        if not active:
            break
        t_cycle = cycle * e * dt
        tic = time.perf_counter()
        record, plans, solve_time = _plan_cycle(active, spec, config, seed, cycle, t_cycle)
        plan_time = time.perf_counter() - tic
        out.cycles.append(record)
        out.timing.append({"cycle": cycle, "plan_seconds": plan_time, "solve_seconds": solve_time})
        _execute(active, plans, spec, config, t_cycle, out)

    out.completed = all(v.done for v in vehicles)
    out.completion = {v.vid: v.finish_time for v in vehicles}
    out.braking = count_braking(out)
    out.collision = any(d < threshold - 1e-9 for pos in out.positions
                        for d in pairwise_distances(pos))
    return out


def _pt(p) -> Tuple[float, float]:
    return (float(p[0]), float(p[1]))


def _plan_cycle(active: List[VehicleState], spec: GridSpec, config: SimConfig, seed: int,
                cycle: int, t_cycle: float):
    libs, init, lengths = {}, {}, {}
    index = OccupancyIndex(spec)
    for v in active:
        v.path_index = current_path_index(v.position, v.path, spec, v.cell)
        lib = generate_trajectory_library(v.path, config.horizon, config.max_stay, v.path_index, v.vid)
        stats = library_stats(lib, spec, v.path)
        libs[v.vid] = lib.trajectories
        init[v.vid] = initial_preferences(stats, v.params)
        lengths[v.vid] = stats[:, 0]
        for n, traj in enumerate(lib):
            index.insert_trajectory(v.vid, n, traj.cells)
    risk = locate_risk_points(index)
    distances = [{vid: abs(rp.cell.x - cell_of[vid][0]) + abs(rp.cell.y - cell_of[vid][1])
                  for vid in rp.conflicting}
                 for cell_of in [{v.vid: v.cell for v in active}] for rp in risk]
    problem = CEProblem(init, lengths, risk, distances, config.d_tor, config.epsilon)
    tic = time.perf_counter()
    fallback = False
    try:
        rec = solve_recommendation(problem, max_iter=config.solver_max_iter)
        recommended = rec.distributions
        if not rec.converged:
            log.info("cycle %d: solver did not converge, using initial preferences", cycle)
            fallback = True
            recommended = problem.initial
        objective, f0, converged, iters = rec.objective, rec.initial_objective, rec.converged, rec.iterations
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("cycle %d: solver failed (%s), using initial preferences", cycle, exc)
        fallback = True
        recommended = problem.initial
        objective = f0 = float("nan")
        converged, iters = False, 0
    solve_time = time.perf_counter() - tic

    draws = {v.vid: float(np.random.default_rng([seed, v.order, cycle]).random()) for v in active}
    choices, unsafe = joint_sample(active, libs, recommended, draws, config.execute_steps)
    plans = {}
    for v in active:
        traj = libs[v.vid][choices[v.vid]]
        plans[v.vid] = (traj, refine_coarse(traj, v, spec, config))
    record = CycleRecord(
        cycle=cycle, time=t_cycle, vehicles=[v.vid for v in active],
        risk_cells=[tuple(rp.cell) for rp in risk],
        initial={k: [float(x) for x in p] for k, p in problem.initial.items()},
        recommended={k: [float(x) for x in p] for k, p in recommended.items()},
        objective=float(objective), initial_objective=float(f0), converged=bool(converged),
        iterations=int(iters), used_fallback=fallback, chosen=dict(choices),
        coarse={vid: [tuple(c) for c in plans[vid][0].cells] for vid in plans},
        unsafe_draws=unsafe)
    return record, plans, solve_time


def _execute(active: List[VehicleState], plans, spec: GridSpec, config: SimConfig,
             t_cycle: float, out: EpisodeLog):
    dt = spec.temporal_resolution
    ticks = config.ticks_per_step
    for k in range(1, config.execute_steps + 1):
        moving = [v for v in active if not v.done]
        if not moving:
            break
        for j in range(1, ticks + 1):
            tau = (k - 1) * dt + j * dt / ticks
            out.times.append(t_cycle + tau)
            out.positions.append({v.vid: _pt(evaluate(plans[v.vid][1].trajectory, tau))
                                  for v in moving})
        cells = {}
        for v in moving:
            traj, qp = plans[v.vid]
            pw: PiecewiseTrajectory = qp.trajectory
            tau = k * dt
            v.position = evaluate(pw, tau, 0)
            v.velocity = evaluate(pw, tau, 1)
            v.acceleration = evaluate(pw, tau, 2)
            v.cell = tuple(traj.cells[k])
            v.path_index = path_lookup(v.path)[v.cell]
            cells[v.vid] = v.cell
            if world_to_cell(v.position, spec) != v.cell:
                log.warning("vehicle %s left its planned cell", v.vid)
            if v.cell == v.goal:
                v.done = True
                v.finish_time = t_cycle + tau
        out.steps.append(cells)
