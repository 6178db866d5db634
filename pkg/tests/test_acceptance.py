"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see ``conftest.py``). Running this file directly prints the same lines.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
import pytest

from ceplan.cli import monte_carlo, write_bundle
from ceplan.coordinator import (CEModel, ce_constraint_residual, locate_risk_points,
                                solve_recommendation)
from ceplan.corridor import Corridor, box_segment, build_corridor
from ceplan.library import astar, composition_count, generate_trajectory_library
from ceplan.refine import continuity_residuals, refine_trajectory, sample
from ceplan.scenario import bundled_scenarios, load_scenario
from ceplan.sim import run_episode, step_cell_conflicts
from ceplan.stgrid import GridSpec, OccupancyIndex

import oracles
from test_library import compositions

RESULTS: dict = {}


def record(number, name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}" + (f" ({detail})" if detail else "")
    RESULTS[number] = line
    print(line)
    return ok


# 1 ---------------------------------------------------------------------------

def test_criterion_1_library_cardinality():
    # only library generation counts towards the runtime bound, not the oracle
    tic = time.perf_counter()
    lib = generate_trajectory_library([(x, 0) for x in range(20)], 6, 2, 0)
    elapsed = time.perf_counter() - tic
    ok = len(lib) == 13
    rng = np.random.default_rng(1)
    for _ in range(50):
        m, N = int(rng.integers(1, 5)), int(rng.integers(1, 13))
        tic = time.perf_counter()
        got = generate_trajectory_library([(x, 0) for x in range(N + 2)], N, m, 0)
        elapsed += time.perf_counter() - tic
        runs = {tuple(len(list(g)) for _, g in itertools.groupby(t.path_indices)) for t in got}
        ok &= len(got) == composition_count(N, m) and runs == set(compositions(N, m))
    ok &= elapsed < 1.0
    assert record(1, "library cardinality", ok, f"|library| = {len(lib)}, {elapsed:.2f} s")


# 2 ---------------------------------------------------------------------------

def _random_scene(rng):
    w = h = 5
    spec = GridSpec(0.3, 0.6, w, h, int(rng.integers(2, 9)))
    libs = {}
    starts = set()
    for i in range(int(rng.integers(2, 5))):
        while True:
            s = (int(rng.integers(w)), int(rng.integers(h)))
            if s not in starts:
                break
        starts.add(s)
        g = (int(rng.integers(w)), int(rng.integers(h)))
        path = astar(s, g, set(), spec)
        lib = generate_trajectory_library(path, spec.horizon, int(rng.integers(1, 4)), 0)
        libs[f"v{i}"] = [list(t.cells) for t in lib]
    return spec, libs


def test_criterion_2_risk_point_oracle():
    rng = np.random.default_rng(2)
    tic = time.perf_counter()
    ok, total = True, 0
    for _ in range(100):
        spec, libs = _random_scene(rng)
        idx = OccupancyIndex(spec)
        for vid, lib in libs.items():
            for n, cells in enumerate(lib):
                idx.insert_trajectory(vid, n, cells)
        risk = locate_risk_points(idx)
        got = {tuple(rp.cell): {v: set(s) for v, s in rp.conflicting.items()} for rp in risk}
        ok &= got == oracles.brute_force_risk_points(libs)
        total += len(risk)
    elapsed = time.perf_counter() - tic
    ok &= elapsed < 5.0
    assert record(2, "risk-point oracle equivalence", ok, f"{total} risk points, {elapsed:.2f} s")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_ce_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        pr = oracles.random_problem(rng)
        for v in pr.vehicle_ids:
            worst = max(worst, abs(ce_constraint_residual(v, pr.initial, pr)))
    assert record(3, "CE feasibility identity", worst <= 1e-12, f"max |residual| {worst:.1e}")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_solver_soundness():
    rng = np.random.default_rng(4)
    ok = True
    worst_res, worst_simplex, worst_gain = 0.0, 0.0, -np.inf
    for _ in range(50):
        pr = oracles.random_problem(rng)
        r = solve_recommendation(pr)
        worst_gain = max(worst_gain, r.objective - r.initial_objective)
        for v in pr.vehicle_ids:
            p = r.distributions[v]
            worst_simplex = max(worst_simplex, abs(p.sum() - 1.0), pr.epsilon - p.min())
            worst_res = min(worst_res, oracles.ce_residual(v, r.distributions, pr))
    ok &= worst_gain <= 1e-9 and worst_res >= -1e-6 and worst_simplex <= 1e-9

    # toy instances against the step-0.01 grid; the grid only upper-bounds the
    # true optimum, so a solver result more than 1e-3 below it is confirmed
    # against a step-0.0005 grid instead
    rng = np.random.default_rng(2024)
    worst_above, below = -np.inf, 0
    for _ in range(50):
        pr = oracles.random_toy(rng)
        r = solve_recommendation(pr)
        grid, _ = oracles.grid_search_toy(pr)
        worst_above = max(worst_above, r.objective - grid)
        if r.objective < grid - 1e-3:
            below += 1
            fine, _ = oracles.grid_search_toy(pr, step=0.0005)
            feasible = all(oracles.ce_residual(v, r.distributions, pr) >= -1e-9 for v in pr.vehicle_ids)
            ok &= feasible and abs(r.objective - fine) <= 1e-3
    ok &= worst_above <= 1e-3
    assert record(4, "solver soundness", ok,
                  f"min residual {worst_res:.1e}, max toy excess over grid {worst_above:.1e}, "
                  f"{below} toy(s) below the coarse grid")


# 5 ---------------------------------------------------------------------------

def _rel_error(fun, grad, x, h=1e-6):
    num = np.array([(fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    return np.linalg.norm(num - grad) / max(np.linalg.norm(num), np.linalg.norm(grad), 1e-12)


def test_criterion_5_gradients():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        pr = oracles.random_problem(rng)
        m = CEModel(pr)
        x = np.concatenate([rng.dirichlet(np.ones(k)) * 0.9 + 0.1 / k for k in m.sizes])
        _, grad, _, J = m.evaluate(x, derivatives=True)
        worst = max(worst, _rel_error(m.objective, grad, x))
        for i in range(m.n_vehicles):
            worst = max(worst, _rel_error(lambda y: m.residuals(y)[i], J[i], x))
    assert record(5, "gradient checks", worst <= 1e-5, f"max relative error {worst:.1e}")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_qp_refinement():
    rest = ([0.0, 0.0], [0.0, 0.0])
    r = refine_trajectory(Corridor([box_segment([-5, -5], [5, 5], 1.0)]), ([0, 0], *rest),
                          ([1, 0], *rest))
    ts = np.linspace(0, 1, 100)
    exact = 10 * ts ** 3 - 15 * ts ** 4 + 6 * ts ** 5
    quintic_err = float(np.max(np.abs(sample(r.trajectory, ts)[:, 0] - exact)))

    spec = GridSpec(0.3, 0.6, 10, 10, 6)
    rng = np.random.default_rng(6)
    cont, contain = 0.0, -np.inf
    ok = quintic_err <= 1e-6
    for k in range(20):
        cells = [(int(rng.integers(2, 8)), int(rng.integers(2, 8)))]
        for _ in range(5):
            d = [(1, 0), (0, 1), (-1, 0), (0, -1), (0, 0)][rng.integers(5)]
            cells.append((cells[-1][0] + d[0], cells[-1][1] + d[1]))
        corridor = build_corridor(cells, spec, merge_waits=bool(k % 2))
        res = refine_trajectory(corridor, (spec.cell_center(cells[0]), *rest),
                                (spec.cell_center(cells[-1]), *rest))
        ok &= res.feasible
        tr = res.trajectory
        if len(tr.segments) > 1:
            cont = max(cont, float(continuity_residuals(tr, 3).max()))
        for seg, box in zip(tr.segments, corridor):
            P = seg.derivative(np.linspace(0, box.duration, 20))
            contain = max(contain, float(np.max(box.A @ P - box.b[:, None])))
    ok &= cont <= 1e-6 and contain <= 1e-6
    assert record(6, "QP refinement", ok,
                  f"quintic error {quintic_err:.1e}, continuity {cont:.1e}, containment {contain:.1e}")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_closed_loop_safety():
    names = ["two_vehicle_crossing"] + [f"four_vehicle_{i}" for i in range(1, 5)]
    episodes, unsafe, conflicts, dmin = 0, 0, 0, np.inf
    for name in names:
        sc = load_scenario(name)
        for seed in range(40):
            log = run_episode(sc, seed=seed)
            episodes += 1
            d = log.min_distance
            dmin = min(dmin, d)
            unsafe += int(log.collision or d < log.safety_threshold - 1e-9)
            conflicts += len(step_cell_conflicts(log))
    ok = episodes == 200 and unsafe == 0 and conflicts == 0
    assert record(7, "closed-loop safety", ok,
                  f"{episodes} episodes, {unsafe} unsafe, {conflicts} cell conflicts, min distance {dmin:.3f} m")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_monte_carlo_shape():
    sc = load_scenario("two_vehicle_offset")
    tic = time.perf_counter()
    results = monte_carlo(sc, 150, seed=0)
    elapsed = time.perf_counter() - tic
    totals = np.array([r["braking"] for r in results])
    low = float(np.mean(totals <= 2))
    ok = len(results) == 150 and low > 1 - low and elapsed < 120
    assert record(8, "Monte Carlo shape", ok,
                  f"braking <= 2 in {100 * low:.2f}% of episodes, {elapsed:.1f} s")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_throughput():
    worst, cycles = 0.0, 0
    for i in range(1, 5):
        log = run_episode(load_scenario(f"four_vehicle_{i}"), seed=0)
        for rec, t in zip(log.cycles, log.timing):
            if len(rec.vehicles) == 4:
                worst = max(worst, t["plan_seconds"])
                cycles += 1
    ok = cycles > 0 and worst <= 0.25
    assert record(9, "throughput", ok, f"slowest of {cycles} four-vehicle cycles {1000 * worst:.0f} ms")


# 10 --------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    files = ["metrics.csv", "distributions.csv", "braking_hist.csv"]
    ok = True
    names = bundled_scenarios()
    for name in names:
        sc = load_scenario(name)
        for run in ("a", "b"):
            write_bundle(run_episode(sc, seed=11), sc, tmp_path / run / name)
        for f in files:
            ok &= (tmp_path / "a" / name / f).read_bytes() == (tmp_path / "b" / name / f).read_bytes()
    assert record(10, "determinism", ok, f"{len(names)} scenarios")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
