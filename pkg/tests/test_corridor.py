from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceplan.corridor import (CorridorError, box_segment, build_corridor, inverse_cdf_index,
                             sample_index, sample_trajectory)
from ceplan.library import generate_trajectory_library
from ceplan.stgrid import GridSpec

SPEC = GridSpec(0.3, 0.6, 20, 20, 6)
DT = SPEC.temporal_resolution


# -- sampling ------------------------------------------------------------------

def test_near_point_mass_picks_first():
    k, eps = 13, 1e-9
    p = np.r_[1 - (k - 1) * eps, np.full(k - 1, eps)]
    for seed in range(200):
        u = np.random.default_rng(seed).random()
        if u < 1 - (k - 1) * eps:
            assert sample_index(p, seed) == 0


def test_inverse_cdf_boundaries():
    p = [0.25, 0.25, 0.5]
    assert inverse_cdf_index(p, 0.0) == 0
    assert inverse_cdf_index(p, 0.2499) == 0
    assert inverse_cdf_index(p, 0.25) == 1
    assert inverse_cdf_index(p, 0.75) == 2
    assert inverse_cdf_index(p, 0.999999) == 2
    with pytest.raises(ValueError):
        inverse_cdf_index([], 0.5)
    with pytest.raises(ValueError):
        inverse_cdf_index([0.5, -0.1], 0.5)


def test_uniform_sampling_frequencies():
    k, n = 13, 10_000
    rng = np.random.default_rng(2024)
    counts = np.bincount([sample_index(np.full(k, 1 / k), rng) for _ in range(n)], minlength=k)
    p = 1 / k
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)
    # Pearson statistic against the 0.999 quantile of chi-square with 12 dof
    chi2 = float(np.sum((counts - n * p) ** 2 / (n * p)))
    assert chi2 < 32.909


def test_sample_trajectory_deterministic():
    lib = generate_trajectory_library([(x, 0) for x in range(10)], 6, 2, 0)
    p = np.random.default_rng(0).dirichlet(np.ones(len(lib)))
    for seed in range(20):
        assert sample_trajectory(p, lib, seed) is sample_trajectory(p, lib, seed)
    with pytest.raises(ValueError):
        sample_trajectory(p[:-1], lib, 0)
    with pytest.raises(ValueError):
        sample_trajectory([], [], 0)


# -- corridor ---------------------------------------------------------------------

def test_two_cell_union():
    c = build_corridor([(1, 1), (2, 1)], SPEC)
    assert len(c) == 1
    assert np.allclose(c[0].lower, [0.3, 0.3]) and np.allclose(c[0].upper, [0.9, 0.6])
    assert c[0].duration == pytest.approx(DT)


def test_all_identical_is_one_cell_for_whole_horizon():
    c = build_corridor([(4, 4)] * 6, SPEC)
    assert len(c) == 1
    assert np.allclose(c[0].lower, [1.2, 1.2]) and np.allclose(c[0].upper, [1.5, 1.5])
    assert c[0].duration == pytest.approx(5 * DT)


def test_mid_wait_enumeration():
    cells = [(0, 0), (1, 0), (1, 0), (2, 0), (3, 0), (4, 0)]
    c = build_corridor(cells, SPEC)
    # moves 0->1 (absorbing the wait), 1->2, 2->3, 3->4
    assert [s.cells for s in c] == [((0, 0), (1, 0)), ((1, 0), (2, 0)), ((2, 0), (3, 0)),
                                    ((3, 0), (4, 0))]
    assert np.allclose(c.durations, [2 * DT, DT, DT, DT])
    assert c.duration == pytest.approx(5 * DT)


def test_leading_wait_goes_to_first_move():
    c = build_corridor([(0, 0), (0, 0), (0, 1), (0, 2), (0, 2), (0, 2)], SPEC)
    assert np.allclose(c.durations, [2 * DT, 3 * DT])


def test_unmerged_waits_are_single_cells():
    c = build_corridor([(0, 0), (1, 0), (1, 0), (2, 0)], SPEC, merge_waits=False)
    assert len(c) == 3
    assert c[1].cells == ((1, 0),)
    assert np.allclose(c.durations, DT)


def test_errors():
    with pytest.raises(CorridorError):
        build_corridor([(0, 0), (2, 0)], SPEC)
    with pytest.raises(CorridorError):
        build_corridor([(0, 0), (1, 1)], SPEC)
    with pytest.raises(CorridorError):
        build_corridor([(0, 0)], SPEC)
    with pytest.raises(CorridorError):
        box_segment([1, 0], [0, 1], 1.0)
    with pytest.raises(CorridorError):
        box_segment([0, 0], [1, 1], 0.0)


def _check_invariants(cells, corridor):
    dt = DT
    assert corridor.duration == pytest.approx((len(cells) - 1) * dt, abs=1e-12)
    starts = np.r_[corridor.start_times(), corridor.duration]
    for seg in corridor:
        assert seg.A.shape == (4, 2) and seg.b.shape == (4,)
        # axis-aligned unit normals, one per side
        assert sorted(map(tuple, seg.A)) == [(-1, 0), (0, -1), (0, 1), (1, 0)]
        assert np.all(seg.upper >= seg.lower)
        assert seg.duration / dt == pytest.approx(round(seg.duration / dt))
    for t, c in enumerate(cells):
        time = t * dt
        center = SPEC.cell_center(c)
        # every segment active at that instant (two at a junction)
        active = [i for i in range(len(corridor)) if starts[i] - 1e-12 <= time <= starts[i + 1] + 1e-12]
        assert active
        for i in active:
            assert corridor[i].contains(center)
    for a, b in zip(corridor, corridor.segments[1:]):
        lo = np.maximum(a.lower, b.lower)
        hi = np.minimum(a.upper, b.upper)
        assert np.all(hi > lo)


def test_library_corridors_satisfy_invariants():
    path = [(x, 2) for x in range(4)] + [(3, y) for y in range(3, 8)]
    for start in range(len(path)):
        for traj in generate_trajectory_library(path, 6, 2, start):
            _check_invariants(list(traj.cells), build_corridor(traj, SPEC))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)]), min_size=1, max_size=9))
def test_random_walk_corridors(steps):
    c = (10, 10)
    cells = [c]
    for d in steps:
        c = (c[0] + d[0], c[1] + d[1])
        cells.append(c)
    _check_invariants(cells, build_corridor(cells, SPEC))
    # segment count is the number of moves (or one for a pure wait)
    moves = sum(1 for a, b in zip(cells, cells[1:]) if a != b)
    assert len(build_corridor(cells, SPEC)) == max(moves, 1)


def test_wait_placement_enumeration():
    # every 6-step trajectory with exactly one wait along a straight road
    for w in range(5):
        idx = [0, 1, 2, 3, 4]
        idx.insert(w + 1, idx[w])
        cells = [(i, 0) for i in idx]
        c = build_corridor(cells, SPEC)
        assert len(c) == 4
        expected = [DT] * 4
        expected[max(w - 1, 0)] += DT
        assert np.allclose(c.durations, expected)
