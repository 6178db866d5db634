"""Intersection Manager: risk points and CE-constrained recommendation.

The recommendation problem is

    minimize    sum_m prod_{i in I_m} r_{i,m}(p^i)
    subject to  U_i(p^i; p^-i) >= U_i(p_o^i; p^-i)     for every vehicle i
                sum_n p^i_n = 1,  p^i_n >= eps

where ``r_{i,m}`` is vehicle i's probability mass on its trajectories through
risk point m and

    U_i(q; p^-i) = sum_n (q_n log q_n + q_n s_n)
                   - sum_{m in V_i} c(r_{i,m}(q), d_{i,m}) prod_{j != i} r_{j,m}

with the yielding term ``c(r, d) = 1 - r`` when ``d <= d_tor`` and ``r``
otherwise. The simplex and floor constraints are kept exactly by projection;
the CE inequalities are handled with an augmented Lagrangian.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Hashable, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .preference import DEFAULT_EPSILON
from .stgrid import Cell, OccupancyIndex


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class RiskPoint:
    """A spatial-temporal cell shared by trajectories of at least two vehicles."""

    cell: Cell
    conflicting: Mapping[Hashable, FrozenSet[int]]

    @property
    def participants(self) -> FrozenSet[Hashable]:
        return frozenset(self.conflicting)


def locate_risk_points(index: OccupancyIndex) -> List[RiskPoint]:
    """One pass over the occupancy index; cost is linear in the stored entries."""
    out = []
    for cell, members in index.items():
        by_vehicle: Dict[Hashable, set] = defaultdict(set)
        for vid, n in members:
            by_vehicle[vid].add(n)
        if len(by_vehicle) >= 2:
            conflicting = {v: frozenset(by_vehicle[v]) for v in sorted(by_vehicle)}
            out.append(RiskPoint(Cell(*cell), conflicting))
    out.sort(key=lambda rp: (rp.cell.t, rp.cell.x, rp.cell.y))
    return out


def risk_mass(p: Sequence[float], conflicting: Iterable[int]) -> float:
    p = np.asarray(p, dtype=float)
    idx = list(conflicting)
    return float(p[idx].sum()) if idx else 0.0


def collision_probability(risk_point: RiskPoint, distributions: Mapping[Hashable, Sequence[float]]) -> float:
    out = 1.0
    for vid, idx in risk_point.conflicting.items():
        out *= risk_mass(distributions[vid], idx)
    return out


def yield_term(p_im: float, d: float, d_tor: float) -> float:
    return 1.0 - p_im if d <= d_tor else p_im


def project_truncated_simplex(v: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection onto ``{p : sum(p) = 1, p >= eps}``."""
    v = np.asarray(v, dtype=float)
    k = v.size
    budget = 1.0 - k * eps
    if budget < -1e-12:
        raise ConfigurationError(f"eps={eps} infeasible for {k} trajectories")
    if budget <= 0.0:
        return np.full(k, eps)
    q = v - eps
    u = np.sort(q)[::-1]
    css = np.cumsum(u) - budget
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = ind[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(q - theta, 0.0) + eps


def _floor_distribution(p, eps: float) -> np.ndarray:
    p = np.array(p, dtype=float)
    if p.min() >= eps and abs(p.sum() - 1.0) <= 1e-12:
        return p
    return project_truncated_simplex(p / p.sum() if p.sum() > 0 else p, eps)


@dataclass
class CEProblem:
    """Inputs of one Intersection Manager solve.

    ``distances[m][vid]`` is the grid distance from vehicle ``vid`` to the
    spatial cell of ``risk_points[m]``. Initial distributions below the
    ``epsilon`` floor are projected onto the truncated simplex.
    """

    initial: Dict[Hashable, np.ndarray]
    lengths: Dict[Hashable, np.ndarray]
    risk_points: List[RiskPoint] = field(default_factory=list)
    distances: List[Dict[Hashable, float]] = field(default_factory=list)
    d_tor: float = 2.0
    epsilon: float = DEFAULT_EPSILON
    vehicle_ids: Optional[List[Hashable]] = None

    def __post_init__(self):
        if not self.initial:
            raise ConfigurationError("at least one vehicle is required")
        if self.vehicle_ids is None:
            self.vehicle_ids = sorted(self.initial)
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")
        if self.d_tor < 0:
            raise ConfigurationError("d_tor must be >= 0")
        if len(self.distances) != len(self.risk_points):
            raise ConfigurationError("one distance map per risk point is required")
        fixed = {}
        for vid in self.vehicle_ids:
            p = np.asarray(self.initial[vid], dtype=float)
            if self.epsilon * p.size > 1.0 + 1e-12:
                raise ConfigurationError(
                    f"epsilon={self.epsilon} * k={p.size} exceeds 1 for vehicle {vid}")
            if len(self.lengths[vid]) != p.size:
                raise ConfigurationError(f"lengths/initial size mismatch for vehicle {vid}")
            fixed[vid] = _floor_distribution(p, self.epsilon)
        self.initial = fixed
        self.lengths = {v: np.asarray(self.lengths[v], dtype=float) for v in self.vehicle_ids}


@dataclass
class Recommendation:
    distributions: Dict[Hashable, np.ndarray]
    objective: float
    initial_objective: float
    residuals: np.ndarray
    iterations: int
    converged: bool
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


class CEModel:
    """Flattened, vectorised form of a :class:`CEProblem`.

    Variables are the concatenated per-vehicle distributions. ``B`` maps them to
    the per-(risk point, participant) masses ``r``; products per risk point use
    leave-one-out ratios, which are safe because every mass is at least eps.
    """

    def __init__(self, problem: CEProblem):
        self.problem = problem
        self.vids = list(problem.vehicle_ids)
        self.col = {v: i for i, v in enumerate(self.vids)}
        sizes = [problem.initial[v].size for v in self.vids]
        self.sizes = np.array(sizes)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n = int(self.offsets[-1])
        self.n_vehicles = len(self.vids)
        self.owner = np.repeat(np.arange(self.n_vehicles), sizes)
        self.x0 = np.concatenate([problem.initial[v] for v in self.vids])
        self.s = np.concatenate([problem.lengths[v] for v in self.vids])
        self.eps = problem.epsilon

        rows, pair_m, pair_i, near = [], [], [], []
        for m, rp in enumerate(problem.risk_points):
            for vid in sorted(rp.conflicting):
                row = np.zeros(self.n)
                idx = np.fromiter(rp.conflicting[vid], dtype=int)
                if idx.size and (idx.min() < 0 or idx.max() >= problem.initial[vid].size):
                    raise ConfigurationError(f"trajectory index out of range at risk point {m}")
                row[self.offsets[self.col[vid]] + idx] = 1.0
                rows.append(row)
                pair_m.append(m)
                pair_i.append(self.col[vid])
                near.append(problem.distances[m][vid] <= problem.d_tor)
        self.n_risk = len(problem.risk_points)
        self.B = np.array(rows).reshape(-1, self.n)
        self.pair_m = np.array(pair_m, dtype=int)
        self.pair_i = np.array(pair_i, dtype=int)
        self.near = np.array(near, dtype=bool)
        self.dsign = np.where(self.near, -1.0, 1.0)
        self.starts = np.flatnonzero(np.r_[True, np.diff(self.pair_m) != 0]) if pair_m else np.zeros(0, int)
        pa, pb = [], []
        for a in range(len(pair_m)):
            for b in range(len(pair_m)):
                if a != b and pair_m[a] == pair_m[b]:
                    pa.append(a)
                    pb.append(b)
        self.pa = np.array(pa, dtype=int)
        self.pb = np.array(pb, dtype=int)
        self._cols = np.arange(self.n)
        self._npairs = len(pair_m)
        self._pcols = np.arange(self._npairs)
        self._cross_flat = self.pair_i[self.pa] * self._npairs + self.pb if self.pa.size else None
        self.r0 = self.B @ self.x0
        self.c0 = self._yield(self.r0)
        self.A0 = self._own_utility(self.x0)

    # -- pieces -----------------------------------------------------------
    def _yield(self, r):
        return np.where(self.near, 1.0 - r, r)

    def _own_utility(self, x):
        if x.min() > 0:
            return np.bincount(self.owner, weights=x * (np.log(x) + self.s), minlength=self.n_vehicles)
        if np.any(x < 0):
            raise ValueError("negative probability")
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)
        return np.bincount(self.owner, weights=plogp + x * self.s, minlength=self.n_vehicles)

    def _products(self, r):
        if r.size == 0:
            return np.zeros(0)
        return np.multiply.reduceat(r, self.starts)

    def _leave_one_out(self, r, P):
        # exact products where a mass is zero, ratio form otherwise
        if r.min() > 0:
            return P[self.pair_m] / r
        loo = np.empty_like(r)
        safe = r > 0
        loo[safe] = P[self.pair_m[safe]] / r[safe]
        for a in np.flatnonzero(~safe):
            others = (self.pair_m == self.pair_m[a]) & (np.arange(r.size) != a)
            loo[a] = np.prod(r[others])
        return loo

    # -- public evaluation -------------------------------------------------
    def objective(self, x) -> float:
        if self.n_risk == 0:
            return 0.0
        return float(self._products(self.B @ x).sum())

    def objective_grad(self, x) -> np.ndarray:
        return self.evaluate(x, derivatives=True)[1]

    def residuals(self, x) -> np.ndarray:
        return self.evaluate(x)[2]

    def jacobian(self, x) -> np.ndarray:
        return self.evaluate(x, derivatives=True)[3]

    def evaluate(self, x, derivatives: bool = False):
        """Objective, its gradient, CE residuals and their Jacobian in one pass.

        The gradient and Jacobian are ``None`` unless ``derivatives`` is set.
        """
        A = self._own_utility(x)
        if self.n_risk == 0:
            if not derivatives:
                return 0.0, None, A - self.A0, None
            J = np.zeros((self.n_vehicles, self.n))
            J[self.owner, self._cols] = np.log(x) + 1.0 + self.s
            return 0.0, np.zeros(self.n), A - self.A0, J
        r = self.B @ x
        P = self._products(r)
        loo = self._leave_one_out(r, P)
        c = self._yield(r)
        T = np.bincount(self.pair_i, weights=c * loo, minlength=self.n_vehicles)
        T0 = np.bincount(self.pair_i, weights=self.c0 * loo, minlength=self.n_vehicles)
        g = (A - T) - (self.A0 - T0)
        f = float(P.sum())
        if not derivatives:
            return f, None, g, None
        grad = self.B.T @ loo
        size = self.n_vehicles * self._npairs
        if self.pa.size:
            coef = -(c - self.c0)[self.pa] * self._pair_cross(r, P, self.pa, self.pb)
            M = np.bincount(self._cross_flat, weights=coef, minlength=size)
        else:
            M = np.zeros(size)
        M = M.reshape(self.n_vehicles, self._npairs)
        M[self.pair_i, self._pcols] -= self.dsign * loo
        J = M @ self.B
        J[self.owner, self._cols] += np.log(x) + 1.0 + self.s
        return f, grad, g, J

    def _pair_cross(self, r, P, pa, pb):
        denom = r[pa] * r[pb]
        if denom.min() > 0:
            return P[self.pair_m[pa]] / denom
        out = np.empty(pa.size)
        safe = denom > 0
        out[safe] = P[self.pair_m[pa[safe]]] / denom[safe]
        for k in np.flatnonzero(~safe):
            others = (self.pair_m == self.pair_m[pa[k]])
            others[[pa[k], pb[k]]] = False
            out[k] = np.prod(r[others])
        return out

    def project(self, x) -> np.ndarray:
        """Project every vehicle block onto its truncated simplex at once."""
        if not hasattr(self, "_pad"):
            kmax = int(self.sizes.max())
            self._pad = (self.owner, np.arange(self.n) - self.offsets[self.owner])
            self._ind = np.arange(1, kmax + 1, dtype=float)
            self._rows = np.arange(self.n_vehicles)
            self._budget = 1.0 - self.sizes * self.eps
            self._kmax = kmax
            self._uniform = bool(np.all(self.sizes == kmax))
        if np.any(self._budget <= 0.0):
            return np.concatenate([project_truncated_simplex(x[self.offsets[i]:self.offsets[i + 1]], self.eps)
                                   for i in range(self.n_vehicles)])
        q = x - self.eps
        if self._uniform:
            u = -np.sort(-q.reshape(self.n_vehicles, self._kmax), axis=1)
            css = np.cumsum(u, axis=1) - self._budget[:, None]
        else:
            Q = np.full((self.n_vehicles, self._kmax), -np.inf)
            Q[self._pad] = q
            u = -np.sort(-Q, axis=1)
            css = np.cumsum(np.where(np.isfinite(u), u, 0.0), axis=1) - self._budget[:, None]
        cond = u - css / self._ind > 0
        rho = self._kmax - np.argmax(cond[:, ::-1], axis=1)
        theta = css[self._rows, rho - 1] / rho
        return np.maximum(q - theta[self.owner], 0.0) + self.eps

    def evaluate_batch(self, X):
        """Objectives and CE residuals for the columns of ``X`` (shape ``(n, S)``)."""
        X = np.asarray(X, dtype=float)
        own = np.zeros((self.n_vehicles, self.n))
        own[self.owner, np.arange(self.n)] = 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(X > 0, X * np.log(np.where(X > 0, X, 1.0)), 0.0)
        A = own @ (plogp + X * self.s[:, None])
        if self.n_risk == 0:
            return np.zeros(X.shape[1]), A - self.A0[:, None]
        R = self.B @ X
        P = np.multiply.reduceat(R, self.starts, axis=0)
        loo = P[self.pair_m] / R
        C = np.where(self.near[:, None], 1.0 - R, R)
        V = np.zeros((self.n_vehicles, R.shape[0]))
        V[self.pair_i, np.arange(R.shape[0])] = 1.0
        G = (A - V @ (C * loo)) - (self.A0[:, None] - V @ (self.c0[:, None] * loo))
        return P.sum(axis=0), G

    def vertex(self, vehicle: int, n: int) -> np.ndarray:
        k = int(self.sizes[vehicle])
        p = np.full(k, self.eps)
        p[n] = 1.0 - (k - 1) * self.eps
        return p

    def flatten(self, distributions: Mapping[Hashable, Sequence[float]]) -> np.ndarray:
        return np.concatenate([np.asarray(distributions[v], dtype=float) for v in self.vids])

    def unflatten(self, x) -> Dict[Hashable, np.ndarray]:
        return {v: x[self.offsets[i]:self.offsets[i + 1]].copy() for i, v in enumerate(self.vids)}


def ce_constraint_residual(vehicle: Hashable, candidate: Mapping[Hashable, Sequence[float]],
                           problem: CEProblem) -> float:
    """CE slack of ``vehicle`` at ``candidate``; feasible iff the value is >= 0."""
    model = CEModel(problem)
    return float(model.residuals(model.flatten(candidate))[model.col[vehicle]])


def solve_recommendation(problem: CEProblem, max_iter: int = 500, ctol: float = 1e-6,
                         step_tol: float = 1e-10, feas_tol: float = 1e-8,
                         rho0: float = 10.0, n_starts: int = 4,
                         max_candidates: int = 50000) -> Recommendation:
    """Minimise total collision probability under the CE constraints.

    Augmented Lagrangian on the CE inequalities, spectral projected gradient
    (Barzilai-Borwein step, nonmonotone Armijo search) on the product of
    truncated simplices. The CE-feasible set is generally not connected, so
    besides the initial distributions the local solver is also started from
    the best feasible combinations of near-pure distributions (see
    :func:`candidate_starts`). ``max_iter`` bounds the number of inner
    iterations summed over all starts. The initial distributions are always
    feasible, so the best feasible iterate seen is returned even when the
    budget runs out. ``converged`` is set when at least one local run reached
    a stationary point; the returned point is never worse than that one.
    """
    model = CEModel(problem)
    x0 = model.x0
    f0 = model.objective(x0)
    g0 = model.residuals(x0)
    if model.n_risk == 0:
        return Recommendation(model.unflatten(x0), 0.0, 0.0, g0, 0, True,
                              np.zeros(model.n_vehicles))

    starts = [x0] + candidate_starts(model, n_starts - 1, feas_tol, max_candidates)
    best = None
    iters = 0
    converged = False
    for k, xs in enumerate(starts):
        # leave every remaining start a fair share of the budget
        budget = (max_iter - iters) // (len(starts) - k)
        if budget <= 0:
            break
        res = _local_solve(model, xs, budget, ctol, step_tol, feas_tol, rho0)
        iters += res[2]
        # one stationary point suffices: the result is feasible and no worse
        converged = converged or res[3]
        if best is None or res[1] < best[1]:
            best = res
    best_x, best_f, _, _, lam = best

    return Recommendation(
        distributions=model.unflatten(best_x),
        objective=best_f,
        initial_objective=f0,
        residuals=model.residuals(best_x),
        iterations=iters,
        converged=converged,
        multipliers=lam,
    )


def candidate_starts(model: CEModel, count: int, feas_tol: float = 1e-8,
                     max_candidates: int = 50000) -> List[np.ndarray]:
    """Feasible starting points built from near-pure distributions.

    Each vehicle either keeps its initial distribution or puts all but the
    floor mass on one trajectory. Trajectories that cross exactly the same
    risk points are interchangeable for the objective, so only the longest of
    each such group is tried. Combinations are enumerated exhaustively when
    there are at most ``max_candidates`` of them, otherwise a greedy
    vehicle-by-vehicle search is used. Returns up to ``count`` feasible points
    with the lowest objective, in a deterministic order.
    """
    if count <= 0:
        return []
    options = []
    for i in range(model.n_vehicles):
        lo, hi = model.offsets[i], model.offsets[i + 1]
        opts = [model.x0[lo:hi]]
        cols = model.B[:, lo:hi]
        if cols.any():
            groups: Dict[bytes, int] = {}
            for n in range(hi - lo):
                key = cols[:, n].tobytes()
                if key not in groups or model.s[lo + n] > model.s[lo + groups[key]]:
                    groups[key] = n
            opts += [model.vertex(i, n) for n in sorted(groups.values())]
        options.append(opts)

    total = 1
    for o in options:
        total *= len(o)
    if total <= max_candidates:
        choice = np.array(list(itertools.product(*[range(len(o)) for o in options])), dtype=int)
    else:
        choice = _greedy_choices(model, options, feas_tol)
    X = _assemble(model, options, choice)
    f, G = model.evaluate_batch(X)
    ok = (G.min(axis=0) >= -feas_tol) & choice.any(axis=1)
    order = np.flatnonzero(ok)[np.argsort(f[ok], kind="stable")]
    return [X[:, j].copy() for j in order[:count]]


def _assemble(model, options, choice):
    X = np.empty((model.n, len(choice)))
    for i, opts in enumerate(options):
        lo, hi = model.offsets[i], model.offsets[i + 1]
        X[lo:hi] = np.stack(opts, axis=1)[:, choice[:, i]]
    return X


def _greedy_choices(model, options, feas_tol):
    # coordinate search over the discrete options, recording every visited point
    cur = np.zeros(len(options), dtype=int)
    visited = [cur.copy()]
    best_f = model.objective(model.x0)
    improved = True
    while improved:
        improved = False
        for i, opts in enumerate(options):
            trial = np.repeat(cur[None, :], len(opts), axis=0)
            trial[:, i] = np.arange(len(opts))
            f, G = model.evaluate_batch(_assemble(model, options, trial))
            ok = G.min(axis=0) >= -feas_tol
            visited.extend(trial)
            if ok.any():
                j = np.flatnonzero(ok)[np.argmin(f[ok])]
                if f[j] < best_f - 1e-15:
                    best_f, cur = f[j], trial[j].copy()
                    improved = True
    return np.unique(np.array(visited), axis=0)


def _local_solve(model: CEModel, x0, max_iter, ctol, step_tol, feas_tol, rho0):
    lam = np.zeros(model.n_vehicles)
    rho = rho0
    x = x0.copy()
    best_x, best_f = x0.copy(), model.objective(x0)
    iters = 0
    converged = False
    prev_viol = math.inf

    def consider(xc, fc, gc):
        nonlocal best_x, best_f
        if gc.min() >= -feas_tol and fc < best_f:
            best_x, best_f = xc.copy(), fc

    while iters < max_iter:
        x, used, inner_ok, stalled = _minimize_al(model, x, lam, rho, max_iter - iters,
                                                  step_tol, consider)
        iters += used
        g = model.residuals(x)
        viol = max(0.0, -float(g.min()))
        lam = np.maximum(0.0, lam - rho * g)
        if viol <= ctol and inner_ok:
            converged = True
            break
        if used == 0 or stalled:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, 1e10)
        prev_viol = viol

    # pull a slightly infeasible final iterate back towards the feasible start
    if model.residuals(x).min() < -feas_tol:
        x = _restore(model, x0, x, feas_tol)
    consider(x, model.objective(x), model.residuals(x))
    return best_x, best_f, iters, converged, lam


def _al_value_grad(model: CEModel, x, lam, rho):
    f, fgrad, g, J = model.evaluate(x, derivatives=True)
    shifted = np.maximum(0.0, lam - rho * g)
    val = f + float(np.sum(shifted ** 2 - lam ** 2)) / (2.0 * rho)
    return val, fgrad - J.T @ shifted, f, g


def _minimize_al(model, x, lam, rho, budget, step_tol, consider, max_inner=100, ftol=1e-10,
                 pgtol=1e-5, max_backtrack=60, memory=10):
    # spectral projected gradient: one projection per iteration, then a
    # nonmonotone Armijo search along the projected direction
    val, grad, f, g = _al_value_grad(model, x, lam, rho)
    consider(x, f, g)
    step = 1.0
    recent = [val]
    x_prev = grad_prev = None
    used = 0
    flat = 0
    ok = False
    while used < min(budget, max_inner):
        used += 1
        if x_prev is not None:
            dx, dg = x - x_prev, grad - grad_prev
            curv = float(dx @ dg)
            # no usable curvature (locally linear): expand and let Armijo trim
            step = float(dx @ dx) / curv if curv > 1e-300 else 10.0 * step
            step = min(max(step, 1e-12), 1e6)
        d = model.project(x - step * grad) - x
        dn = float(np.sqrt(d @ d))
        # |d| / step measures stationarity at x
        if dn <= step_tol * (1.0 + float(np.sqrt(x @ x))) or dn <= pgtol * step:
            ok = True
            break
        slope = float(grad @ d)
        ref = max(recent)
        t = 1.0
        for _ in range(max_backtrack):
            x_new = x + t * d
            v_new, g_new, f_new, c_new = _al_value_grad(model, x_new, lam, rho)
            if v_new <= ref + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no acceptable step: the penalty landscape is beyond float resolution
            return x, used, False, True
        decrease = val - v_new
        x_prev, grad_prev = x, grad
        x, val, grad, f, g = x_new, v_new, g_new, f_new, c_new
        consider(x, f, g)
        recent = (recent + [val])[-memory:]
        flat = flat + 1 if abs(decrease) <= ftol * (1.0 + abs(val)) else 0
        if flat >= 3:
            ok = True
            break
    return x, used, ok, False


def _restore(model: CEModel, x0, x, feas_tol, steps: int = 40):
    # convex combinations of two feasible-region points stay on the simplices
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if model.residuals(x0 + mid * (x - x0)).min() >= -feas_tol:
            lo = mid
        else:
            hi = mid
    return x0 + lo * (x - x0)
