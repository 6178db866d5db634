"""Minimum-jerk piecewise polynomial refinement inside a safety corridor.

Every segment is a degree-7 polynomial per planar axis written in the local
normalised time ``tau = t / duration``. The objective is the integral of the
squared jerk; boundary states, waypoints and C3 continuity at the junctions
are equality constraints, and the position has to stay inside the segment's
rectangle at a fixed set of sample times. The two axes decouple because the
rectangles are axis aligned, so each axis is a separate QP. Equalities are
eliminated through a null-space basis and the remaining inequality QP is
solved with a dual active-set method (Goldfarb-Idnani).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corridor import Corridor

DEGREE = 7
CONTINUITY_ORDER = 3


class ConditioningError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class PolynomialSegment:
    """``coeffs[axis, j]`` multiplies ``tau**j`` with ``tau = t / duration``."""

    coeffs: np.ndarray
    duration: float

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    def derivative(self, t, k: int = 0) -> np.ndarray:
        """k-th time derivative at local time(s) ``t``; shape ``(2,)`` or ``(2, len(t))``."""
        tau = np.asarray(t, dtype=float) / self.duration
        row = _basis(self.degree, tau, k) / self.duration ** k
        return self.coeffs @ row


@dataclass
class PiecewiseTrajectory:
    segments: List[PolynomialSegment]
    start_state: Optional[tuple] = None
    end_state: Optional[tuple] = None

    @property
    def durations(self) -> np.ndarray:
        return np.array([s.duration for s in self.segments])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def duration(self) -> float:
        return float(self.durations.sum())


@dataclass
class QPResult:
    trajectory: Optional[PiecewiseTrajectory]
    objective: float
    feasible: bool
    max_violation: float
    iterations: int = 0
    message: str = ""
    multipliers: Dict[str, np.ndarray] = field(default_factory=dict)


def _basis(degree: int, tau, k: int) -> np.ndarray:
    """Row(s) of d^k/dtau^k [1, tau, ..., tau^degree]."""
    tau = np.asarray(tau, dtype=float)
    j = np.arange(degree + 1)
    fall = np.ones(degree + 1)
    for i in range(k):
        fall = fall * np.maximum(j - i, 0)
    power = np.maximum(j - k, 0)
    if tau.ndim == 0:
        return fall * tau ** power
    return fall[:, None] * tau[None, :] ** power[:, None]


def jerk_gram(degree: int = DEGREE) -> np.ndarray:
    """``int_0^1 (d^3/dtau^3 p)^2 dtau`` as a quadratic form in the coefficients."""
    Q = np.zeros((degree + 1, degree + 1))
    for a in range(3, degree + 1):
        for b in range(3, degree + 1):
            ca = a * (a - 1) * (a - 2)
            cb = b * (b - 1) * (b - 2)
            Q[a, b] = ca * cb / (a + b - 5)
    return Q


def evaluate(traj: PiecewiseTrajectory, t: float, k: int = 0) -> np.ndarray:
    """k-th derivative of the trajectory at absolute time ``t``.

    Segments are left-closed at junctions; ``t`` equal to the total duration
    is evaluated on the last segment.
    """
    if k < 0:
        raise ValueError("derivative order must be >= 0")
    bp = traj.breakpoints
    total = bp[-1]
    if not (-1e-12 <= t <= total + 1e-12):
        raise DomainError(f"t={t} outside [0, {total}]")
    i = int(np.searchsorted(bp, t, side="right")) - 1
    i = min(max(i, 0), len(traj.segments) - 1)
    seg = traj.segments[i]
    return seg.derivative(min(max(t - bp[i], 0.0), seg.duration), k)


def sample(traj: PiecewiseTrajectory, times: Sequence[float], k: int = 0) -> np.ndarray:
    """``(len(times), 2)`` array of :func:`evaluate` values."""
    return np.array([evaluate(traj, float(t), k) for t in times]).reshape(-1, 2)


def jerk_cost(traj: PiecewiseTrajectory) -> float:
    total = 0.0
    for seg in traj.segments:
        Q = jerk_gram(seg.degree) / seg.duration ** 5
        total += float(sum(c @ Q @ c for c in seg.coeffs))
    return total


def continuity_residuals(traj: PiecewiseTrajectory, order: int = CONTINUITY_ORDER) -> np.ndarray:
    """``(junctions, order + 1)`` array of left/right derivative mismatches."""
    out = []
    for a, b in zip(traj.segments, traj.segments[1:]):
        out.append([np.linalg.norm(a.derivative(a.duration, k) - b.derivative(0.0, k))
                    for k in range(order + 1)])
    return np.array(out).reshape(-1, order + 1)


# -- QP ---------------------------------------------------------------------

def _state(state, name):
    if state is None:
        return (None, None, None)
    state = tuple(state) + (None,) * (3 - len(state))
    out = []
    for v in state[:3]:
        out.append(None if v is None else np.asarray(v, dtype=float).reshape(2))
    if out[0] is None and name == "start":
        raise ValueError("start position is required")
    return tuple(out)


def refine_trajectory(corridor: Corridor, start_state, end_state,
                      waypoints: Optional[Mapping[int, tuple]] = None, samples: int = 10,
                      degree: int = DEGREE, cond_limit: float = 1e12,
                      tol: float = 1e-6, max_refinements: int = 10,
                      guard: float = 1e-9) -> QPResult:
    """Minimum-jerk trajectory through ``corridor``.

    ``start_state`` and ``end_state`` are ``(position, velocity, acceleration)``
    tuples of planar vectors; any entry of ``end_state`` (and the velocity or
    acceleration of ``start_state``) may be ``None`` to leave it free.
    ``waypoints`` maps a junction index ``i`` (the end of segment ``i``) to a
    state tuple of the same form. Containment is enforced at ``samples``
    uniformly spaced times per segment, endpoints included. After each solve
    the exact extremum times of every segment are checked and any excursion
    beyond ``guard`` is added as a further sample constraint, up to
    ``max_refinements`` rounds, so the result is contained over continuous
    time whenever the rounds suffice.
    """
    segs = list(corridor)
    if not segs:
        raise ValueError("empty corridor")
    if samples < 2:
        raise ValueError("need at least two samples per segment")
    if degree < 5:
        raise ValueError("degree must be >= 5")
    start = _state(start_state, "start")
    end = _state(end_state, "end")
    if not segs[0].contains(start[0], tol):
        raise ValueError("start position outside the first rectangle")
    if end[0] is not None and not segs[-1].contains(end[0], tol):
        raise ValueError("end position outside the last rectangle")
    wps = {int(i): _state(s, "waypoint") for i, s in (waypoints or {}).items()}
    for i in wps:
        if not 0 <= i < len(segs) - 1:
            raise ValueError(f"waypoint junction {i} out of range")

    nseg, nc = len(segs), degree + 1
    n = nseg * nc
    durs = np.array([s.duration for s in segs])
    Q = jerk_gram(degree)
    H = np.zeros((n, n))
    for i, T in enumerate(durs):
        H[i * nc:(i + 1) * nc, i * nc:(i + 1) * nc] = Q / T ** 5

    def row(i, tau, k):
        r = np.zeros(n)
        r[i * nc:(i + 1) * nc] = _basis(degree, tau, k) / durs[i] ** k
        return r

    # equalities, shared by both axes except for the right-hand sides
    eq_rows: List[np.ndarray] = []
    eq_rhs: List[Tuple] = []
    for k, v in enumerate(start):
        if v is not None:
            eq_rows.append(row(0, 0.0, k))
            eq_rhs.append(v)
    for k, v in enumerate(end):
        if v is not None:
            eq_rows.append(row(nseg - 1, 1.0, k))
            eq_rhs.append(v)
    for i in range(nseg - 1):
        for k in range(CONTINUITY_ORDER + 1):
            eq_rows.append(row(i, 1.0, k) - row(i + 1, 0.0, k))
            eq_rhs.append(np.zeros(2))
        for k, v in enumerate(wps.get(i, (None,) * 3)):
            if v is not None:
                eq_rows.append(row(i, 1.0, k))
                eq_rhs.append(v)
    E = np.array(eq_rows).reshape(-1, n)
    e = np.array(eq_rhs).reshape(-1, 2)

    Z, xp, rank_ok, resid = _null_space_split(E, e)
    if not rank_ok:
        return QPResult(None, math.inf, False, float(resid), 0,
                        f"inconsistent equality constraints (residual {resid:.3g})")
    Hr = Z.T @ H @ Z
    if Hr.size:
        cond = np.linalg.cond(Hr)
        if not np.isfinite(cond) or cond > cond_limit:
            raise ConditioningError(f"reduced Hessian condition number {cond:.3g}")

    lower = np.array([s.lower for s in segs])
    upper = np.array([s.upper for s in segs])
    base = np.linspace(0.0, 1.0, samples)
    # per axis: list of (segment, tau) sample constraints, grown adaptively
    points = [[(i, t) for i in range(nseg) for t in base] for _ in range(2)]
    coeffs = np.zeros((2, n))
    iterations = 0
    messages = []
    mults = {}
    feasible = True
    for ax in range(2):
        x_p = xp[:, ax]
        gr = Z.T @ H @ x_p
        for _ in range(max_refinements + 1):
            seg_idx = np.array([i for i, _ in points[ax]])
            taus = np.array([t for _, t in points[ax]])
            S = np.zeros((taus.size, n))
            S[np.arange(taus.size)[:, None], seg_idx[:, None] * nc + np.arange(nc)] = \
                _basis(degree, taus, 0).T
            hi, lo = upper[seg_idx, ax], lower[seg_idx, ax]
            # S (x_p + Z z) <= hi  and  -S (x_p + Z z) <= -lo
            Cr = np.vstack([S @ Z, -S @ Z])
            dr = np.concatenate([hi - S @ x_p, -(lo - S @ x_p)])
            if Hr.size:
                z, it, ok, u, msg = solve_qp(Hr, gr, Cr, dr)
            else:
                z, it, ok, u, msg = np.zeros(0), 0, bool(np.all(dr >= -tol)), np.zeros(0), ""
            iterations += it
            x = x_p + Z @ z
            if not ok:
                break
            extra = _excursions(x.reshape(nseg, nc), lower[:, ax], upper[:, ax], guard)
            if not extra:
                break
            points[ax].extend(extra)
        if not ok:
            feasible = False
            messages.append(f"axis {ax}: {msg}")
        coeffs[ax] = x
        mults[f"axis{ax}"] = u

    objective = float(sum(c @ H @ c for c in coeffs))
    pieces = [PolynomialSegment(coeffs[:, i * nc:(i + 1) * nc].copy(), float(durs[i]))
              for i in range(nseg)]
    traj = PiecewiseTrajectory(pieces, start_state, end_state)
    violation = corridor_violation(traj, corridor)
    eq_viol = float(np.max(np.abs(E @ coeffs.T - e))) if E.size else 0.0
    violation = max(violation, eq_viol)
    feasible = feasible and violation <= tol
    if violation > tol and not messages:
        messages.append(f"constraint violation {violation:.3g}")
    return QPResult(traj, objective, feasible, violation, iterations, "; ".join(messages), mults)


def _critical_times(C: np.ndarray) -> np.ndarray:
    """Candidate extremum times in [0, 1] for each row of polynomial coefficients.

    Returns an array with one row per polynomial: both endpoints plus every
    near-real root of the derivative inside (0, 1). Unused slots hold 0, so
    the maximum of the polynomial over a row is its maximum on [0, 1]. The
    roots are eigenvalues of companion matrices, stacked per degree.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    m, nc = C.shape
    D = C[:, 1:] * np.arange(1, nc)
    out = np.zeros((m, nc + 1))
    out[:, 1] = 1.0
    if nc < 2:
        return out
    scale = np.max(np.abs(D), axis=1)
    live = np.abs(D) > 1e-13 * scale[:, None]
    # effective degree: index of the last significant coefficient
    deg = np.where(live.any(axis=1), D.shape[1] - 1 - np.argmax(live[:, ::-1], axis=1), 0)
    for k in np.unique(deg):
        if k < 1:
            continue
        rows = np.flatnonzero(deg == k)
        M = np.zeros((rows.size, k, k))
        M[:, np.arange(1, k), np.arange(k - 1)] = 1.0
        M[:, :, -1] = -D[rows, :k] / D[rows, k][:, None]
        r = np.linalg.eigvals(M)
        # extra candidates are harmless, so the realness test is loose
        ok = (np.abs(r.imag) < 1e-3) & (r.real > 0.0) & (r.real < 1.0)
        out[rows, 2:2 + k] = np.where(ok, r.real, 0.0)
    return out


def _polyval_rows(C: np.ndarray, T: np.ndarray) -> np.ndarray:
    # Horner per row: C (m, nc), T (m, K)
    V = np.zeros_like(T)
    for j in range(C.shape[1] - 1, -1, -1):
        V = V * T + C[:, j:j + 1]
    return V


def _excursions(C: np.ndarray, lo: np.ndarray, hi: np.ndarray, guard: float):
    # extremum times where a segment leaves its interval by more than ``guard``
    T = _critical_times(C)
    V = _polyval_rows(C, T)
    bad = (V > hi[:, None] + guard) | (V < lo[:, None] - guard)
    out = sorted({(int(i), float(T[i, k])) for i, k in zip(*np.nonzero(bad))})
    return out


def corridor_violation(traj: PiecewiseTrajectory, corridor: Corridor) -> float:
    """Largest excursion of the trajectory outside its rectangles, over continuous time."""
    C = np.concatenate([seg.coeffs for seg in traj.segments])  # rows: seg0 x, seg0 y, ...
    lower = np.concatenate([box.lower for box in corridor])
    upper = np.concatenate([box.upper for box in corridor])
    V = _polyval_rows(C, _critical_times(C))
    worst = max(float(np.max(V - upper[:, None])), float(np.max(lower[:, None] - V)))
    return max(worst, 0.0)


def _null_space_split(E, e, rtol: float = 1e-10):
    """Particular solutions (one column per axis) and a null-space basis of ``E``."""
    n = E.shape[1]
    if E.shape[0] == 0:
        return np.eye(n), np.zeros((n, e.shape[1] if e.ndim == 2 else 2)), True, 0.0
    U, sv, Vt = np.linalg.svd(E)
    rank = int(np.sum(sv > rtol * sv[0]))
    xp = Vt[:rank].T @ ((U[:, :rank].T @ e) / sv[:rank, None])
    resid = float(np.max(np.abs(E @ xp - e)))
    ok = resid <= 1e-8 * (1.0 + float(np.max(np.abs(e))))
    return Vt[rank:].T, xp, ok, resid


def solve_qp(G: np.ndarray, a: np.ndarray, C: np.ndarray, d: np.ndarray,
             max_iter: int = 1000, tol: float = 1e-12):
    """Minimise ``0.5 x'Gx + a'x`` subject to ``C x <= d``; ``G`` positive definite.

    Dual active-set method of Goldfarb and Idnani: start from the
    unconstrained minimiser and repeatedly add the most violated constraint,
    dropping active constraints whose multipliers would turn negative. The
    most violated constraint is picked with ties going to the lowest index,
    so the pivoting sequence is deterministic.

    Returns ``(x, iterations, ok, multipliers, message)``.
    """
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    # internally n_j' x >= b_j
    N = -np.asarray(C, dtype=float).reshape(-1, G.shape[0])
    b = -np.asarray(d, dtype=float).reshape(-1)
    m = N.shape[0]
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("QP Hessian is not positive definite") from exc

    def lsolve(v):
        return np.linalg.solve(L, v)

    def ltsolve(v):
        return np.linalg.solve(L.T, v)

    x = -ltsolve(lsolve(a))
    active: List[int] = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(b)
    iters = 0
    while iters < max_iter:
        s = N @ x - b
        viol = s / scale
        p = int(np.argmin(viol)) if m else 0
        if m == 0 or viol[p] >= -tol:
            mult = np.zeros(m)
            mult[active] = u
            return x, iters, True, mult, ""
        u_plus = np.append(u, 0.0)
        while True:
            iters += 1
            if iters > max_iter:
                break
            w = lsolve(N[p])
            if active:
                Bm = lsolve(N[active].T)
                Qf, R = np.linalg.qr(Bm, mode="complete")
                q = len(active)
                Q1, Q2 = Qf[:, :q], Qf[:, q:]
                r = np.linalg.solve(R[:q], Q1.T @ w)
                z = ltsolve(Q2 @ (Q2.T @ w))
            else:
                r = np.zeros(0)
                z = ltsolve(w)
            # dual step length limited by the active multipliers
            t1, k_drop = math.inf, -1
            for j in range(len(r)):
                if r[j] > 1e-14 and u_plus[j] / r[j] < t1:
                    t1, k_drop = u_plus[j] / r[j], j
            zn = float(z @ N[p])
            t2 = -(N[p] @ x - b[p]) / zn if zn > 1e-14 * (1.0 + np.linalg.norm(N[p]) ** 2) else math.inf
            if math.isinf(t1) and math.isinf(t2):
                mult = np.zeros(m)
                mult[active] = u_plus[:-1]
                return x, iters, False, mult, f"infeasible: constraint {p} cannot be satisfied"
            if math.isinf(t2):
                # the new constraint depends on the active ones: only the dual moves
                u_plus = u_plus + t1 * np.append(-r, 1.0)
                del active[k_drop]
                u_plus = np.delete(u_plus, k_drop)
                continue
            t = min(t1, t2)
            x = x + t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            del active[k_drop]
            u_plus = np.delete(u_plus, k_drop)
    mult = np.zeros(m)
    mult[active] = u[:len(active)]
    return x, iters, False, mult, "iteration limit reached"
