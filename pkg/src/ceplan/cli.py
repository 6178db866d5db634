"""Command line: single episodes and Monte Carlo preference-noise studies.

``ceplan run --scenario NAME_OR_PATH [...] --out DIR`` writes one result
bundle per scenario; ``ceplan monte-carlo --scenario ... --iterations K``
writes per-iteration metrics and the braking histogram. Every float is
written with 9 significant digits. Wall-clock timings go to ``timing.csv``
only, so the other files are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metrics import braking_histogram, compute_metrics
from .preference import PreferenceParams
from .scenario import ScenarioConfig, ScenarioError, load_scenario
from .sim import EpisodeLog, run_episode

RESULT_SCHEMA_VERSION = 1

log = logging.getLogger("ceplan")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def _round(obj):
    # 9 significant digits for every float in a JSON-able structure
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def episode_to_dict(ep: EpisodeLog, scenario: Optional[ScenarioConfig] = None) -> Dict:
    cycles = []
    for c in ep.cycles:
        cycles.append({
            "cycle": c.cycle, "time": c.time, "vehicles": c.vehicles,
            "risk_cells": [list(x) for x in c.risk_cells],
            "objective": c.objective, "initial_objective": c.initial_objective,
            "converged": c.converged, "iterations": c.iterations,
            "used_fallback": c.used_fallback, "chosen": c.chosen,
            "coarse": {k: [list(x) for x in v] for k, v in c.coarse.items()},
            "unsafe_draws": c.unsafe_draws,
        })
    out = {
        "schema_version": RESULT_SCHEMA_VERSION,
        "scenario": ep.scenario,
        "seed": ep.seed,
        "vehicles": ep.vehicles,
        "directions": ep.directions,
        "spatial_resolution": ep.spatial_resolution,
        "temporal_resolution": ep.temporal_resolution,
        "safety_threshold": ep.safety_threshold,
        "completed": ep.completed,
        "collision": ep.collision,
        "braking": ep.braking,
        "completion": ep.completion,
        "ticks": [{"time": t, "positions": {k: list(v) for k, v in p.items()}}
                  for t, p in zip(ep.times, ep.positions)],
        "steps": [{k: list(v) for k, v in s.items()} for s in ep.steps],
        "cycles": cycles,
    }
    if scenario is not None:
        out["config"] = scenario.to_dict()
    return _round(out)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    return buf.getvalue()


METRIC_FIELDS = ["scenario", "seed", "t_total", "d_min", "cycles", "braking", "collision", "completed"]


def _metric_row(ep: EpisodeLog):
    m = compute_metrics(ep)
    return [ep.scenario, ep.seed, m.t_total, m.d_min, m.cycles, m.braking, ep.collision, ep.completed]


def distribution_rows(ep: EpisodeLog):
    rows = []
    for c in ep.cycles:
        for vid in c.vehicles:
            for n, (p0, p1) in enumerate(zip(c.initial[vid], c.recommended[vid])):
                rows.append([c.cycle, vid, n, p0, p1, n == c.chosen[vid]])
    return rows


def write_bundle(ep: EpisodeLog, scenario: ScenarioConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "episode.json").write_text(json.dumps(episode_to_dict(ep, scenario), indent=1) + "\n")
    (out / "metrics.csv").write_text(_csv_text(METRIC_FIELDS, [_metric_row(ep)]))
    (out / "distributions.csv").write_text(_csv_text(
        ["cycle", "vehicle", "trajectory", "initial", "recommended", "chosen"], distribution_rows(ep)))
    total = sum(ep.braking.values())
    (out / "braking_hist.csv").write_text(_csv_text(["braking", "frequency"], [[total, 1.0]]))
    m = compute_metrics(ep)
    rows = [[t["cycle"], t["plan_seconds"], t["solve_seconds"]] for t in ep.timing]
    (out / "timing.csv").write_text(
        _csv_text(["cycle", "plan_seconds", "solve_seconds"], rows)
        + f"# f={fmt(m.f)} f_solve={fmt(m.f_solve)}\n")


# -- Monte Carlo ---------------------------------------------------------------

def iteration_seeds(master: int, iteration: int):
    """(parameter-noise generator, episode seed) for one Monte Carlo iteration."""
    rng = np.random.default_rng([int(master), int(iteration)])
    return rng, int(rng.integers(0, 2 ** 31 - 1))


def perturbed_params(scenario: ScenarioConfig, rng: np.random.Generator,
                     sigma_alpha: float, sigma_beta: float) -> Dict[str, PreferenceParams]:
    out = {}
    for v in sorted(scenario.vehicles, key=lambda v: v.id):
        da, db = rng.normal(0.0, 1.0, 2)
        out[v.id] = replace(v.params, alpha=v.alpha + sigma_alpha * float(da),
                            beta=v.beta + sigma_beta * float(db))
    return out


def _mc_iteration(args):
    scenario, i, master, sa, sb = args
    rng, ep_seed = iteration_seeds(master, i)
    params = perturbed_params(scenario, rng, sa, sb)
    ep = run_episode(scenario, seed=ep_seed, params=params)
    m = compute_metrics(ep)
    plan = sum(t["plan_seconds"] for t in ep.timing)
    return {"iteration": i, "seed": ep_seed, "params": params, "metrics": m,
            "braking": sum(ep.braking.values()), "collision": ep.collision,
            "completed": ep.completed, "plan_seconds": plan,
            "max_plan_seconds": max((t["plan_seconds"] for t in ep.timing), default=0.0)}


def monte_carlo(scenario: ScenarioConfig, iterations: int, seed: int = 0,
                sigma_alpha: float = 0.5, sigma_beta: float = 0.5,
                workers: int = 1) -> List[Dict]:
    """Run noisy-preference episodes; results are in iteration order."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    jobs = [(scenario, i, seed, sigma_alpha, sigma_beta) for i in range(iterations)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_iteration, jobs))
    else:
        results = [_mc_iteration(j) for j in jobs]
    return sorted(results, key=lambda r: r["iteration"])


def write_monte_carlo(results: List[Dict], scenario: ScenarioConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows, prow = [], []
    for r in results:
        m = r["metrics"]
        rows.append([r["iteration"], r["seed"], m.t_total, m.d_min, m.cycles, r["braking"],
                     r["collision"], r["completed"]])
        for vid, p in r["params"].items():
            prow.append([r["iteration"], vid, p.alpha, p.beta])
    (out / "metrics.csv").write_text(_csv_text(
        ["iteration", "seed", "t_total", "d_min", "cycles", "braking", "collision", "completed"], rows))
    (out / "parameters.csv").write_text(_csv_text(["iteration", "vehicle", "alpha", "beta"], prow))
    hist = braking_histogram([r["braking"] for r in results])
    (out / "braking_hist.csv").write_text(_csv_text(["braking", "frequency"], sorted(hist.items())))
    (out / "timing.csv").write_text(_csv_text(
        ["iteration", "plan_seconds", "max_plan_seconds"],
        [[r["iteration"], r["plan_seconds"], r["max_plan_seconds"]] for r in results]))
    (out / "scenario.json").write_text(scenario.to_json())


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ceplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, nargs="+",
                        help="scenario JSON file or bundled scenario name")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed (default: scenario seed)")
        sp.add_argument("--execute-steps", type=int, default=None,
                        help="coarse steps executed per planning cycle")
        sp.add_argument("--quiet", action="store_true", help="no summary on stdout")

    common(sub.add_parser("run", help="simulate one episode per scenario"))
    mc = sub.add_parser("monte-carlo", help="episodes with Gaussian noise on alpha and beta")
    common(mc)
    mc.add_argument("--iterations", type=int, default=150)
    mc.add_argument("--sigma-alpha", type=float, default=0.5)
    mc.add_argument("--sigma-beta", type=float, default=0.5)
    mc.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    say = (lambda *a: None) if args.quiet else print
    try:
        scenarios = [load_scenario(s).with_overrides(execute_steps=args.execute_steps)
                     for s in args.scenario]
    except ScenarioError as exc:
        print(f"ceplan: error: {exc}", file=sys.stderr)
        return 2
    multi = len(scenarios) > 1
    for sc in scenarios:
        out = args.out / sc.name if multi else args.out
        seed = sc.sim.seed if args.seed is None else args.seed
        if args.command == "run":
            ep = run_episode(sc, seed=seed)
            write_bundle(ep, sc, out)
            m = compute_metrics(ep)
            say(f"{sc.name}: completed={ep.completed} collision={ep.collision} "
                f"t_total={fmt(m.t_total)} d_min={fmt(m.d_min)} braking={m.braking} "
                f"cycles={m.cycles} f={fmt(m.f)} -> {out}")
        else:
            if args.iterations < 1:
                print("ceplan: error: --iterations must be >= 1", file=sys.stderr)
                return 2
            results = monte_carlo(sc, args.iterations, seed, args.sigma_alpha,
                                  args.sigma_beta, args.workers)
            write_monte_carlo(results, sc, out)
            hist = braking_histogram([r["braking"] for r in results])
            low = sum(v for k, v in hist.items() if k <= 2)
            say(f"{sc.name}: {len(results)} iterations, braking<=2 {low:.4f}, "
                f"histogram {dict(sorted(hist.items()))} -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
