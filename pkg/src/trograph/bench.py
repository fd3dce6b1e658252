"""Local throughput benchmarks. Reports numbers only; there are no thresholds."""

from __future__ import annotations

import platform
import time

import numpy as np

from .denoiser import DenoiserConfig, DenoiserModel
from .diffusion import linear_schedule, noise_graph, sample
from .iksolver import IkProblem, solve_ik
from .kinematics import forward_kinematics
from .pipeline import build_toy_task
from .synthdata import synthetic_task

SUITES = ("sampling", "ik", "graph")
REPORT_SCHEMA_VERSION = 1


def _timed(fn, n: int) -> float:
    t0 = time.perf_counter()
    for i in range(n):
        fn(i)
    return n / max(time.perf_counter() - t0, 1e-12)


def run_bench(suites, repeats: int = 3, n: int = 5, seed: int = 0) -> dict:
    """Rates per second for each suite, with per-repeat values, mean and std."""
    suites = list(suites)
    if not suites:
        raise ValueError("benchmark suite list is empty")
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown benchmark suites {unknown}; choose from {SUITES}")
    if repeats < 1 or n < 1:
        raise ValueError("repeats and n must be >= 1")
    hand, objects, demos = synthetic_task(n_objects=2, seed=seed)
    task = build_toy_task(hand, objects, demos)
    g0 = task.graphs[0]
    schedule = linear_schedule()
    model = DenoiserModel(DenoiserConfig(d=32, n_layers=2, seed=seed))
    targets = demos[0].base @ forward_kinematics(hand, demos[0].q)

    def sampling(i):
        rng = np.random.default_rng([seed, i])
        sample(noise_graph(g0, rng), schedule, model, rng=rng)

    def ik(i):
        solve_ik(IkProblem(hand, targets, seed=i))

    def graph(i):
        g0.with_link_poses(g0.poses + 1e-3 * i).edges  # noqa: B018  (forces the edge build)

    fns = {"sampling": sampling, "ik": ik, "graph": graph}
    units = {"sampling": "ddim_steps_per_s", "ik": "solves_per_s", "graph": "graph_builds_per_s"}
    scale = {"sampling": schedule.M, "ik": 1, "graph": 1}
    results = {}
    for name in suites:
        rates = [_timed(fns[name], n) * scale[name] for _ in range(repeats)]
        results[name] = {
            "unit": units[name],
            "repeats": rates,
            "mean": float(np.mean(rates)),
            "std": float(np.std(rates)),
            "n_per_repeat": n,
        }
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "suites": results,
        "machine": {"python": platform.python_version(), "platform": platform.platform()},
    }
