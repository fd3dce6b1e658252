from __future__ import annotations

import numpy as np
import pytest

from trograph import pipeline
from trograph.denoiser import oracle_denoiser
from trograph.diffusion import GuidanceSpec, linear_schedule
from trograph.pipeline import build_toy_task, grasp_record, length_unit, sample_grasp, solve_graph_ik
from trograph.synthdata import synthetic_task
from trograph.trograph import rescale_graph


@pytest.fixture(scope="module")
def toy():
    hand, objects, demos = synthetic_task(n_objects=2, seed=3)
    return build_toy_task(hand, objects, demos, P=8, L_pad=8)


@pytest.fixture(scope="module")
def sched():
    return linear_schedule(lam=0.0)


class UnitOracle:
    """Oracle that works in a scaled world, like a trained model with ``length_unit``."""

    def __init__(self, graph_m, schedule, unit):
        self.length_unit = unit
        self._f = oracle_denoiser(rescale_graph(graph_m, 1.0 / unit).poses, schedule)

    def __call__(self, g, t):
        return self._f(g, t)


def test_oracle_in_meters(toy, sched):
    g0 = toy.graphs[0]
    out = sample_grasp(g0, sched, oracle_denoiser(g0.poses, sched), np.random.default_rng(0))
    assert length_unit(oracle_denoiser(g0.poses, sched)) == 1.0
    np.testing.assert_allclose(out.poses, g0.poses, atol=1e-6)


@pytest.mark.parametrize("unit", [0.05, 0.01])
def test_chain_runs_in_model_units(toy, sched, unit):
    g0 = toy.graphs[1]
    out = sample_grasp(g0, sched, UnitOracle(g0, sched, unit), np.random.default_rng(1))
    np.testing.assert_allclose(out.poses, g0.poses, atol=1e-6)
    np.testing.assert_allclose(out.object_nodes.centers, g0.object_nodes.centers, atol=1e-15)


def test_conditioned_run_from_init(toy, sched):
    g0 = toy.graphs[0]
    spec = GuidanceSpec("none", t_star=150)
    init = g0.with_link_poses(g0.poses + 0.001 * g0.mask[:, None])
    out = sample_grasp(g0, sched, UnitOracle(g0, sched, 0.05), np.random.default_rng(2), spec, init)
    np.testing.assert_allclose(out.poses, g0.poses, atol=1e-6)


def test_contact_points_follow_the_unit(toy, sched, monkeypatch):
    g0 = toy.graphs[0]
    pts = np.array([[0.01, 0.02, 0.03], [0.0, 0.0, 0.04]])
    spec = GuidanceSpec("contact", toy.hand.palm_index, contact_points=pts, heat=np.ones(2), r_cont=np.eye(3))
    seen = {}

    def fake_sample(start, schedule, denoiser, guidance, rng, t_start=None):
        seen["points"] = guidance.contact_points
        return start

    monkeypatch.setattr(pipeline, "sample", fake_sample)
    sample_grasp(g0, sched, UnitOracle(g0, sched, 0.05), np.random.default_rng(0), spec)
    np.testing.assert_allclose(seen["points"], pts / 0.05)
    assert np.array_equal(spec.contact_points, pts)


def test_record_and_ik(toy):
    g0 = toy.graphs[0]
    sol = solve_graph_ik(toy.hand, g0)
    rec = grasp_record(toy.hand, g0, sol, toy.objects[0])
    assert sol.residual < 1e-6
    assert set(rec) == {"link_poses", "q", "base", "ik_residual", "converged", "fingertip_distance"}
    assert max(rec["fingertip_distance"]) < 0.01
