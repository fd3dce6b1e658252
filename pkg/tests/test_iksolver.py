from __future__ import annotations

import numpy as np
import pytest
from conftest import FIXED_URDF, random_transform

from trograph import se3
from trograph.iksolver import IkProblem, batch_solve, solve_ik, thread_cap
from trograph.kinematics import forward_kinematics, parse_urdf

ONE_JOINT_URDF = """<robot name="hinge">
  <link name="a"/><link name="b"/>
  <joint name="j" type="revolute"><parent link="a"/><child link="b"/>
    <axis xyz="0 0 1"/><limit lower="-0.5" upper="0.5"/></joint>
</robot>"""


def _targets(hand, q, base):
    return base @ forward_kinematics(hand, q)


def _interior(hand, rng):
    span = hand.q_max - hand.q_min
    return rng.uniform(hand.q_min + 0.05 * span, hand.q_max - 0.05 * span)


class TestRoundTrip:
    def test_chain3_100_configurations(self, synth_chain3):
        hand = synth_chain3
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = _interior(hand, rng)
            base = random_transform(rng, max_angle=2.5)
            sol = solve_ik(IkProblem(hand, _targets(hand, q, base)))
            assert sol.converged
            assert sol.residual < 1e-6
            assert np.all(sol.q >= hand.q_min) and np.all(sol.q <= hand.q_max)
            np.testing.assert_allclose(sol.q, q, atol=1e-6)

    def test_three_finger(self, three_finger, rng):
        q = _interior(three_finger, rng)
        base = random_transform(rng)
        sol = solve_ik(IkProblem(three_finger, _targets(three_finger, q, base)))
        assert sol.residual < 1e-6
        np.testing.assert_allclose(sol.base, base, atol=1e-8)

    def test_pose_targets_accepted(self, synth_chain3, rng):
        q = _interior(synth_chain3, rng)
        poses = se3.log_map(_targets(synth_chain3, q, np.eye(4)))
        assert solve_ik(IkProblem(synth_chain3, poses)).residual < 1e-6

    def test_fixed_base(self, synth_chain3, rng):
        q = _interior(synth_chain3, rng)
        base = random_transform(rng)
        sol = solve_ik(IkProblem(synth_chain3, _targets(synth_chain3, q, base), base_transform=base, solve_base=False))
        assert np.array_equal(sol.base, base)
        assert sol.residual < 1e-6


class TestLimits:
    def test_pinned_at_limit_with_analytic_shortfall(self):
        hand = parse_urdf(ONE_JOINT_URDF)
        targets = np.stack([np.eye(4), se3.make_transform(se3.so3_exp(np.array([0, 0, 1.0])))])
        sol = solve_ik(IkProblem(hand, targets, base_transform=np.eye(4), solve_base=False))
        assert sol.q[0] == 0.5
        assert sol.residual == pytest.approx(0.5, abs=1e-9)
        np.testing.assert_allclose(sol.per_link, [0.0, 0.5], atol=1e-9)

    def test_far_targets_stay_feasible(self, two_finger, rng):
        for _ in range(10):
            q = rng.uniform(two_finger.q_min - 1.0, two_finger.q_max + 1.0)
            with pytest.warns(Warning):
                targets = forward_kinematics(two_finger, q)
            sol = solve_ik(IkProblem(two_finger, targets, restarts=2))
            assert np.all(sol.q >= two_finger.q_min) and np.all(sol.q <= two_finger.q_max)
            assert sol.residual >= 0


class TestDegenerate:
    def test_zero_dof_solves_base_only(self, rng):
        hand = parse_urdf(FIXED_URDF)
        base = random_transform(rng)
        sol = solve_ik(IkProblem(hand, _targets(hand, np.zeros(0), base)))
        assert sol.q.shape == (0,)
        assert sol.residual < 1e-9
        np.testing.assert_allclose(sol.base, base, atol=1e-9)

    def test_masked_links_ignored(self, synth_chain3, rng):
        q = _interior(synth_chain3, rng)
        targets = _targets(synth_chain3, q, np.eye(4))
        targets[2] = random_transform(rng)
        mask = np.array([True, True, False])
        sol = solve_ik(IkProblem(synth_chain3, targets, mask=mask))
        assert sol.residual < 1e-6

    def test_validation(self, synth_chain3):
        with pytest.raises(ValueError):
            IkProblem(synth_chain3, np.zeros((2, 4, 4)))
        with pytest.raises(ValueError):
            IkProblem(synth_chain3, np.repeat(np.eye(4)[None], 3, 0), mask=np.zeros(3, dtype=bool))
        with pytest.raises(ValueError):
            IkProblem(synth_chain3, np.repeat(np.eye(4)[None], 3, 0), tol=0.0)
        with pytest.raises(ValueError):
            solve_ik(IkProblem(synth_chain3, np.repeat(np.eye(4)[None], 3, 0)), q_init=[10.0, 0.0])


def test_objective_monotone_in_iterations(two_finger, rng):
    q = _interior(two_finger, rng)
    targets = _targets(two_finger, q, random_transform(rng))
    targets[-1] = targets[-1] @ se3.exp_map(np.array([0.01, 0, 0, 0, 0.2, 0]))  # unreachable, so no early exit
    # a run capped at k iterations is a prefix of the run capped at k + 1
    sq = []
    for k in range(1, 15):
        sol = solve_ik(IkProblem(two_finger, targets, max_iters=k, restarts=0))
        sq.append(float(np.sum(sol.per_link**2)))
    assert all(b <= a for a, b in zip(sq, sq[1:]))
    assert sq[-1] < sq[0]


class TestBatch:
    def _problems(self, hand, n, seed):
        rng = np.random.default_rng(seed)
        return [IkProblem(hand, _targets(hand, _interior(hand, rng), random_transform(rng)), seed=i) for i in range(n)]

    def test_order_independent(self, three_finger):
        probs = self._problems(three_finger, 6, 1)
        a = batch_solve(probs, parallelism=3)
        b = batch_solve(probs[::-1], parallelism=2)[::-1]
        for x, y in zip(a, b):
            assert np.array_equal(x.q, y.q) and np.array_equal(x.base, y.base)

    def test_identical_problems(self, three_finger):
        p = self._problems(three_finger, 1, 2)[0]
        out = batch_solve([p, p, p], parallelism=3)
        assert all(np.array_equal(out[0].q, s.q) for s in out)

    def test_matches_serial(self, three_finger):
        probs = self._problems(three_finger, 4, 3)
        for s, b in zip([solve_ik(p) for p in probs], batch_solve(probs, parallelism=4)):
            assert np.array_equal(s.q, b.q)

    def test_item_failure_is_local(self, three_finger, monkeypatch):
        probs = self._problems(three_finger, 3, 4)
        import trograph.iksolver as ik

        real = ik.solve_ik

        def flaky(problem, *a, **k):
            if problem.seed == 1:
                raise RuntimeError("boom")
            return real(problem, *a, **k)

        monkeypatch.setattr(ik, "solve_ik", flaky)
        out = batch_solve(probs, parallelism=1)
        assert out[1].error and not out[1].converged
        assert out[0].error is None and out[2].error is None

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("TROGRAPH_THREADS", "2")
        assert thread_cap() == 2
        monkeypatch.setenv("TROGRAPH_THREADS", "junk")
        assert thread_cap() >= 1
