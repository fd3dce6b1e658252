"""Joint-limited inverse kinematics from per-link target poses.

Levenberg-Marquardt over the joint vector and a free hand base. The residual
of link ``i`` is ``log(target_i^-1 @ base @ FK_i(q))``; joint limits are kept
by projection, with variables pinned at an active bound removed from the step.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .kinematics import KinematicHand, fk_jacobian, forward_kinematics

DEFAULT_RESTARTS = 8


@dataclass
class IkProblem:
    hand: KinematicHand
    targets: np.ndarray  # (L, 4, 4) object-frame transforms or (L, 6) poses
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None
    base_transform: np.ndarray | None = None  # initial guess, or fixed base when solve_base=False
    solve_base: bool = True
    max_iters: int = 100
    tol: float = 1e-12
    restarts: int = DEFAULT_RESTARTS
    restart_above: float | None = None  # also restart when the residual stays above this
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=float)
        if t.ndim == 2 and t.shape[1] == 6:
            t = se3.exp_map(t)
        if t.shape != (self.hand.L, 4, 4):
            raise ValueError(f"expected {self.hand.L} link targets, got array of shape {np.shape(self.targets)}")
        self.targets = t
        self.mask = np.ones(self.hand.L, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        self.weights = np.ones(self.hand.L) if self.weights is None else np.asarray(self.weights, dtype=float)
        if not np.any(self.mask):
            raise ValueError("IK problem has no unmasked targets")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class IkSolution:
    q: np.ndarray
    base: np.ndarray
    residual: float
    iterations: int
    converged: bool
    error: str | None = None
    per_link: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _residuals(problem: IkProblem, q, base):
    links = np.flatnonzero(problem.mask)
    F = forward_kinematics(problem.hand, q)
    inv_t = se3.inverse(problem.targets[links])
    E = inv_t @ base @ F[links]
    r = se3.log_map(E, singular="axis")
    w = problem.weights[links][:, None]
    return r * w, F, inv_t, links


def _jacobian(problem: IkProblem, q, base, r, F, inv_t, links):
    hand = problem.hand
    w = problem.weights[links]
    Jl_inv = np.linalg.inv(se3.se3_left_jacobian(r / np.where(w == 0, 1.0, w)[:, None]))
    lead = w[:, None, None] * Jl_inv @ se3.adjoint(inv_t)  # (n, 6, 6)
    blocks = []
    if hand.dof:
        G = fk_jacobian(hand, q)[links]  # (n, 6, dof): point velocity, angular velocity
        p = F[links][:, :3, 3]
        S = np.empty_like(G)
        S[:, :3] = G[:, :3] - np.cross(G[:, 3:], p[:, :, None], axisa=1, axisb=1, axisc=1)
        S[:, 3:] = G[:, 3:]
        blocks.append(lead @ se3.adjoint(base) @ S)
    if problem.solve_base:
        blocks.append(lead)
    return np.concatenate(blocks, axis=2).reshape(-1, (hand.dof if hand.dof else 0) + (6 if problem.solve_base else 0))


def _initial_base(problem: IkProblem, q) -> np.ndarray:
    if problem.base_transform is not None:
        return np.asarray(problem.base_transform, dtype=float)
    i = int(np.flatnonzero(problem.mask)[0])
    F = forward_kinematics(problem.hand, q)
    return problem.targets[i] @ se3.inverse(F[i])


def _solve_once(problem: IkProblem, q0: np.ndarray):
    hand = problem.hand
    lo, hi = hand.q_min, hand.q_max
    q = np.clip(q0, lo, hi)
    base = _initial_base(problem, q)
    r, F, inv_t, links = _residuals(problem, q, base)
    cost = 0.5 * float(np.sum(r * r))
    mu = 1e-3
    converged = False
    it = 0
    dof = hand.dof
    for it in range(1, problem.max_iters + 1):
        if cost < 0.5 * problem.tol**2:
            converged = True
            break
        J = _jacobian(problem, q, base, r, F, inv_t, links)
        g = J.T @ r.reshape(-1)
        free = np.ones(J.shape[1], dtype=bool)
        if dof:
            at_lo = (q <= lo) & (g[:dof] > 0)
            at_hi = (q >= hi) & (g[:dof] < 0)
            free[:dof] = ~(at_lo | at_hi)
        if np.linalg.norm(g[free]) < problem.tol:
            converged = True
            break
        Jf = J[:, free]
        H = Jf.T @ Jf
        accepted = False
        while mu < 1e16:
            A = H + mu * (np.diag(np.diag(H)) + 1e-12 * np.eye(H.shape[0]))
            try:
                step_f = -np.linalg.solve(A, g[free])
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            step = np.zeros(J.shape[1])
            step[free] = step_f
            q_new = np.clip(q + step[:dof], lo, hi) if dof else q
            base_new = se3.exp_map(step[dof:]) @ base if problem.solve_base else base
            r_new, F_new, _, _ = _residuals(problem, q_new, base_new)
            cost_new = 0.5 * float(np.sum(r_new * r_new))
            if cost_new < cost:
                decrease = cost - cost_new
                q, base, r, F, cost = q_new, base_new, r_new, F_new, cost_new
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            converged = True  # no descent direction left at this precision
            break
        if decrease < problem.tol * max(cost, problem.tol):
            converged = True
            break
    return q, base, cost, it, converged


def _summed_error(problem: IkProblem, q, base) -> tuple[float, np.ndarray]:
    r, _, _, links = _residuals(problem, q, base)
    per = np.zeros(problem.hand.L)
    per[links] = np.linalg.norm(r, axis=1)
    return float(per.sum()), per


def solve_ik(problem: IkProblem, q_init=None, rng: np.random.Generator | None = None) -> IkSolution:
    """Solve with mid-range (or given) start, then random restarts while unconverged."""
    hand = problem.hand
    rng = rng if rng is not None else np.random.default_rng(problem.seed)
    lo, hi = hand.q_min, hand.q_max
    if q_init is not None:
        q_init = np.asarray(q_init, dtype=float)
        if q_init.shape != (hand.dof,) or np.any(q_init < lo) or np.any(q_init > hi):
            raise ValueError("q_init must be a joint vector within limits")
        start = q_init
    else:
        start = 0.5 * (lo + hi)
    best = None
    total_iters = 0
    for attempt in range(problem.restarts + 1):
        if attempt > 0:
            start = rng.uniform(lo, hi)
        q, base, cost, iters, conv = _solve_once(problem, start)
        total_iters += iters
        res, per = _summed_error(problem, q, base)
        cand = IkSolution(q, base, res, total_iters, conv, per_link=per)
        if best is None or res < best.residual:
            best = cand
        need_more = not conv or (problem.restart_above is not None and res > problem.restart_above)
        if not need_more or not hand.dof:
            break
    best.iterations = total_iters
    return best


def _solve_item(problem: IkProblem) -> IkSolution:
    try:
        return solve_ik(problem)
    except Exception as exc:  # per-item failures never abort a batch
        dof = problem.hand.dof
        return IkSolution(np.zeros(dof), np.eye(4), float("inf"), 0, False, error=f"{type(exc).__name__}: {exc}")


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("TROGRAPH_THREADS", "0")) or (os.cpu_count() or 1))
    except ValueError:
        return os.cpu_count() or 1


def batch_solve(problems: list[IkProblem], parallelism: int | None = None) -> list[IkSolution]:
    """Independent solves; each result depends only on its own problem and seed."""
    workers = min(parallelism or thread_cap(), thread_cap(), max(1, len(problems)))
    if workers <= 1:
        return [_solve_item(p) for p in problems]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_solve_item, problems))
