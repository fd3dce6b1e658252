"""Noise schedules, forward noising, DDIM reverse sampling and gradient guidance.

Noise lives directly in the Lie-algebra coordinates of the link poses; after
every reverse step the graph edges are rebuilt from the new poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import se3
from .trograph import TroGraph
from .pointcloud import as_cloud, estimate_normal

Denoiser = Callable[[TroGraph, int], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule. ``beta[t - 1]`` is beta_t; ``abar(0) == 1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    ddim_steps: np.ndarray
    lam: float = 0.2

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])

    @property
    def M(self) -> int:
        return len(self.ddim_steps)

    def with_lambda(self, lam: float) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta, self.alpha, self.alpha_bar, self.ddim_steps, float(lam))


def ddim_grid(T: int, M: int) -> np.ndarray:
    """``M`` evenly spaced steps in ``[1, T]`` ending at ``T``."""
    if not 1 <= M <= T:
        raise ValueError(f"need 1 <= M <= T, got M={M}, T={T}")
    steps = np.unique(np.round(np.arange(1, M + 1) * T / M).astype(int))
    return steps


def linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02, M: int = 20, lam: float = 0.2) -> DiffusionSchedule:
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if T < 2:
        raise ValueError("T must be at least 2")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T, beta, alpha, alpha_bar, ddim_grid(T, M), float(lam))


def snap_to_grid(t: int, schedule: DiffusionSchedule) -> int:
    """Nearest DDIM grid step (the lower one on ties)."""
    grid = schedule.ddim_steps
    return int(grid[np.argmin(np.abs(grid - t))])


def forward_noise(psi0: np.ndarray, t: int, schedule: DiffusionSchedule, rng: np.random.Generator | None = None, mask: np.ndarray | None = None, eps: np.ndarray | None = None):
    """Sample ``psi_t = sqrt(abar_t) psi_0 + sqrt(1 - abar_t) eps``; returns ``(psi_t, eps)``.

    Masked rows stay zero. Pass ``eps`` to inject a fixed noise draw.
    """
    psi0 = np.asarray(psi0, dtype=float)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    if eps is None:
        eps = rng.standard_normal(psi0.shape)
    eps = np.array(eps, dtype=float)
    if mask is not None:
        eps = np.where(np.asarray(mask)[..., None], eps, 0.0)
    ab = schedule.abar(t)
    psi_t = np.sqrt(ab) * psi0 + np.sqrt(1.0 - ab) * eps
    return psi_t, eps


def forward_step(psi_prev: np.ndarray, t: int, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """One Markov noising step ``q(psi_t | psi_{t-1})``."""
    b = float(schedule.beta[t - 1])
    return np.sqrt(1.0 - b) * psi_prev + np.sqrt(b) * rng.standard_normal(np.shape(psi_prev))


def renoise_graph(g0: TroGraph, t: int, schedule: DiffusionSchedule, rng: np.random.Generator, return_noise: bool = False):
    psi_t, eps = forward_noise(g0.poses, t, schedule, rng, mask=g0.mask)
    g = g0.with_link_poses(psi_t)
    return (g, eps) if return_noise else g


def noise_graph(template: TroGraph, rng: np.random.Generator) -> TroGraph:
    """Start state for unconditioned sampling: link poses ~ N(0, I)."""
    return template.with_link_poses(rng.standard_normal(template.poses.shape))


def ddim_sigma(t: int, t_prev: int, schedule: DiffusionSchedule) -> float:
    a_t = schedule.abar(t)
    a_p = schedule.abar(t_prev)
    return float(np.sqrt((1.0 - a_p) / (1.0 - a_t)) * np.sqrt(max(0.0, 1.0 - a_t / a_p)))


def guidance_strength(step_index: int, M: int, g_s: float = 0.5) -> float:
    """``g_s * sin(i pi / 2M)``: weak early, strongest on the last step."""
    return float(g_s * np.sin(step_index * np.pi / (2.0 * M)))


@dataclass
class GuidanceSpec:
    """Pose or contact guidance.

    ``palm_index`` is the row of the palm link in the pose array. Contact
    guidance uses ``contact_points`` (K x 3), non-negative ``heat`` (K) and
    the target palm rotation ``r_cont``.
    """

    kind: str = "none"
    palm_index: int | None = None
    r_init: np.ndarray | None = None
    t_star: int | None = None
    strength: float = 0.5
    contact_points: np.ndarray | None = None
    heat: np.ndarray | None = None
    r_cont: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "pose", "contact"):
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("guidance strength must be non-negative")
        if self.kind == "pose" and self.r_init is None:
            raise ValueError("pose guidance needs r_init")
        if self.kind == "contact":
            if self.contact_points is None or self.heat is None or self.r_cont is None:
                raise ValueError("contact guidance needs points, heat and r_cont")
            self.contact_points = as_cloud(self.contact_points)
            self.heat = np.asarray(self.heat, dtype=float)
            if self.heat.shape != (self.contact_points.shape[0],):
                raise ValueError("heat must have one value per contact point")
            if np.any(self.heat < 0) or not np.any(self.heat > 0):
                raise ValueError("heat must be non-negative with at least one positive value")

    @property
    def active(self) -> bool:
        return self.kind != "none"


def geodesic_loss(psi: np.ndarray, palm_index: int, r_ref: np.ndarray) -> tuple[float, np.ndarray]:
    """Geodesic palm-rotation error and its gradient w.r.t. all pose coordinates."""
    grad = np.zeros_like(psi)
    val, g = se3.geodesic_so3_grad(psi[palm_index, 3:], r_ref)
    grad[palm_index, 3:] = g
    return val, grad


def link_centers_world(psi: np.ndarray, local_centers: np.ndarray) -> np.ndarray:
    T = se3.exp_map(psi)
    return np.einsum("lij,lj->li", T[:, :3, :3], local_centers) + T[:, :3, 3]


def distance_loss(psi: np.ndarray, mask: np.ndarray, local_centers: np.ndarray, points: np.ndarray, heat: np.ndarray) -> tuple[float, np.ndarray]:
    """Heat-weighted squared distance from contact points to their nearest link center."""
    real = np.flatnonzero(mask)
    centers = link_centers_world(psi[real], local_centers[real])
    diff = points[:, None, :] - centers[None, :, :]
    d2 = np.einsum("knc,knc->kn", diff, diff)
    nearest = np.argmin(d2, axis=1)
    w = heat / heat.sum()
    val = float(np.sum(w * d2[np.arange(len(points)), nearest]))

    # d loss / d center_j, then chain through the left Jacobian of exp
    g_center = np.zeros_like(centers)
    np.add.at(g_center, nearest, 2.0 * w[:, None] * (centers[nearest] - points))
    grad = np.zeros_like(psi)
    Jl = se3.se3_left_jacobian(psi[real])
    for n, row in enumerate(real):
        if not np.any(g_center[n]):
            continue
        dp = np.hstack([np.eye(3), -se3.skew(centers[n])]) @ Jl[n]
        grad[row] = g_center[n] @ dp
    return val, grad


def contact_loss(psi, mask, local_centers, guidance: GuidanceSpec) -> tuple[float, np.ndarray]:
    v1, g1 = geodesic_loss(psi, guidance.palm_index, guidance.r_cont)
    v2, g2 = distance_loss(psi, mask, local_centers, guidance.contact_points, guidance.heat)
    return v1 + v2, g1 + g2


def apply_guidance(psi0_hat: np.ndarray, step_index: int, guidance: GuidanceSpec, schedule: DiffusionSchedule, mask=None, local_centers=None) -> np.ndarray:
    """One gradient step on the clean-pose estimate, ``psi <- psi - s(t) grad``."""
    if not guidance.active:
        return psi0_hat
    if guidance.palm_index is None:
        raise ValueError("guidance requires the hand's palm_link to be configured")
    s = guidance_strength(step_index, schedule.M, guidance.strength)
    if guidance.kind == "pose":
        _, grad = geodesic_loss(psi0_hat, guidance.palm_index, guidance.r_init)
    else:
        _, grad = contact_loss(psi0_hat, mask, local_centers, guidance)
    out = psi0_hat - s * grad
    if mask is not None:
        out = np.where(np.asarray(mask)[:, None], out, 0.0)
    return out


@dataclass
class SamplerStats:
    steps: int = 0
    clamped: int = 0
    timesteps: list = field(default_factory=list)


def ddim_step(g_t: TroGraph, t: int, t_prev: int, eps_pred: np.ndarray, schedule: DiffusionSchedule, rng: np.random.Generator | None = None, guidance: GuidanceSpec | None = None, step_index: int | None = None, stats: SamplerStats | None = None) -> TroGraph:
    """DDIM transition ``t -> t_prev`` followed by an edge rebuild."""
    eps_pred = np.asarray(eps_pred, dtype=float)
    if not np.all(np.isfinite(eps_pred)):
        raise FloatingPointError("denoiser produced non-finite noise")
    mask = g_t.mask
    psi_t = g_t.poses
    a_t = schedule.abar(t)
    a_p = schedule.abar(t_prev)
    psi0_hat = (psi_t - np.sqrt(1.0 - a_t) * eps_pred) / np.sqrt(a_t)
    if guidance is not None and guidance.active:
        if step_index is None:
            step_index = schedule.M - int(np.searchsorted(schedule.ddim_steps, t))
        psi0_hat = apply_guidance(psi0_hat, step_index, guidance, schedule, mask, g_t.link_nodes.centers)
        eps_pred = (psi_t - np.sqrt(a_t) * psi0_hat) / np.sqrt(1.0 - a_t)
    sigma = ddim_sigma(t, t_prev, schedule)
    radicand = 1.0 - a_p - sigma**2
    if radicand < 0.0:
        radicand = 0.0
        if stats is not None:
            stats.clamped += 1
    psi = np.sqrt(a_p) * psi0_hat + np.sqrt(radicand) * eps_pred
    if schedule.lam != 0.0 and sigma > 0.0:
        psi = psi + schedule.lam * sigma * rng.standard_normal(psi.shape)
    psi = np.where(mask[:, None], psi, 0.0)
    if stats is not None:
        stats.steps += 1
        stats.timesteps.append(t)
    return g_t.with_link_poses(psi)


def sample(graph_init: TroGraph, schedule: DiffusionSchedule, denoiser: Denoiser, guidance: GuidanceSpec | None = None, rng: np.random.Generator | None = None, t_start: int | None = None, stats: SamplerStats | None = None) -> TroGraph:
    """Run the DDIM chain from ``t_start`` (default ``T``, or ``guidance.t_star``) to 0.

    ``graph_init`` must already hold the start state: Gaussian poses for an
    unconditioned run, or an initial hand status renoised to ``t_start``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if t_start is None:
        t_start = guidance.t_star if guidance is not None and guidance.t_star else schedule.T
    grid = schedule.ddim_steps
    if t_start not in grid:
        raise ValueError(f"start step {t_start} is not on the DDIM grid")
    steps = grid[grid <= t_start][::-1]
    g = graph_init
    M = schedule.M
    for n, t in enumerate(steps):
        t = int(t)
        t_prev = int(steps[n + 1]) if n + 1 < len(steps) else 0
        eps = denoiser(g, t)
        step_index = M - int(np.searchsorted(grid, t))
        g = ddim_step(g, t, t_prev, eps, schedule, rng, guidance, step_index, stats)
    return g


def rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
        return se3.so3_exp(np.pi * perp)
    K = se3.skew(v)
    return np.eye(3) + K + K @ K / (1.0 + c)


def contact_guidance(points, center_index: int, k: int, palm_index: int, palm_normal=(0.0, 0.0, 1.0), sigma: float | None = None, strength: float = 0.5, t_star: int | None = None) -> GuidanceSpec:
    """Contact region of the ``k`` points nearest ``points[center_index]`` with Gaussian heat.

    ``r_cont`` turns the palm normal against the estimated outward surface normal.
    """
    pts = as_cloud(points)
    center = pts[center_index]
    d = np.linalg.norm(pts - center, axis=1)
    idx = np.argsort(d, kind="stable")[:k]
    region = pts[idx]
    if sigma is None:
        sigma = max(float(d[idx].max()) / 2.0, 1e-9)
    heat = np.exp(-0.5 * (d[idx] / sigma) ** 2)
    n = estimate_normal(pts, center)
    r_cont = rotation_aligning(np.asarray(palm_normal, dtype=float), -n)
    return GuidanceSpec("contact", palm_index, t_star=t_star, strength=strength, contact_points=region, heat=heat, r_cont=r_cont)
