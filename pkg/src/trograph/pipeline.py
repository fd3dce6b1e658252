"""Glue between data, graphs, sampling and IK used by the CLI and the harness."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import se3
from .denoiser import DenoiserConfig, TrainConfig
from .diffusion import DiffusionSchedule, GuidanceSpec, noise_graph, renoise_graph, sample, snap_to_grid
from .iksolver import IkProblem, IkSolution, solve_ik
from .kinematics import KinematicHand
from .pointcloud import ObjectNodeSet, encode_object
from .synthdata import GraspDemo, tip_surface_distance
from .trograph import LinkGeometry, TroGraph, graph_from_grasp, link_geometry, rescale_graph


@dataclass
class ToyTask:
    hand: KinematicHand
    objects: list
    demos: list
    graphs: list
    geometry: LinkGeometry


def demo_graph(hand: KinematicHand, demo: GraspDemo, P: int, L_pad: int, geometry: LinkGeometry | None = None, n_points: int = 512, cloud=None) -> TroGraph:
    """Object-frame graph of a demo; the cloud is resampled from the primitive unless given."""
    if cloud is None:
        cloud = demo.object.sample_surface(n_points, seed=demo.cloud_seed)
    nodes = encode_object(cloud, P, seed=0)
    return graph_from_grasp(nodes, hand, demo.q, demo.base, L_pad, geometry)


def toy_model_config(seed: int = 0) -> DenoiserConfig:
    """Model used for the 16-demo overfitting task; fits in a few minutes on one CPU."""
    return DenoiserConfig(d=64, n_layers=4, seed=seed, length_unit=0.05)


def toy_train_config(seed: int = 0, steps: int = 2000) -> TrainConfig:
    """Full-batch steps, so one epoch is one step and the decay period counts steps."""
    return TrainConfig(epochs=steps, batch_size=16, lr=1e-3, lr_decay=0.8, lr_decay_every=100, seed=seed, max_steps=steps)


def toy_tip_distances(model, task: ToyTask, schedule: DiffusionSchedule, seed: int = 0) -> np.ndarray:
    """Worst fingertip-to-surface distance per demo object after sampling and IK, shape (n_demos,)."""
    out = []
    for i, (demo, g0) in enumerate(zip(task.demos, task.graphs)):
        g = sample_grasp(g0, schedule, model, np.random.default_rng([seed, i]))
        sol = solve_graph_ik(task.hand, g, seed=seed + i)
        out.append(float(tip_surface_distance(task.hand, demo.object, sol.q, sol.base).max()))
    return np.array(out)


def build_toy_task(hand, objects, demos, P: int = 8, L_pad: int = 8, n_points: int = 512) -> ToyTask:
    geometry = link_geometry(hand, L_pad)
    graphs = [demo_graph(hand, d, P, L_pad, geometry, n_points) for d in demos]
    return ToyTask(hand, list(objects), list(demos), graphs, geometry)


def palm_rotation(poses: np.ndarray, palm_index: int) -> np.ndarray:
    return se3.so3_exp(np.asarray(poses)[palm_index, 3:])


def pose_guidance(hand: KinematicHand, r_init: np.ndarray, schedule: DiffusionSchedule, t_star: int | None = None, strength: float = 0.5) -> GuidanceSpec:
    if hand.palm_link is None:
        raise ValueError("pose guidance needs palm_link in the hand config")
    t = snap_to_grid(t_star, schedule) if t_star is not None else None
    return GuidanceSpec("pose", hand.palm_index, r_init=np.asarray(r_init, dtype=float), t_star=t, strength=strength)


def solve_graph_ik(hand: KinematicHand, graph: TroGraph, seed: int = 0, **kwargs) -> IkSolution:
    return solve_ik(IkProblem(hand, graph.link_transforms(), seed=seed, **kwargs))


def grasp_record(hand: KinematicHand, graph: TroGraph, solution: IkSolution, obj=None) -> dict:
    rec = {
        "link_poses": graph.poses[graph.mask].tolist(),
        "q": solution.q.tolist(),
        "base": solution.base.tolist(),
        "ik_residual": solution.residual,
        "converged": bool(solution.converged),
    }
    if obj is not None and hand.fingertips:
        rec["fingertip_distance"] = tip_surface_distance(hand, obj, solution.q, solution.base).tolist()
    return rec


def length_unit(denoiser) -> float:
    """Meters per model unit; callables without the attribute (the oracle) work in meters."""
    return float(getattr(denoiser, "length_unit", 1.0))


def sample_grasp(template: TroGraph, schedule: DiffusionSchedule, denoiser, rng: np.random.Generator, guidance: GuidanceSpec | None = None, init: TroGraph | None = None) -> TroGraph:
    """Unconditioned draw from noise, or a conditioned run from ``init`` renoised to ``t_star``.

    Graphs go in and come out in meters; the chain itself runs in the
    denoiser's length unit.
    """
    k = 1.0 / length_unit(denoiser)
    if guidance is not None and guidance.kind == "contact" and k != 1.0:
        guidance = replace(guidance, contact_points=guidance.contact_points * k)
    if guidance is not None and guidance.t_star is not None and init is not None:
        start = renoise_graph(rescale_graph(init, k), guidance.t_star, schedule, rng)
        out = sample(start, schedule, denoiser, guidance, rng, t_start=guidance.t_star)
    else:
        out = sample(noise_graph(rescale_graph(template, k), rng), schedule, denoiser, guidance, rng, t_start=schedule.T)
    return rescale_graph(out, 1.0 / k)


def object_nodes_from_cloud(cloud: np.ndarray, P: int, seed: int = 0) -> ObjectNodeSet:
    return encode_object(cloud, P, seed=seed)
