"""Synthetic hands, primitive objects and analytic grasp demonstrations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se3
from .kinematics import KinematicHand, forward_kinematics, load_hand, parse_urdf, save_hand
from .pointcloud import load_xyz, save_xyz

TEMPLATES = ("chain3", "two_finger", "three_finger")
FAMILIES = ("sphere", "box", "cylinder")
DEMO_TOLERANCE = 2e-3  # fingertip-to-surface distance, meters
MAX_LINK_ANGLE = 2.6  # radians


# -- hands -------------------------------------------------------------------


@dataclass(frozen=True)
class FingerSpec:
    direction: tuple[float, float]  # radial direction in the palm plane
    base_radius: float
    base_height: float
    lengths: tuple[float, float]
    limits: tuple[tuple[float, float], tuple[float, float]] = ((-0.8, 1.6), (0.0, 2.0))


def _fingers(template: str, scale: float) -> list[FingerSpec]:
    if template == "two_finger":
        dirs = [(1.0, 0.0), (-1.0, 0.0)]
    elif template == "three_finger":
        angles = np.deg2rad([0.0, 120.0, 240.0])
        dirs = [(float(np.cos(a)), float(np.sin(a))) for a in angles]
    else:
        raise ValueError(f"unknown hand template {template!r}")
    return [FingerSpec(d, 0.04 * scale, 0.01 * scale, (0.035 * scale, 0.03 * scale)) for d in dirs]


def _segment_cloud(length: float, width: float, n: int, rng, axis: int = 2) -> np.ndarray:
    pts = rng.uniform(-0.5 * width, 0.5 * width, size=(n, 3))
    pts[:, axis] = rng.uniform(0.0, length, size=n)
    return pts


def _box_cloud(half: np.ndarray, n: int, rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 3)) * half


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def generate_hand(template: str, scale: float = 1.0, seed: int = 0, n_points: int = 128) -> tuple[str, dict, dict]:
    """URDF text, per-link local clouds and hand config for a template hand."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown hand template {template!r}; choose from {TEMPLATES}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    name = f"{template}_s{scale:g}"
    links: list[str] = []
    joints: list[str] = []
    clouds: dict[str, np.ndarray] = {}
    fingertips: dict[str, list[float]] = {}

    if template == "chain3":
        seg = 0.05 * scale
        links = ["base", "link1", "link2"]
        clouds["base"] = _segment_cloud(seg, 0.01 * scale, n_points, rng, axis=0)
        clouds["link1"] = _segment_cloud(seg, 0.01 * scale, n_points, rng, axis=0)
        clouds["link2"] = _segment_cloud(seg, 0.01 * scale, n_points, rng, axis=0)
        lim = np.pi / 2
        for jn, (parent, child, x) in enumerate([("base", "link1", seg), ("link1", "link2", seg)]):
            joints.append(
                f'  <joint name="j{jn + 1}" type="revolute">\n'
                f'    <parent link="{parent}"/>\n    <child link="{child}"/>\n'
                f'    <origin xyz="{_fmt((x, 0, 0))}" rpy="0 0 0"/>\n'
                f'    <axis xyz="0 0 1"/>\n    <limit lower="{-lim!r}" upper="{lim!r}"/>\n  </joint>'
            )
        fingertips["link2"] = [seg, 0.0, 0.0]
        palm = "base"
    else:
        fingers = _fingers(template, scale)
        reach = fingers[0].base_radius + 0.01 * scale
        palm = "palm"
        links.append(palm)
        if template == "two_finger":
            clouds[palm] = _box_cloud(np.array([reach, 0.01 * scale, 0.01 * scale]), n_points, rng)
        else:
            r = np.sqrt(rng.uniform(size=n_points)) * reach
            a = rng.uniform(0, 2 * np.pi, size=n_points)
            clouds[palm] = np.stack([r * np.cos(a), r * np.sin(a), rng.uniform(-0.01, 0.01, n_points) * scale], axis=1)
        for k, f in enumerate(fingers):
            e = np.array([f.direction[0], f.direction[1], 0.0])
            axis = np.cross(e, [0.0, 0.0, 1.0])
            prox, dist = f"f{k}_proximal", f"f{k}_distal"
            links += [prox, dist]
            clouds[prox] = _segment_cloud(f.lengths[0], 0.015 * scale, n_points, rng)
            clouds[dist] = _segment_cloud(f.lengths[1], 0.012 * scale, n_points, rng)
            origin1 = (f.base_radius * e[0], f.base_radius * e[1], f.base_height)
            for jn, (parent, child, xyz, lim) in enumerate(
                [(palm, prox, origin1, f.limits[0]), (prox, dist, (0.0, 0.0, f.lengths[0]), f.limits[1])]
            ):
                joints.append(
                    f'  <joint name="f{k}_j{jn + 1}" type="revolute">\n'
                    f'    <parent link="{parent}"/>\n    <child link="{child}"/>\n'
                    f'    <origin xyz="{_fmt(xyz)}" rpy="0 0 0"/>\n'
                    f'    <axis xyz="{_fmt(axis)}"/>\n'
                    f'    <limit lower="{lim[0]!r}" upper="{lim[1]!r}"/>\n  </joint>'
                )
            fingertips[dist] = [0.0, 0.0, f.lengths[1]]

    body = "\n".join([f'  <link name="{ln}"/>' for ln in links] + joints)
    urdf = f'<?xml version="1.0"?>\n<robot name="{name}">\n{body}\n</robot>\n'
    config = {"palm_link": palm, "fingertips": fingertips, "palm_normal": [0.0, 0.0, 1.0], "template": template, "scale": scale}
    return urdf, clouds, config


def make_hand(template: str, scale: float = 1.0, seed: int = 0) -> KinematicHand:
    urdf, clouds, cfg = generate_hand(template, scale, seed)
    hand = parse_urdf(urdf).with_clouds(clouds)
    return hand.with_config(cfg["palm_link"], cfg["fingertips"], cfg["palm_normal"])


def fingertip_positions(hand: KinematicHand, q, base=None) -> np.ndarray:
    """Fingertip points (in the base's frame when ``base`` is given), one row per fingertip link."""
    T = forward_kinematics(hand, q)
    if base is not None:
        T = np.asarray(base) @ T
    rows = []
    for ln, tip in hand.fingertips.items():
        Ti = T[hand.link_index(ln)]
        rows.append(Ti[:3, :3] @ np.asarray(tip) + Ti[:3, 3])
    return np.array(rows)


# -- objects -----------------------------------------------------------------


@dataclass(frozen=True)
class PrimitiveObject:
    """Primitive centered at the origin. ``size`` is radius / half extents / (radius, half height)."""

    family: str
    size: tuple
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown object family {self.family!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError("object sizes must be positive")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if self.family == "sphere":
            return np.linalg.norm(p, axis=1) - self.size[0]
        if self.family == "box":
            q = np.abs(p) - np.asarray(self.size)
            return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
        r, h = self.size
        d = np.stack([np.linalg.norm(p[:, :2], axis=1) - r, np.abs(p[:, 2]) - h], axis=1)
        return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)

    def ray_distance(self, direction: np.ndarray) -> float:
        """Distance from the center to the surface along ``direction``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        lo, hi = 0.0, 1.0
        while self.sdf(hi * d)[0] < 0:
            hi *= 2.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.sdf(mid * d)[0] < 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def extent(self, direction: np.ndarray) -> float:
        """Support function: farthest surface point along ``direction``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        if self.family == "sphere":
            return self.size[0]
        if self.family == "box":
            return float(np.abs(d) @ np.asarray(self.size))
        r, h = self.size
        return float(r * np.linalg.norm(d[:2]) + h * abs(d[2]))

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.family == "sphere":
            v = rng.normal(size=(n, 3))
            return self.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        if self.family == "box":
            half = np.asarray(self.size)
            areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
            face_axis = rng.choice(3, size=n, p=areas / areas.sum())
            pts = rng.uniform(-1, 1, size=(n, 3)) * half
            sign = rng.choice([-1.0, 1.0], size=n)
            pts[np.arange(n), face_axis] = sign * half[face_axis]
            return pts
        r, h = self.size
        side, cap = 2 * np.pi * r * 2 * h, 2 * np.pi * r * r
        on_side = rng.uniform(size=n) < side / (side + cap)
        a = rng.uniform(0, 2 * np.pi, size=n)
        rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(on_side, rng.uniform(-h, h, size=n), rng.choice([-h, h], size=n))
        return np.stack([rad * np.cos(a), rad * np.sin(a), z], axis=1)

    def to_dict(self) -> dict:
        return {"family": self.family, "size": [float(s) for s in self.size], "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> PrimitiveObject:
        return cls(d["family"], tuple(float(s) for s in d["size"]), d.get("name", ""))


def random_object(family: str, rng: np.random.Generator, name: str = "") -> PrimitiveObject:
    if family == "sphere":
        size = (float(rng.uniform(0.02, 0.04)),)
    elif family == "box":
        size = tuple(float(s) for s in rng.uniform(0.015, 0.035, size=3))
    else:
        size = (float(rng.uniform(0.015, 0.03)), float(rng.uniform(0.02, 0.05)))
    return PrimitiveObject(family, size, name)


# -- grasps ------------------------------------------------------------------


def planar_two_link_ik(u: float, w: float, l1: float, l2: float):
    """Flexion angles putting the tip at inward offset ``u`` and height ``w``; None if unreachable."""
    d = (u * u + w * w - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if abs(d) > 1.0:
        return None
    q2 = float(np.arccos(d))
    q1 = float(np.arctan2(u, w) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2)))
    return q1, q2


@dataclass
class GraspDemo:
    hand: str
    object: PrimitiveObject
    q: np.ndarray
    base: np.ndarray  # hand base in the object frame
    tip_distance: float
    cloud_seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "hand": self.hand,
            "object": self.object.to_dict(),
            "q": self.q.tolist(),
            "base": self.base.tolist(),
            "tip_distance": self.tip_distance,
            "cloud_seed": self.cloud_seed,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GraspDemo:
        return cls(
            d["hand"], PrimitiveObject.from_dict(d["object"]), np.asarray(d["q"], dtype=float),
            np.asarray(d["base"], dtype=float), float(d["tip_distance"]), int(d.get("cloud_seed", 0)), d.get("meta", {}),
        )


def _finger_chain(hand: KinematicHand):
    """(proximal joint, distal joint, radial direction, base radius, base height, l1, l2) per finger."""
    out = []
    joints = hand.actuated_joints
    for k in range(0, len(joints), 2):
        j1, j2 = joints[k], joints[k + 1]
        xyz = np.asarray(j1.xyz)
        radius = float(np.linalg.norm(xyz[:2]))
        e = np.array([xyz[0], xyz[1], 0.0]) / radius
        tip = hand.fingertips[j2.child]
        out.append((k, k + 1, e, radius, float(xyz[2]), float(j2.xyz[2]), float(tip[2])))
    return out


def _orthonormal_frame(approach: np.ndarray, spin: float) -> np.ndarray:
    """Smallest rotation taking +z onto ``approach``, after a spin about z."""
    z = approach / np.linalg.norm(approach)
    axis = np.cross([0.0, 0.0, 1.0], z)
    s = np.linalg.norm(axis)
    angle = np.arctan2(s, z[2])
    if s < 1e-12:
        axis, s = np.array([1.0, 0.0, 0.0]), 1.0
    R0 = se3.so3_exp(axis / s * angle)
    return R0 @ se3.so3_exp(np.array([0.0, 0.0, spin]))


def grasp_closure(hand: KinematicHand, obj: PrimitiveObject, approach: np.ndarray, spin: float, clearance: float, elevation: float = 0.0):
    """Analytic pinch/tripod grasp: returns ``(q, base)`` or None if unreachable.

    Each fingertip touches the surface along the ray from the object center that
    leaves in the finger's radial direction, tilted by ``elevation`` toward the palm.
    """
    R = _orthonormal_frame(np.asarray(approach, dtype=float), spin)
    a = R[:, 2]
    z_c = obj.extent(-a) + clearance  # object center height above the palm
    q = np.zeros(hand.dof)
    ce, se = np.cos(elevation), np.sin(elevation)
    for j1, j2, e, radius, height, l1, l2 in _finger_chain(hand):
        rho = obj.ray_distance(R @ (ce * e - se * np.array([0.0, 0.0, 1.0])))
        sol = planar_two_link_ik(radius - rho * ce, z_c - rho * se - height, l1, l2)
        if sol is None:
            return None
        q[j1], q[j2] = sol
    if np.any(q < hand.q_min) or np.any(q > hand.q_max):
        return None
    base = se3.make_transform(R, -z_c * a)
    return q, base


def tip_surface_distance(hand: KinematicHand, obj: PrimitiveObject, q, base) -> np.ndarray:
    return np.abs(obj.sdf(fingertip_positions(hand, q, base)))


def _cone_direction(rng: np.random.Generator, cone: float) -> np.ndarray:
    """Uniform direction within ``cone`` radians of +z."""
    c = rng.uniform(np.cos(cone), 1.0)
    phi = rng.uniform(0.0, 2 * np.pi)
    s = np.sqrt(max(0.0, 1.0 - c * c))
    return np.array([s * np.cos(phi), s * np.sin(phi), c])


def generate_demos(
    hand: KinematicHand,
    obj: PrimitiveObject,
    n: int,
    seed: int = 0,
    max_tries: int = 200,
    cone_deg: float = 30.0,
    spin_deg: float = 30.0,
    max_link_angle: float = MAX_LINK_ANGLE,
) -> tuple[list[GraspDemo], int]:
    """``n`` verified analytic grasps; returns ``(demos, skipped_attempts)``.

    The palm approaches along a direction within ``cone_deg`` of the object's
    +z axis with a spin of at most ``spin_deg``; 180/180 gives unrestricted
    approaches. Grasps with a link rotated by more than ``max_link_angle``
    are rejected to keep pose coordinates away from the angle-pi cut.
    """
    if hand.dof == 0 or not hand.fingertips or len(hand.fingertips) < 2:
        raise ValueError("demo generation needs a multi-finger hand with fingertips configured")
    rng = np.random.default_rng(seed)
    demos: list[GraspDemo] = []
    skipped = 0
    tries = 0
    while len(demos) < n and tries < max_tries * n:
        tries += 1
        approach = _cone_direction(rng, np.deg2rad(cone_deg))
        spin = float(rng.uniform(-1.0, 1.0) * np.deg2rad(spin_deg))
        clearance = float(rng.uniform(0.005, 0.02)) * _hand_scale(hand)
        elevation = float(rng.uniform(-0.7, 0.3))
        sol = grasp_closure(hand, obj, approach, spin, clearance, elevation)
        if sol is None:
            skipped += 1
            continue
        q, base = sol
        d = tip_surface_distance(hand, obj, q, base)
        T = base @ forward_kinematics(hand, q)
        if float(d.max()) >= DEMO_TOLERANCE or np.any(se3.rotation_angle(T[:, :3, :3]) > max_link_angle):
            skipped += 1
            continue
        demos.append(GraspDemo(hand.name, obj, q, base, float(d.max()), cloud_seed=int(rng.integers(2**31))))
    return demos, skipped


def _hand_scale(hand: KinematicHand) -> float:
    joints = hand.actuated_joints
    return float(np.linalg.norm(joints[0].xyz[:2]) / 0.04) if joints else 1.0


# -- dataset directories -----------------------------------------------------


@dataclass
class Dataset:
    root: Path
    hands: dict
    objects: dict  # name -> (PrimitiveObject | None, cloud)
    demos: list


def write_dataset(root, hand: KinematicHand, objects: list[PrimitiveObject], demos: list[GraspDemo], n_points: int = 512) -> Path:
    root = Path(root)
    save_hand(hand, root / "hands" / hand.name)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    (root / "demos").mkdir(parents=True, exist_ok=True)
    for obj in objects:
        save_xyz(root / "objects" / f"{obj.name}.xyz", obj.sample_surface(n_points, seed=0))
        (root / "objects" / f"{obj.name}.json").write_text(json.dumps(obj.to_dict()) + "\n")
    for i, demo in enumerate(demos):
        (root / "demos" / f"{i:05d}.json").write_text(json.dumps(demo.to_dict()) + "\n")
    return root


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "hands").is_dir() or not (root / "demos").is_dir():
        raise FileNotFoundError(f"{root} is not a dataset directory (needs hands/ and demos/)")
    hands = {p.name: load_hand(p) for p in sorted((root / "hands").iterdir()) if p.is_dir()}
    objects = {}
    for p in sorted((root / "objects").glob("*.xyz")):
        meta = p.with_suffix(".json")
        prim = PrimitiveObject.from_dict(json.loads(meta.read_text())) if meta.exists() else None
        objects[p.stem] = (prim, load_xyz(p))
    demos = [GraspDemo.from_dict(json.loads(p.read_text())) for p in sorted((root / "demos").glob("*.json"))]
    return Dataset(root, hands, objects, demos)


def synthetic_task(template: str = "two_finger", n_objects: int = 16, demos_per_object: int = 1, seed: int = 0, scale: float = 1.0):
    """Hand, objects (cycling through the families) and one analytic demo set."""
    hand = make_hand(template, scale, seed)
    rng = np.random.default_rng(seed)
    objects, demos = [], []
    for i in range(n_objects):
        family = FAMILIES[i % len(FAMILIES)]
        for _ in range(50):
            obj = random_object(family, rng, name=f"obj{i:03d}_{family}")
            found, _ = generate_demos(hand, obj, demos_per_object, seed=int(rng.integers(2**31)))
            if len(found) == demos_per_object:
                objects.append(obj)
                demos.extend(found)
                break
    return hand, objects, demos
