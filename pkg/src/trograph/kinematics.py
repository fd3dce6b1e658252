"""URDF hand descriptions, forward kinematics and embodiment similarity."""

from __future__ import annotations

import json
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se3
from .pointcloud import load_xyz, save_xyz

JOINT_TYPES = ("revolute", "prismatic", "fixed")


class URDFParseError(ValueError):
    pass


class URDFStructureError(ValueError):
    pass


class URDFValidationError(ValueError):
    pass


class JointLimitWarning(UserWarning):
    pass


def rpy_to_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll/pitch/yaw, i.e. ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    r, p, y = (float(v) for v in rpy)
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class Joint:
    name: str
    type: str
    parent: str
    child: str
    xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rpy: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    lower: float = 0.0
    upper: float = 0.0

    @property
    def origin(self) -> np.ndarray:
        return se3.make_transform(rpy_to_matrix(self.rpy), self.xyz)

    @property
    def actuated(self) -> bool:
        return self.type != "fixed"


@dataclass(frozen=True)
class Link:
    name: str
    parent_joint: int | None  # index into KinematicHand.joints


@dataclass(frozen=True, eq=False)
class KinematicHand:
    """Parsed hand tree. Immutable after construction.

    ``clouds`` maps link names to local-frame point clouds; ``palm_link``,
    ``fingertips`` (link name -> tip point in that link's frame) and
    ``palm_normal`` come from the optional hand config.
    """

    name: str
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    root_link: int
    clouds: dict = field(default_factory=dict)
    palm_link: str | None = None
    fingertips: dict = field(default_factory=dict)
    palm_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        index = {lk.name: i for i, lk in enumerate(self.links)}
        order = [self.root_link]
        children: dict[int, list[int]] = {i: [] for i in range(len(self.links))}
        for j in self.joints:
            children[index[j.parent]].append(index[j.child])
        k = 0
        while k < len(order):
            order.extend(children[order[k]])
            k += 1
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_order", tuple(order))
        act = tuple(i for i, j in enumerate(self.joints) if j.actuated)
        object.__setattr__(self, "_actuated", act)

    # equality is field-wise, with clouds compared by value
    def __eq__(self, other):
        if not isinstance(other, KinematicHand):
            return NotImplemented
        same = (
            self.name == other.name
            and self.links == other.links
            and self.joints == other.joints
            and self.root_link == other.root_link
            and self.palm_link == other.palm_link
            and tuple(self.palm_normal) == tuple(other.palm_normal)
            and self.clouds.keys() == other.clouds.keys()
            and self.fingertips.keys() == other.fingertips.keys()
        )
        if not same:
            return False
        return all(np.array_equal(self.clouds[k], other.clouds[k]) for k in self.clouds) and all(
            np.array_equal(self.fingertips[k], other.fingertips[k]) for k in self.fingertips
        )

    __hash__ = None

    @property
    def L(self) -> int:
        return len(self.links)

    @property
    def dof(self) -> int:
        return len(self._actuated)

    @property
    def link_names(self) -> list[str]:
        return [lk.name for lk in self.links]

    @property
    def actuated_joints(self) -> list[Joint]:
        return [self.joints[i] for i in self._actuated]

    @property
    def q_min(self) -> np.ndarray:
        return np.array([j.lower for j in self.actuated_joints])

    @property
    def q_max(self) -> np.ndarray:
        return np.array([j.upper for j in self.actuated_joints])

    def link_index(self, name: str) -> int:
        return self._index[name]

    @property
    def palm_index(self) -> int:
        if self.palm_link is None:
            raise ValueError(f"hand {self.name!r} has no palm_link configured")
        return self._index[self.palm_link]

    def with_clouds(self, clouds: dict) -> KinematicHand:
        return KinematicHand(
            self.name, self.links, self.joints, self.root_link, dict(clouds),
            self.palm_link, dict(self.fingertips), self.palm_normal,
        )

    def with_config(self, palm_link=None, fingertips=None, palm_normal=None) -> KinematicHand:
        return KinematicHand(
            self.name, self.links, self.joints, self.root_link, dict(self.clouds),
            palm_link if palm_link is not None else self.palm_link,
            {k: np.asarray(v, dtype=float) for k, v in (fingertips or self.fingertips).items()},
            tuple(palm_normal) if palm_normal is not None else self.palm_normal,
        )

    def depth(self) -> int:
        """Number of links on the longest root-to-leaf path."""
        depth = {self.root_link: 1}
        for i in self._order[1:]:
            parent = self._index[self.joints[self.links[i].parent_joint].parent]
            depth[i] = depth[parent] + 1
        return max(depth.values())


def _floats(text: str | None, n: int, default, what: str) -> tuple:
    if text is None:
        return tuple(default)
    try:
        vals = tuple(float(v) for v in text.split())
    except ValueError as exc:
        raise URDFValidationError(f"bad numeric {what}: {text!r}") from exc
    if len(vals) != n:
        raise URDFValidationError(f"{what} needs {n} values, got {text!r}")
    return vals


def parse_urdf(document: str, name: str | None = None) -> KinematicHand:
    """Parse the supported URDF subset into a :class:`KinematicHand`."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position
        raise URDFParseError(f"malformed XML at line {line}, column {col}: {exc}") from exc
    if root.tag != "robot":
        raise URDFParseError(f"root element must be <robot>, got <{root.tag}>")

    link_names = []
    for el in root.findall("link"):
        ln = el.get("name")
        if not ln:
            raise URDFValidationError("link without name")
        if ln in link_names:
            raise URDFStructureError(f"duplicate link {ln!r}")
        link_names.append(ln)
    if not link_names:
        raise URDFStructureError("URDF has no links")

    joints = []
    for el in root.findall("joint"):
        jname = el.get("name") or f"joint{len(joints)}"
        jtype = el.get("type")
        if jtype not in JOINT_TYPES:
            raise URDFValidationError(f"joint {jname!r}: unsupported type {jtype!r}")
        parent = el.find("parent")
        child = el.find("child")
        if parent is None or child is None:
            raise URDFValidationError(f"joint {jname!r} needs parent and child")
        p, c = parent.get("link"), child.get("link")
        for ln in (p, c):
            if ln not in link_names:
                raise URDFStructureError(f"joint {jname!r} references unknown link {ln!r}")
        origin = el.find("origin")
        xyz = _floats(origin.get("xyz") if origin is not None else None, 3, (0, 0, 0), "origin xyz")
        rpy = _floats(origin.get("rpy") if origin is not None else None, 3, (0, 0, 0), "origin rpy")
        ax = el.find("axis")
        axis = _floats(ax.get("xyz") if ax is not None else None, 3, (1, 0, 0), "axis")
        lower = upper = 0.0
        if jtype != "fixed":
            lim = el.find("limit")
            if lim is None or lim.get("lower") is None or lim.get("upper") is None:
                raise URDFValidationError(f"actuated joint {jname!r} is missing limits")
            lower = _floats(lim.get("lower"), 1, (0,), "limit lower")[0]
            upper = _floats(lim.get("upper"), 1, (0,), "limit upper")[0]
            if lower > upper:
                raise URDFValidationError(f"joint {jname!r}: lower limit {lower} > upper {upper}")
            n = float(np.linalg.norm(axis))
            if n == 0.0:
                raise URDFValidationError(f"joint {jname!r} has a zero axis")
            if abs(n - 1.0) > 1e-9:
                axis = tuple(float(a) / n for a in axis)
        joints.append(Joint(jname, jtype, p, c, xyz, rpy, axis, lower, upper))

    parent_of: dict[str, int] = {}
    for i, j in enumerate(joints):
        if j.child in parent_of:
            raise URDFStructureError(f"link {j.child!r} has more than one parent joint")
        parent_of[j.child] = i
    roots = [ln for ln in link_names if ln not in parent_of]
    if len(roots) != 1:
        raise URDFStructureError(f"expected exactly one root link, found {roots}")
    # every link must be reachable from the root (rules out cycles)
    seen = {roots[0]}
    frontier = [roots[0]]
    while frontier:
        cur = frontier.pop()
        for j in joints:
            if j.parent == cur and j.child not in seen:
                seen.add(j.child)
                frontier.append(j.child)
    if len(seen) != len(link_names):
        raise URDFStructureError(f"joint graph is not a tree; unreachable links {sorted(set(link_names) - seen)}")

    links = tuple(Link(ln, parent_of.get(ln)) for ln in link_names)
    return KinematicHand(
        name=name or root.get("name") or "hand",
        links=links,
        joints=tuple(joints),
        root_link=link_names.index(roots[0]),
    )


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def to_urdf(hand: KinematicHand) -> str:
    robot = ET.Element("robot", name=hand.name)
    for lk in hand.links:
        ET.SubElement(robot, "link", name=lk.name)
    for j in hand.joints:
        el = ET.SubElement(robot, "joint", name=j.name, type=j.type)
        ET.SubElement(el, "parent", link=j.parent)
        ET.SubElement(el, "child", link=j.child)
        ET.SubElement(el, "origin", xyz=_fmt(j.xyz), rpy=_fmt(j.rpy))
        ET.SubElement(el, "axis", xyz=_fmt(j.axis))
        if j.actuated:
            ET.SubElement(el, "limit", lower=repr(float(j.lower)), upper=repr(float(j.upper)))
    ET.indent(robot)
    return ET.tostring(robot, encoding="unicode") + "\n"


def load_hand(directory) -> KinematicHand:
    """Load ``hand.urdf``, ``links/<link>.xyz`` and optional ``hand.json``."""
    directory = Path(directory)
    urdf = directory / "hand.urdf"
    hand = parse_urdf(urdf.read_text(), name=directory.name)
    clouds = {}
    for ln in hand.link_names:
        path = directory / "links" / f"{ln}.xyz"
        if path.exists():
            clouds[ln] = load_xyz(path)
    hand = hand.with_clouds(clouds)
    cfg_path = directory / "hand.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        palm = cfg.get("palm_link")
        if palm is not None and palm not in hand.link_names:
            raise URDFValidationError(f"palm_link {palm!r} is not a link of {hand.name!r}")
        hand = hand.with_config(palm, cfg.get("fingertips", {}), cfg.get("palm_normal"))
    return hand


def save_hand(hand: KinematicHand, directory) -> Path:
    directory = Path(directory)
    (directory / "links").mkdir(parents=True, exist_ok=True)
    (directory / "hand.urdf").write_text(to_urdf(hand))
    for ln, pts in hand.clouds.items():
        save_xyz(directory / "links" / f"{ln}.xyz", pts)
    cfg = {
        "schema_version": 1,
        "palm_link": hand.palm_link,
        "fingertips": {k: [float(x) for x in v] for k, v in hand.fingertips.items()},
        "palm_normal": [float(x) for x in hand.palm_normal],
    }
    (directory / "hand.json").write_text(json.dumps(cfg, indent=2) + "\n")
    return directory


def _check_q(hand: KinematicHand, q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != hand.dof:
        raise ValueError(f"expected {hand.dof} joint values, got {q.shape[0]}")
    if np.any(q < hand.q_min - 1e-12) or np.any(q > hand.q_max + 1e-12):
        warnings.warn("joint vector outside limits", JointLimitWarning, stacklevel=3)
    return q


def _joint_motion(joint: Joint, value: float) -> np.ndarray:
    axis = np.asarray(joint.axis)
    if joint.type == "revolute":
        return se3.make_transform(se3.so3_exp(axis * value))
    if joint.type == "prismatic":
        return se3.make_transform(translation=axis * value)
    return np.eye(4)


def _fk_frames(hand: KinematicHand, q: np.ndarray):
    """Link poses plus the pre-motion frame of every joint."""
    values = np.zeros(len(hand.joints))
    values[list(hand._actuated)] = q
    poses = [None] * hand.L
    joint_frames = [None] * len(hand.joints)
    poses[hand.root_link] = np.eye(4)
    for i in hand._order[1:]:
        ji = hand.links[i].parent_joint
        j = hand.joints[ji]
        frame = poses[hand._index[j.parent]] @ j.origin
        joint_frames[ji] = frame
        poses[i] = frame @ _joint_motion(j, values[ji])
    return poses, joint_frames


def forward_kinematics(hand: KinematicHand, q) -> np.ndarray:
    """Per-link 4x4 poses in the hand base (root link) frame, shape (L, 4, 4)."""
    q = _check_q(hand, q)
    poses, _ = _fk_frames(hand, q)
    return np.stack(poses)


def fk_jacobian(hand: KinematicHand, q) -> np.ndarray:
    """Geometric Jacobians, shape (L, 6, dof).

    Rows 0-2 are the linear velocity of the link origin, rows 3-5 the angular
    velocity, both in the base frame.
    """
    q = _check_q(hand, q)
    poses, frames = _fk_frames(hand, q)
    col = {ji: k for k, ji in enumerate(hand._actuated)}
    J = np.zeros((hand.L, 6, hand.dof))
    for i in range(hand.L):
        p_i = poses[i][:3, 3]
        link = i
        while hand.links[link].parent_joint is not None:
            ji = hand.links[link].parent_joint
            j = hand.joints[ji]
            if j.actuated:
                a = frames[ji][:3, :3] @ np.asarray(j.axis)
                k = col[ji]
                if j.type == "revolute":
                    J[i, :3, k] = np.cross(a, p_i - frames[ji][:3, 3])
                    J[i, 3:, k] = a
                else:
                    J[i, :3, k] = a
            link = hand._index[j.parent]
    return J


def link_lengths(hand: KinematicHand) -> np.ndarray:
    """Bounding-box diagonal of every link's local point cloud."""
    out = []
    for ln in hand.link_names:
        if ln not in hand.clouds:
            raise ValueError(f"link {ln!r} of {hand.name!r} has no point cloud")
        pts = hand.clouds[ln]
        out.append(float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))))
    return np.array(out)


def embodiment_similarity(hand_a: KinematicHand, hand_b: KinematicHand) -> tuple[float, float]:
    """Link alignment ``S_L`` and joint overlap ``S_J`` of ``hand_b`` against ``hand_a``."""
    if hand_a.L != hand_b.L or hand_a.dof != hand_b.dof:
        raise ValueError("hands must share topology (link and joint counts)")
    for ja, jb in zip(hand_a.joints, hand_b.joints):
        if ja.type != jb.type:
            raise ValueError(f"joint type mismatch: {ja.name} vs {jb.name}")
    la, lb = link_lengths(hand_a), link_lengths(hand_b)
    if np.any(la <= 0.0):
        raise ZeroDivisionError("reference hand has a zero-length link")
    s_l = 1.0 - float(np.mean(np.abs(lb - la) / la))

    if hand_a.dof == 0:
        return s_l, 1.0
    overlaps = []
    for ja, jb in zip(hand_a.actuated_joints, hand_b.actuated_joints):
        inter = max(0.0, min(ja.upper, jb.upper) - max(ja.lower, jb.lower))
        union = max(ja.upper, jb.upper) - min(ja.lower, jb.lower)
        overlaps.append(1.0 if union == 0.0 else inter / union)
    return s_l, float(np.mean(overlaps))
