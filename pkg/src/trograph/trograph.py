"""The T(R,O) graph: object patch nodes, link nodes and relative-transform edges.

Graphs are immutable; every change of link poses goes through
:meth:`TroGraph.with_link_poses`, which rebuilds the edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import se3
from .kinematics import KinematicHand, forward_kinematics
from .pointcloud import LINK_BPS_POINTS, OBJECT_FEATURE_DIM, BasisPointSet, ObjectNodeSet, bps_encode

SCHEMA_VERSION = 1
DEFAULT_L_PAD = 25
GEOM_EMBED_DIM = 128
LINK_BASIS_SEED = 124_124
GEOM_ENCODER_SEED = 128_128


class GraphIntegrityError(ValueError):
    """Stored edges disagree with the edges derived from the nodes."""


class GraphSchemaError(ValueError):
    pass


class GeometryEncoder:
    """Fixed seeded 2-layer perceptron ``(B + 3 + 1) -> 128``."""

    def __init__(self, seed: int = GEOM_ENCODER_SEED, n_basis: int = LINK_BPS_POINTS, width: int = GEOM_EMBED_DIM):
        rng = np.random.default_rng(seed)
        d_in = n_basis + 4
        self.w1 = rng.normal(size=(d_in, width)) / np.sqrt(d_in)
        self.b1 = np.zeros(width)
        self.w2 = rng.normal(size=(width, width)) / np.sqrt(width)
        self.b2 = np.zeros(width)

    def __call__(self, bps: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
        x = np.concatenate([bps, center, [scale]])
        return np.tanh(x @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass(frozen=True)
class LinkGeometry:
    """Pose-independent part of the link nodes, padded to ``L_pad`` rows."""

    geom_embed: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    mask: np.ndarray

    @property
    def L_pad(self) -> int:
        return self.mask.shape[0]


def link_geometry(hand: KinematicHand, L_pad: int = DEFAULT_L_PAD, seed: int = GEOM_ENCODER_SEED) -> LinkGeometry:
    if hand.L > L_pad:
        raise ValueError(f"hand has {hand.L} links, more than L_pad={L_pad}")
    basis = BasisPointSet.generate(LINK_BPS_POINTS, LINK_BASIS_SEED)
    enc = GeometryEncoder(seed)
    geom = np.zeros((L_pad, GEOM_EMBED_DIM))
    centers = np.zeros((L_pad, 3))
    scales = np.zeros(L_pad)
    for i, name in enumerate(hand.link_names):
        if name not in hand.clouds:
            raise ValueError(f"link {name!r} has no point cloud")
        pts = hand.clouds[name]
        c = pts.mean(axis=0)
        s = float(np.linalg.norm(pts - c, axis=1).max())
        centers[i], scales[i] = c, s
        geom[i] = enc(bps_encode(pts, basis), c, s)
    mask = np.zeros(L_pad, dtype=bool)
    mask[: hand.L] = True
    return LinkGeometry(geom, centers, scales, mask)


@dataclass(frozen=True)
class LinkNodeSet:
    poses: np.ndarray  # (L_pad, 6) raw Lie-algebra coordinates
    geom_embed: np.ndarray  # (L_pad, 128)
    centers: np.ndarray  # (L_pad, 3)
    scales: np.ndarray  # (L_pad,)
    mask: np.ndarray  # (L_pad,) bool

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValueError("link node set has no real links")
        off = ~self.mask
        for name in ("poses", "geom_embed", "centers", "scales"):
            if np.any(getattr(self, name)[off] != 0.0):
                raise ValueError(f"masked rows of {name} must be zero")

    @property
    def L_pad(self) -> int:
        return self.mask.shape[0]

    def as_array(self) -> np.ndarray:
        """Node rows ``concat(pose, geom_embed)``, shape (L_pad, 134)."""
        return np.concatenate([self.poses, self.geom_embed], axis=1)


def build_link_nodes(geometry: LinkGeometry, transforms: np.ndarray | None = None, poses: np.ndarray | None = None, link_names=None) -> LinkNodeSet:
    """Link nodes from per-link object-frame transforms (L, 4, 4) or raw poses (L_pad, 6)."""
    psi = np.zeros((geometry.L_pad, 6))
    if transforms is not None:
        transforms = np.asarray(transforms, dtype=float)
        n = transforms.shape[0]
        if n != int(geometry.mask.sum()):
            raise ValueError(f"got {n} transforms for {int(geometry.mask.sum())} links")
        for i in range(n):
            try:
                psi[i] = se3.log_map(transforms[i])
            except se3.NearSingularityError as exc:
                name = link_names[i] if link_names is not None else str(i)
                raise se3.NearSingularityError(f"link {name}: {exc}") from exc
    elif poses is not None:
        psi = np.where(geometry.mask[:, None], np.asarray(poses, dtype=float), 0.0)
    return LinkNodeSet(psi, geometry.geom_embed, geometry.centers, geometry.scales, geometry.mask)


def hand_link_nodes(hand: KinematicHand, q, base: np.ndarray | None = None, L_pad: int = DEFAULT_L_PAD, geometry: LinkGeometry | None = None) -> LinkNodeSet:
    """Link nodes for joint values ``q`` with the hand base placed at ``base``."""
    geometry = geometry or link_geometry(hand, L_pad)
    T = forward_kinematics(hand, q)
    if base is not None:
        T = np.asarray(base) @ T
    return build_link_nodes(geometry, transforms=T, link_names=hand.link_names)


def rr_pairs(L_pad: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(L_pad, 1)


@dataclass(frozen=True)
class EdgeSet:
    e_or: np.ndarray  # (P, L_pad, 6)
    e_rr: np.ndarray  # (L_pad (L_pad - 1) / 2, 6), upper triangle row-major

    def rr_full(self) -> np.ndarray:
        """Materialized (L_pad, L_pad, 6) link-link edges; lower triangle by group inverse."""
        L = self.e_or.shape[1]
        out = np.zeros((L, L, 6))
        j, k = rr_pairs(L)
        out[j, k] = self.e_rr
        out[k, j] = -self.e_rr  # log(inv(exp(x))) = -x
        return out


def build_edges(obj: ObjectNodeSet, links: LinkNodeSet) -> EdgeSet:
    """Object-link edges ``log(T_O^-1 T_R)`` and link-link edges ``log(T_j^-1 T_k)``.

    Object transforms carry identity rotation and the patch center as translation.
    """
    mask = links.mask
    real = np.flatnonzero(mask)
    T = se3.exp_map(links.poses[real])  # (n, 4, 4)
    R = T[:, :3, :3]
    t = T[:, :3, 3]

    theta = se3.so3_log(R, singular="axis")  # (n, 3)
    Vinv = se3.so3_left_jacobian_inv(theta)
    P = obj.P
    L = links.L_pad
    e_or = np.zeros((P, L, 6))
    rel_t = t[None, :, :] - obj.centers[:, None, :]  # (P, n, 3)
    e_or[:, real, :3] = np.einsum("nij,pnj->pni", Vinv, rel_t)
    e_or[:, real, 3:] = theta[None]

    j, k = rr_pairs(L)
    e_rr = np.zeros((j.shape[0], 6))
    keep = mask[j] & mask[k]
    if np.any(keep):
        pos = np.full(L, -1)
        pos[real] = np.arange(real.shape[0])
        Tj = T[pos[j[keep]]]
        Tk = T[pos[k[keep]]]
        e_rr[keep] = se3.log_map(se3.inverse(Tj) @ Tk, singular="axis")
    return EdgeSet(e_or, e_rr)


@dataclass(frozen=True, eq=False)
class TroGraph:
    """Graph whose edges are always derived from its nodes."""

    object_nodes: ObjectNodeSet
    link_nodes: LinkNodeSet
    meta: dict = field(default_factory=dict)

    @cached_property
    def edges(self) -> EdgeSet:
        return build_edges(self.object_nodes, self.link_nodes)

    @property
    def P(self) -> int:
        return self.object_nodes.P

    @property
    def L_pad(self) -> int:
        return self.link_nodes.L_pad

    @property
    def mask(self) -> np.ndarray:
        return self.link_nodes.mask

    @property
    def poses(self) -> np.ndarray:
        return self.link_nodes.poses

    def with_link_poses(self, poses: np.ndarray) -> TroGraph:
        ln = self.link_nodes
        psi = np.where(ln.mask[:, None], np.asarray(poses, dtype=float), 0.0)
        new = LinkNodeSet(psi, ln.geom_embed, ln.centers, ln.scales, ln.mask)
        return TroGraph(self.object_nodes, new, dict(self.meta))

    def link_transforms(self) -> np.ndarray:
        """Object-frame transforms of the real links, shape (L, 4, 4)."""
        return se3.exp_map(self.poses[self.mask])


def graph_from_grasp(obj: ObjectNodeSet, hand: KinematicHand, q, base=None, L_pad: int = DEFAULT_L_PAD, geometry: LinkGeometry | None = None, seed: int = 0) -> TroGraph:
    links = hand_link_nodes(hand, q, base, L_pad, geometry)
    meta = {"hand_name": hand.name, "P": obj.P, "L_pad": L_pad, "seed": seed}
    return TroGraph(obj, links, meta)


def rescale_graph(g: TroGraph, k: float) -> TroGraph:
    """Uniformly scale every length in the graph by ``k``; rotations and geometry tokens are unchanged."""
    if k == 1.0:
        return g
    on, ln = g.object_nodes, g.link_nodes
    obj = ObjectNodeSet(on.centers * k, on.scale * k, on.features)
    poses = ln.poses.copy()
    poses[:, :3] *= k
    links = LinkNodeSet(poses, ln.geom_embed, ln.centers * k, ln.scales * k, ln.mask)
    return TroGraph(obj, links, dict(g.meta))


def _array(doc: dict, key: str, shape: tuple, dtype=float) -> np.ndarray:
    if key not in doc:
        raise GraphSchemaError(f"missing key {key!r}")
    try:
        arr = np.array(doc[key], dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise GraphSchemaError(f"{key!r} is not a numeric array") from exc
    if arr.shape != shape:
        raise GraphSchemaError(f"{key!r} has shape {arr.shape}, expected {shape}")
    return arr


def graph_to_dict(g: TroGraph) -> dict:
    on, ln, e = g.object_nodes, g.link_nodes, g.edges
    return {
        "schema_version": SCHEMA_VERSION,
        "meta": {**g.meta, "P": g.P, "L_pad": g.L_pad},
        "object_nodes": {
            "centers": on.centers.tolist(),
            "scale": float(on.scale),
            "features": on.features.tolist(),
        },
        "link_nodes": {
            "poses": ln.poses.tolist(),
            "geom_embed": ln.geom_embed.tolist(),
            "centers": ln.centers.tolist(),
            "scales": ln.scales.tolist(),
            "mask": ln.mask.tolist(),
        },
        "edges": {"e_or": e.e_or.tolist(), "e_rr": e.e_rr.tolist()},
    }


def serialize_graph(g: TroGraph) -> str:
    return json.dumps(graph_to_dict(g))


def graph_from_dict(doc: dict, tol: float = 1e-9) -> TroGraph:
    if not isinstance(doc, dict):
        raise GraphSchemaError("graph document must be a JSON object")
    for key in ("object_nodes", "link_nodes", "edges", "meta"):
        if key not in doc:
            raise GraphSchemaError(f"missing top-level key {key!r}")
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise GraphSchemaError(f"unsupported schema_version {doc.get('schema_version')}")
    meta = doc["meta"]
    try:
        P, L = int(meta["P"]), int(meta["L_pad"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphSchemaError("meta needs integer P and L_pad") from exc
    o, ln, e = doc["object_nodes"], doc["link_nodes"], doc["edges"]
    centers = _array(o, "centers", (P, 3))
    feats = _array(o, "features", (P, OBJECT_FEATURE_DIM))
    if "scale" not in o:
        raise GraphSchemaError("missing key 'scale'")
    obj = ObjectNodeSet(centers, float(o["scale"]), feats)
    mask = _array(ln, "mask", (L,), dtype=bool)
    links = LinkNodeSet(
        _array(ln, "poses", (L, 6)),
        _array(ln, "geom_embed", (L, GEOM_EMBED_DIM)),
        _array(ln, "centers", (L, 3)),
        _array(ln, "scales", (L,)),
        mask,
    )
    g = TroGraph(obj, links, dict(meta))
    e_or = _array(e, "e_or", (P, L, 6))
    e_rr = _array(e, "e_rr", (L * (L - 1) // 2, 6))
    if np.max(np.abs(e_or - g.edges.e_or), initial=0.0) > tol or np.max(np.abs(e_rr - g.edges.e_rr), initial=0.0) > tol:
        raise GraphIntegrityError("stored edges do not match the edges derived from the nodes")
    return g


def deserialize_graph(text: str, tol: float = 1e-9) -> TroGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphSchemaError(f"invalid JSON: {exc}") from exc
    return graph_from_dict(doc, tol)
