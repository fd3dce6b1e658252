"""Point-cloud partitioning and fixed-length geometric encodings."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LINK_BPS_POINTS = 124
PATCH_BPS_POINTS = 61
OBJECT_FEATURE_DIM = 64
PATCH_BASIS_SEED = 61_061
PATCH_PROJECTION_SEED = 64_064

XYZB_MAGIC = b"XYZB"


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be N x 3, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite entries")
    return pts


def load_xyz(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".xyzb":
        return load_xyzb(path)
    return as_cloud(np.loadtxt(path, dtype=float, ndmin=2))


def save_xyz(path, points) -> None:
    path = Path(path)
    if path.suffix == ".xyzb":
        save_xyzb(path, points)
        return
    np.savetxt(path, as_cloud(points), fmt="%.17g")


def load_xyzb(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != XYZB_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (n,) = struct.unpack("<I", data[4:8])
    body = np.frombuffer(data, dtype="<f4", offset=8)
    if body.size != 3 * n:
        raise ValueError(f"{path}: expected {n} points, payload holds {body.size / 3:g}")
    return as_cloud(body.reshape(n, 3).astype(float))


def save_xyzb(path, points) -> None:
    pts = as_cloud(points).astype("<f4")
    Path(path).write_bytes(XYZB_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes())


def farthest_point_sample(points, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; the first pick is drawn from ``seed``."""
    pts = as_cloud(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample {k} points from a cloud of {n}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=int)
    chosen[0] = rng.integers(n)
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[chosen[i]], axis=1))
    return chosen


def coverage_radius(points, centers) -> float:
    """Largest distance from any point to its nearest center."""
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
    return float(d.min(axis=1).max())


def partition_patches(points, n_patches: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Assign every point to its nearest FPS center (ties go to the lower index).

    Returns ``(labels, centers)`` with ``labels`` of length N in ``[0, n_patches)``.
    """
    pts = as_cloud(points)
    idx = farthest_point_sample(pts, n_patches, seed)
    centers = pts[idx]
    d = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=-1)
    return np.argmin(d, axis=1), centers


@dataclass(frozen=True)
class BasisPointSet:
    basis: np.ndarray
    seed: int

    @classmethod
    def generate(cls, n: int = LINK_BPS_POINTS, seed: int = 0) -> BasisPointSet:
        """``n`` points drawn uniformly inside the unit ball."""
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
        return cls(d * r, seed)

    @property
    def size(self) -> int:
        return self.basis.shape[0]


def centroid(points) -> np.ndarray:
    """Mean with exactly rounded sums, so row order cannot change a bit."""
    pts = as_cloud(points)
    return np.array([math.fsum(col) for col in pts.T]) / pts.shape[0]


def normalize_unit_sphere(points) -> np.ndarray:
    """Center at the centroid and divide by the largest point norm."""
    pts = as_cloud(points)
    centered = pts - centroid(pts)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale == 0.0:
        return np.zeros_like(centered)
    return centered / scale


def bps_encode(points, basis: BasisPointSet) -> np.ndarray:
    """Per-basis-point minimum distance to the normalized cloud, length B."""
    pts = normalize_unit_sphere(points)
    b = basis.basis
    out = np.full(b.shape[0], np.inf)
    for start in range(0, pts.shape[0], 4096):
        chunk = pts[start : start + 4096]
        d = np.linalg.norm(b[:, None, :] - chunk[None, :, :], axis=-1)
        out = np.minimum(out, d.min(axis=1))
    return out


@dataclass(frozen=True)
class ObjectNodeSet:
    """Object patch nodes: centers (P x 3), global scale, features (P x 64)."""

    centers: np.ndarray
    scale: float
    features: np.ndarray

    @property
    def P(self) -> int:
        return self.centers.shape[0]

    def as_array(self) -> np.ndarray:
        """Node rows ``concat(center, scale, feature)``, shape (P, 68)."""
        s = np.full((self.P, 1), self.scale)
        return np.concatenate([self.centers, s, self.features], axis=1)


def patch_projection(seed: int = PATCH_PROJECTION_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(PATCH_BPS_POINTS, OBJECT_FEATURE_DIM)) / np.sqrt(PATCH_BPS_POINTS)


def object_patch_features(points, labels: np.ndarray, centers: np.ndarray) -> ObjectNodeSet:
    """Deterministic patch tokens: patch BPS (61 points) through a fixed projection."""
    pts = as_cloud(points)
    basis = BasisPointSet.generate(PATCH_BPS_POINTS, PATCH_BASIS_SEED)
    proj = patch_projection()
    feats = np.zeros((centers.shape[0], OBJECT_FEATURE_DIM))
    for i in range(centers.shape[0]):
        patch = pts[labels == i]
        if patch.shape[0] == 0:
            continue
        feats[i] = bps_encode(patch, basis) @ proj
    scale = float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max())
    return ObjectNodeSet(np.array(centers, dtype=float), scale, feats)


def encode_object(points, n_patches: int = 25, seed: int = 0) -> ObjectNodeSet:
    labels, centers = partition_patches(points, n_patches, seed)
    return object_patch_features(points, labels, centers)


def estimate_normal(points, center, k: int = 16) -> np.ndarray:
    """Local-PCA normal at ``center``, oriented away from the cloud centroid."""
    pts = as_cloud(points)
    center = np.asarray(center, dtype=float)
    d = np.linalg.norm(pts - center, axis=1)
    nb = pts[np.argsort(d, kind="stable")[: min(k, pts.shape[0])]]
    cov = np.cov((nb - nb.mean(axis=0)).T)
    w, v = np.linalg.eigh(cov)
    n = v[:, 0]
    if np.dot(n, center - pts.mean(axis=0)) < 0:
        n = -n
    return n / np.linalg.norm(n)
