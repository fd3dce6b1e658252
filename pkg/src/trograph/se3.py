"""SE(3) / SO(3) Lie-group operations.

Poses are 6-vectors ``psi = [rho; theta]`` where ``theta`` is a rotation
vector and the translation is recovered as ``t = V(theta) @ rho`` with ``V``
the left Jacobian of SO(3). Transforms are 4x4 homogeneous matrices.

Every function accepts leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

# Rodrigues / exp switches to the first-order expansion below this angle.
SMALL_ANGLE = 1e-8
# Jacobian-type coefficients switch to their Taylor series below this angle.
SERIES_ANGLE = 1e-3
# Half-width of the band around pi where log_map refuses to pick an axis.
EPS_ANGLE = 1e-6
# Above this angle the rotation axis is read from the symmetric part of R.
_NEAR_PI = np.pi - 0.1


class NearSingularityError(ValueError):
    """Rotation angle lies inside the declared singular band around pi."""


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _series(theta: np.ndarray, exact, coeffs) -> np.ndarray:
    """Evaluate ``exact(theta)`` with a Taylor fallback in ``theta**2``."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    approx = np.zeros_like(theta)
    for k, c in enumerate(coeffs):
        approx = approx + c * th2**k
    with np.errstate(divide="ignore", invalid="ignore"):
        val = exact(safe)
    return np.where(small, approx, val)


# Coefficients of [w]x and [w]x^2 in Rodrigues and in the SO(3) Jacobians.
def _sinc(th):
    return _series(th, lambda t: np.sin(t) / t, (1.0, -1 / 6, 1 / 120, -1 / 5040))


def _cosc(th):
    # (1 - cos t) / t^2
    return _series(th, lambda t: 2.0 * np.sin(0.5 * t) ** 2 / t**2, (0.5, -1 / 24, 1 / 720, -1 / 40320))


def _sinc3(th):
    # (t - sin t) / t^3
    return _series(th, lambda t: (t - np.sin(t)) / t**3, (1 / 6, -1 / 120, 1 / 5040, -1 / 362880))


def _inv_coeff(th):
    # (1 - (t/2) cot(t/2)) / t^2
    return _series(
        th,
        lambda t: (1.0 - 0.5 * t * np.cos(0.5 * t) / np.sin(0.5 * t)) / t**2,
        (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600),
    )


def so3_exp(theta: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    K = skew(theta)
    K2 = K @ K
    small = angle < SMALL_ANGLE
    a = np.where(small, 1.0, _sinc(angle))
    b = np.where(small, 0.5, _cosc(angle))
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def rotation_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(np.linalg.norm(w, axis=-1), c)


def so3_log(R: np.ndarray, *, singular: str = "raise") -> np.ndarray:
    """Rotation vector of ``R``.

    ``singular`` selects the behaviour inside the band ``|angle - pi| < EPS_ANGLE``:
    ``"raise"`` throws :class:`NearSingularityError`, ``"axis"`` reads the
    axis from the symmetric part and returns a vector of norm ``angle``.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    s = np.linalg.norm(w, axis=-1)
    angle = np.arctan2(s, c)
    if singular == "raise" and np.any(angle > np.pi - EPS_ANGLE):
        raise NearSingularityError(
            f"rotation angle {float(np.max(angle)):.12f} within {EPS_ANGLE} of pi"
        )
    scale = np.where(s > 1e-300, angle / np.where(s > 1e-300, s, 1.0), 1.0)
    scale = np.where(angle < SERIES_ANGLE, 1.0 / _sinc(angle), scale)
    out = scale[..., None] * w

    near = angle > _NEAR_PI
    if np.any(near):
        # (R + R^T)/2 - cos I = (1 - cos) a a^T
        Rn = R[near]
        cn = c[near]
        B = 0.5 * (Rn + np.swapaxes(Rn, -1, -2)) - cn[:, None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(B, k[:, None, None].repeat(3, axis=1), axis=-1)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.sign(np.einsum("ni,ni->n", axis, w[near]))
        sign = np.where(sign == 0, 1.0, sign)
        out = out.copy()
        out[near] = (sign * angle[near])[:, None] * axis
    return out


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    """Left Jacobian ``V(theta)`` of SO(3)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    K = skew(theta)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + _cosc(angle)[..., None, None] * K + _sinc3(angle)[..., None, None] * (K @ K)


def so3_left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    K = skew(theta)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + _inv_coeff(angle)[..., None, None] * (K @ K)


def so3_right_jacobian(theta: np.ndarray) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(theta, dtype=float))


def _check_psi(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got shape {psi.shape}")
    _check_finite(psi, "psi")
    return psi


def exp_map(psi: np.ndarray) -> np.ndarray:
    """4x4 transform from ``psi = [rho; theta]``."""
    psi = _check_psi(psi)
    rho, theta = psi[..., :3], psi[..., 3:]
    T = np.zeros(psi.shape[:-1] + (4, 4))
    T[..., :3, :3] = so3_exp(theta)
    T[..., :3, 3] = np.einsum("...ij,...j->...i", so3_left_jacobian(theta), rho)
    T[..., 3, 3] = 1.0
    return T


def log_map(T: np.ndarray, *, singular: str = "raise") -> np.ndarray:
    """Inverse of :func:`exp_map` on the canonical domain ``|theta| < pi``."""
    T = np.asarray(T, dtype=float)
    if T.shape[-2:] != (4, 4):
        raise ValueError(f"expected (..., 4, 4) transforms, got shape {T.shape}")
    _check_finite(T, "transform")
    theta = so3_log(T[..., :3, :3], singular=singular)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(theta), T[..., :3, 3])
    return np.concatenate([rho, theta], axis=-1)


def make_transform(rotation=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def inverse(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    Rt = np.swapaxes(a[..., :3, :3], -1, -2)
    out = np.zeros_like(a)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, a[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    return np.asarray(points, dtype=float) @ T[:3, :3].T + T[:3, 3]


def is_valid_transform(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
        and np.allclose(T[3], [0, 0, 0, 1], atol=tol)
    )


def adjoint(T: np.ndarray) -> np.ndarray:
    """6x6 adjoint for the ``[rho; theta]`` ordering."""
    T = np.asarray(T, dtype=float)
    R, t = T[..., :3, :3], T[..., :3, 3]
    out = np.zeros(T.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., :3, 3:] = skew(t) @ R
    out[..., 3:, 3:] = R
    return out


def _q_matrix(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian."""
    angle = np.linalg.norm(theta, axis=-1)[..., None, None]
    P = skew(rho)
    W = skew(theta)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    a = angle[..., 0, 0]
    c1 = _sinc3(a)[..., None, None]
    c2 = _series(a, lambda t: (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4), (1 / 24, -1 / 720, 1 / 40320))[..., None, None]
    c3 = _series(
        a,
        lambda t: (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
        (1 / 120, -1 / 2520, 1 / 120960),
    )[..., None, None]
    return (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (W @ WP + PW @ W - 3.0 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian(psi: np.ndarray) -> np.ndarray:
    """6x6 ``J`` with ``exp(psi + d) ~= exp(J d) exp(psi)`` for small ``d``."""
    psi = _check_psi(psi)
    rho, theta = psi[..., :3], psi[..., 3:]
    J = so3_left_jacobian(theta)
    out = np.zeros(psi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., :3, 3:] = _q_matrix(rho, theta)
    out[..., 3:, 3:] = J
    return out


def geodesic_so3(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Rotation angle of ``r1 @ r2.T`` in ``[0, pi]``."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    tr = np.einsum("...ij,...ij->...", r1, r2)
    return np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))


def geodesic_so3_grad(theta: np.ndarray, r_ref: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of ``geodesic_so3(r_ref, so3_exp(theta))`` in ``theta``.

    The gradient is ``J_r(theta)^T phi / |phi|`` with ``phi = log(r_ref^T R)``;
    it is set to zero when the two rotations coincide.
    """
    theta = np.asarray(theta, dtype=float)
    R = so3_exp(theta)
    E = np.asarray(r_ref, dtype=float).T @ R
    phi = so3_log(E, singular="axis")
    angle = float(np.linalg.norm(phi))
    if angle < 1e-12:
        return angle, np.zeros(3)
    return angle, so3_right_jacobian(theta).T @ (phi / angle)
