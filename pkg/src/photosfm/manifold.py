"""Minimal-coordinate machinery for SO(3), SE(3) and the unit sphere.

Rotations are plain 3x3 orthonormal numpy arrays, poses pair a rotation with
a translation, and unit vectors live on S2 with a deterministic 3x2 tangent
basis. All retractions here are the ones the factor Jacobians linearize
through, so their conventions (right-multiplicative pose update, trigonometric
sphere update) must not change independently of the factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Crossover points where the closed forms lose precision to cancellation.
_SO3_SMALL_ANGLE = 1e-8
_S2_SMALL_STEP = 1e-9


class AntipodalError(ValueError):
    """Log map requested between (numerically) antipodal unit vectors."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(v) @ w == cross(v, w)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def so3_exp(gamma: np.ndarray) -> np.ndarray:
    """Exponential map of SO(3) via the Rodrigues formula.

    Falls back to the second-order series below the small-angle crossover so
    the result stays accurate for tiny steps produced by the optimizer.
    """
    gamma = np.asarray(gamma, dtype=float)
    theta = np.linalg.norm(gamma)
    k = skew(gamma)
    if theta < _SO3_SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + s * k + c * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of so3_exp)."""
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    # w = sin(theta) * axis, read off the skew-symmetric part.
    w = 0.5 * np.array([
        rot[2, 1] - rot[1, 2],
        rot[0, 2] - rot[2, 0],
        rot[1, 0] - rot[0, 1],
    ])
    if theta < _SO3_SMALL_ANGLE:
        return w
    if theta < np.pi - 1e-4:
        return (theta / np.sin(theta)) * w
    # Near pi the skew part cancels; recover the axis from the symmetric part
    # via a a^T = (sym(R) - cos(theta) I) / (1 - cos(theta)).
    aat = ((rot + rot.T) * 0.5 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    diag = np.sqrt(np.clip(np.diag(aat), 0.0, None))
    i = int(np.argmax(diag))
    axis = normalize(aat[:, i] / diag[i])
    if w @ axis < 0.0:
        axis = -axis
    return theta * axis


def so3_jac_right_inv(gamma: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d/d(delta) Log(Exp(gamma) Exp(delta)) at 0."""
    theta = np.linalg.norm(gamma)
    k = skew(gamma)
    if theta < _SO3_SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    coef = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + coef * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform T = (R, t): maps camera-frame points into the body frame.

    ``R`` is a 3x3 rotation matrix, ``t`` the frame origin in body coordinates
    (scene length units).
    """

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        return Pose(np.array(m[:3, :3], dtype=float), np.array(m[:3, 3], dtype=float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        rt = self.R.T
        return Pose(rt, -(rt @ self.t))

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Map a point from this pose's frame into the body frame."""
        return self.R @ p + self.t

    def transform_inverse(self, p: np.ndarray) -> np.ndarray:
        """Map a body-frame point into this pose's frame."""
        return self.R.T @ (p - self.t)


def pose_retract(pose: Pose, zeta: np.ndarray) -> Pose:
    """Right-multiplicative pose update with local coordinates [gamma; tau].

    Rotation becomes R Exp(gamma) and translation t + R tau, i.e. the block
    product of the pose with the lifted increment.
    """
    zeta = np.asarray(zeta, dtype=float)
    gamma, tau = zeta[:3], zeta[3:]
    return Pose(pose.R @ so3_exp(gamma), pose.t + pose.R @ tau)


def pose_local(ref: Pose, value: Pose) -> np.ndarray:
    """Local coordinates zeta with pose_retract(ref, zeta) == value."""
    gamma = so3_log(ref.R.T @ value.R)
    tau = ref.R.T @ (value.t - ref.t)
    return np.concatenate([gamma, tau])


def tangent_basis(x: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the tangent plane at x on S2.

    Starts Gram-Schmidt from the canonical axis least aligned with x, so the
    same unit vector always produces the same 3x2 basis.
    """
    x0, x1, x2 = float(x[0]), float(x[1]), float(x[2])
    a0, a1, a2 = abs(x0), abs(x1), abs(x2)
    # First minimal |component|, matching argmin tie-breaking.
    if a0 <= a1 and a0 <= a2:
        b = (1.0 - x0 * x0, -x0 * x1, -x0 * x2)
    elif a1 <= a2:
        b = (-x1 * x0, 1.0 - x1 * x1, -x1 * x2)
    else:
        b = (-x2 * x0, -x2 * x1, 1.0 - x2 * x2)
    inv = 1.0 / math.sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2])
    b0, b1, b2 = b[0] * inv, b[1] * inv, b[2] * inv
    return np.array([
        [b0, x1 * b2 - x2 * b1],
        [b1, x2 * b0 - x0 * b2],
        [b2, x0 * b1 - x1 * b0],
    ])


def s2_retract(x: np.ndarray, xi: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Trigonometric retraction on S2: cos(|v|) x + sin(|v|) v/|v| with v = B xi.

    Below the small-step crossover the first-order form normalize(x + v) is
    used instead. Result is renormalized so repeated retractions cannot drift
    off the sphere.
    """
    x = np.asarray(x, dtype=float)
    b = tangent_basis(x) if basis is None else basis
    v = b @ np.asarray(xi, dtype=float)
    nv = np.linalg.norm(v)
    if nv < _S2_SMALL_STEP:
        return normalize(x + v)
    y = np.cos(nv) * x + np.sin(nv) * (v / nv)
    return y / np.linalg.norm(y)


def s2_local(x: np.ndarray, y: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Inverse of s2_retract: xi such that s2_retract(x, xi) == y.

    Raises AntipodalError when x and y are (numerically) opposite, where the
    log map is undefined.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = float(x @ y)
    if c < -1.0 + 1e-9:
        raise AntipodalError("unit vectors are antipodal")
    b = tangent_basis(x) if basis is None else basis
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    if theta < _S2_SMALL_STEP:
        return b.T @ y
    return (theta / np.sin(theta)) * (b.T @ y)


def s2_local_jacobian(x: np.ndarray, y: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Derivative of s2_local(x, y) with respect to y, as a 2x3 matrix.

    Exact (not small-angle): with theta = arccos(x.y) and k = theta/sin(theta),
    d xi/d y = k B^T - (B^T y) d k/d(x.y) x^T.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b = tangent_basis(x) if basis is None else basis
    c = float(np.clip(x @ y, -1.0, 1.0))
    theta = np.arccos(c)
    if theta < _S2_SMALL_STEP:
        return b.T
    s = np.sin(theta)
    k = theta / s
    # dk/dc = dk/dtheta * dtheta/dc with dtheta/dc = -1/sin(theta)
    dk_dc = -(s - theta * np.cos(theta)) / (s * s) / s
    return k * b.T + np.outer(b.T @ y, dk_dc * x)
