"""Residual and Jacobian blocks for the photoclinometry factor graph.

Each factor function returns a ``Residual``: a whitened residual vector plus
one Jacobian block per connected variable, expressed in that variable's local
(tangent-space) coordinates. Observations that cannot be evaluated at the
current estimate (shadowed or back-facing surface, landmark behind camera,
coincident landmarks) come back deactivated with zero residual and zero
Jacobians so they contribute nothing to the normal equations.

The pure functions here key Jacobian blocks by role name ('pose', 'sun', ...).
The record classes at the bottom bind graph variable keys to those roles and
are what the optimizer consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Hashable, Mapping

import numpy as np

from .manifold import (
    Pose,
    s2_local,
    s2_local_jacobian,
    skew,
    so3_jac_right_inv,
    so3_log,
    tangent_basis,
)
from .photometry import (
    ImagePhotoParams,
    NotIlluminated,
    NotVisible,
    ReflectanceModel,
    brightness_with_partials,
    brightness_with_partials_batch,
)

_MIN_DEPTH = 1e-9
_MIN_SEPARATION = 1e-9
_ARCCOS_GUARD = 1e-9


class BehindCamera(ValueError):
    """Landmark has non-positive depth in the camera frame."""


class CoincidentLandmarks(ValueError):
    """Smoothness pair closer than the separation threshold."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class KeypointMeas:
    """One keypoint observation: pixel location plus sampled brightness."""

    pixel: np.ndarray
    brightness: float
    pixel_cov: np.ndarray
    brightness_sigma: float

    @property
    def sqrt_info(self) -> np.ndarray:
        """Cached W with W^T W = pixel_cov^-1 (the covariance is immutable)."""
        w = getattr(self, "_sqrt_info", None)
        if w is None:
            w = pixel_whitener(self.pixel_cov)
            object.__setattr__(self, "_sqrt_info", w)
        return w


@dataclass
class Residual:
    """Whitened residual with per-variable Jacobian blocks in local coords."""

    r: np.ndarray
    jac: dict[Any, np.ndarray]
    active: bool = True

    @property
    def cost(self) -> float:
        return 0.5 * float(self.r @ self.r)


def _inactive(dim: int, blocks: dict[Any, int]) -> Residual:
    return Residual(np.zeros(dim),
                    {k: np.zeros((dim, d)) for k, d in blocks.items()},
                    active=False)


def d_norm(v: np.ndarray) -> np.ndarray:
    """Jacobian of v -> v/||v||: (I - vv^T/||v||^2) / ||v||."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    n2 = x * x + y * y + z * z
    inv = 1.0 / (n2 * math.sqrt(n2))
    return np.array([
        [(n2 - x * x) * inv, -x * y * inv, -x * z * inv],
        [-x * y * inv, (n2 - y * y) * inv, -y * z * inv],
        [-x * z * inv, -y * z * inv, (n2 - z * z) * inv],
    ])


def pixel_whitener(cov: np.ndarray) -> np.ndarray:
    """Square-root information matrix W with W^T W = cov^-1."""
    return np.linalg.inv(np.linalg.cholesky(cov))


# ---------------------------------------------------------------------------
# Forward projection
# ---------------------------------------------------------------------------

def project(pose: Pose, landmark: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project a body-frame landmark to pixel coordinates."""
    q = pose.transform_inverse(landmark)
    if q[2] <= _MIN_DEPTH:
        raise BehindCamera(f"depth {q[2]:.3e} <= {_MIN_DEPTH}")
    return np.array([intr.fx * q[0] / q[2] + intr.cx,
                     intr.fy * q[1] / q[2] + intr.cy])


def _project_with_jacobians(pose, landmark, intr):
    q = pose.transform_inverse(landmark)
    if q[2] <= _MIN_DEPTH:
        raise BehindCamera(f"depth {q[2]:.3e} <= {_MIN_DEPTH}")
    inv_z = 1.0 / q[2]
    pixel = np.array([intr.fx * q[0] * inv_z + intr.cx,
                      intr.fy * q[1] * inv_z + intr.cy])
    dpix_dq = np.array([
        [intr.fx * inv_z, 0.0, -intr.fx * q[0] * inv_z * inv_z],
        [0.0, intr.fy * inv_z, -intr.fy * q[1] * inv_z * inv_z],
    ])
    # q(zeta) = Exp(-gamma)(q - tau) to first order: dq/dgamma = [q]x, dq/dtau = -I.
    dq_dzeta = np.hstack([skew(q), -np.eye(3)])
    dq_dl = pose.R.T
    return pixel, dpix_dq @ dq_dzeta, dpix_dq @ dq_dl


def reprojection_factor(pose: Pose, landmark: np.ndarray, intr: CameraIntrinsics,
                        meas: KeypointMeas) -> Residual:
    """Whitened reprojection error with pose (6) and landmark (3) blocks."""
    shape = {"pose": 6, "landmark": 3}
    try:
        pixel, j_pose, j_lm = _project_with_jacobians(pose, landmark, intr)
    except BehindCamera:
        return _inactive(2, shape)
    w = meas.sqrt_info
    return Residual(w @ (pixel - meas.pixel),
                    {"pose": w @ j_pose, "landmark": w @ j_lm})


# ---------------------------------------------------------------------------
# Photoclinometry
# ---------------------------------------------------------------------------

def photoclinometry_factor(pose: Pose, sun: np.ndarray, landmark: np.ndarray,
                           normal: np.ndarray, albedo: float,
                           params: ImagePhotoParams, model: ReflectanceModel,
                           meas: KeypointMeas) -> Residual:
    """Brightness residual (I_pred - I_meas) / sigma with blocks for pose (6),
    sun (2), landmark (3), normal (2), albedo (1) and, in uncalibrated mode,
    per-image scale (1) and bias (1).

    Shadowed or back-facing geometry deactivates the factor instead of
    raising, so a single bad view cannot poison the optimization mid-step.
    """
    shape = {"pose": 6, "sun": 2, "landmark": 3, "normal": 2, "albedo": 1}
    if not model.calibrated:
        shape.update({"scale": 1, "bias": 1})

    e_vec = pose.t - landmark
    norm_e = math.sqrt(float(e_vec @ e_vec))
    if norm_e < _MIN_SEPARATION:
        return _inactive(1, shape)
    emit = e_vec / norm_e
    f = float(sun @ normal)
    w = float(emit @ normal)
    h = float(sun @ emit)
    if f <= 0.0 or w <= 0.0 or h * h >= 1.0 - 1e-12:
        return _inactive(1, shape)
    try:
        value, di_df, di_dw, di_dh, di_da, di_dscale, di_dbias = \
            brightness_with_partials(model, params, albedo, f, w, h)
    except (NotIlluminated, NotVisible):
        return _inactive(1, shape)

    inv_sigma = 1.0 / meas.brightness_sigma
    dn = d_norm(e_vec)
    di_de = (di_dw * normal + di_dh * sun) @ dn  # w and h depend on e; f does not
    b_sun = tangent_basis(sun)
    b_normal = tangent_basis(normal)

    j_pose = np.zeros((1, 6))
    j_pose[0, 3:] = (di_de @ pose.R) * inv_sigma
    jac = {
        "pose": j_pose,
        "sun": (di_df * (normal @ b_sun) + di_dh * (emit @ b_sun))[None, :] * inv_sigma,
        "landmark": -di_de[None, :] * inv_sigma,
        "normal": (di_df * (sun @ b_normal) + di_dw * (emit @ b_normal))[None, :] * inv_sigma,
        "albedo": np.array([[di_da * inv_sigma]]),
    }
    if not model.calibrated:
        jac["scale"] = np.array([[di_dscale * inv_sigma]])
        jac["bias"] = np.array([[di_dbias * inv_sigma]])
    return Residual(np.array([(value - meas.brightness) * inv_sigma]), jac)


def predict_track_brightness(pose: Pose, sun: np.ndarray, landmark: np.ndarray,
                             normal: np.ndarray, albedo: float,
                             params: ImagePhotoParams,
                             model: ReflectanceModel) -> float | None:
    """Brightness prediction for metrics; None when shadowed/back-facing."""
    e_vec = pose.t - landmark
    norm_e = float(np.linalg.norm(e_vec))
    if norm_e < _MIN_SEPARATION:
        return None
    emit = e_vec / norm_e
    f = float(sun @ normal)
    w = float(emit @ normal)
    h = float(sun @ emit)
    if f <= 0.0 or w <= 0.0:
        return None
    return brightness_with_partials(model, params, albedo, f, w, h)[0]


# ---------------------------------------------------------------------------
# Sun vector
# ---------------------------------------------------------------------------

def sun_vector_factor(pose: Pose, sun: np.ndarray, meas_sun_cam: np.ndarray,
                      sigma: float) -> Residual:
    """Tangent-space error between the measured camera-frame Sun direction
    and the prediction R^T s, with pose (6) and sun (2) blocks."""
    s_cam = pose.R.T @ sun
    inv_sigma = 1.0 / sigma
    basis_meas = tangent_basis(meas_sun_cam)
    xi = s2_local(meas_sun_cam, s_cam, basis=basis_meas)  # AntipodalError propagates
    dxi = s2_local_jacobian(meas_sun_cam, s_cam, basis=basis_meas)
    # Prediction sensitivities: ds_cam/dgamma = [R^T s]x, ds_cam/dxi_s = R^T B_s.
    j_pose = np.zeros((2, 6))
    j_pose[:, :3] = dxi @ skew(s_cam) * inv_sigma
    j_sun = dxi @ pose.R.T @ tangent_basis(sun) * inv_sigma
    return Residual(xi * inv_sigma, {"pose": j_pose, "sun": j_sun})


# ---------------------------------------------------------------------------
# Local smoothness
# ---------------------------------------------------------------------------

def smoothness_factor(landmark: np.ndarray, normal: np.ndarray,
                      neighbor: np.ndarray, weight: float) -> Residual:
    """Penalty sqrt(eta) * (arccos(d.n) - pi/2) pushing the direction to a
    neighboring landmark into the tangent plane of the reference normal."""
    shape = {"landmark": 3, "normal": 2, "neighbor": 3}
    diff = neighbor - landmark
    dist = float(np.linalg.norm(diff))
    if dist <= _MIN_SEPARATION:
        return _inactive(1, shape)
    direction = diff / dist
    u = float(direction @ normal)
    u = min(1.0 - _ARCCOS_GUARD, max(-1.0 + _ARCCOS_GUARD, u))
    sqrt_w = math.sqrt(weight)
    r = sqrt_w * (math.acos(u) - 0.5 * math.pi)
    dr_du = -sqrt_w / math.sqrt(1.0 - u * u)
    du_dneighbor = normal @ d_norm(diff)
    b_normal = tangent_basis(normal)
    return Residual(np.array([r]), {
        "landmark": (-dr_du * du_dneighbor)[None, :],
        "normal": (dr_du * (direction @ b_normal))[None, :],
        "neighbor": (dr_du * du_dneighbor)[None, :],
    })


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

def pose_prior_factor(pose: Pose, prior: Pose, sqrt_info: np.ndarray) -> Residual:
    """Whitened local-coordinate difference from a prior pose."""
    gamma = so3_log(prior.R.T @ pose.R)
    tau = prior.R.T @ (pose.t - prior.t)
    r = sqrt_info @ np.concatenate([gamma, tau])
    j = np.zeros((6, 6))
    j[:3, :3] = so3_jac_right_inv(gamma)
    j[3:, 3:] = prior.R.T @ pose.R
    return Residual(r, {"value": sqrt_info @ j})


def unit_prior_factor(value: np.ndarray, prior: np.ndarray, sigma: float) -> Residual:
    """Tangent-space difference from a prior unit vector."""
    basis_prior = tangent_basis(prior)
    xi = s2_local(prior, value, basis=basis_prior)
    dxi = s2_local_jacobian(prior, value, basis=basis_prior)
    return Residual(xi / sigma, {"value": dxi @ tangent_basis(value) / sigma})


def vector_prior_factor(value: np.ndarray, prior: np.ndarray,
                        sqrt_info: np.ndarray) -> Residual:
    return Residual(sqrt_info @ (value - prior), {"value": sqrt_info.copy()})


def scalar_prior_factor(value: float, prior: float, sigma: float) -> Residual:
    return Residual(np.array([(value - prior) / sigma]),
                    {"value": np.array([[1.0 / sigma]])})


def distance_prior_factor(landmark: np.ndarray, anchor: np.ndarray,
                          distance: float, sigma: float) -> Residual:
    """Pins ||landmark - anchor||, removing the scale gauge about the anchor."""
    diff = landmark - anchor
    dist = float(np.linalg.norm(diff))
    if dist <= _MIN_SEPARATION:
        return _inactive(1, {"landmark": 3})
    return Residual(np.array([(dist - distance) / sigma]),
                    {"landmark": (diff / (dist * sigma))[None, :]})


# ---------------------------------------------------------------------------
# Graph factor records: bind variable keys to the pure residual functions.
# ---------------------------------------------------------------------------

def _rekey(res: Residual, mapping: dict[str, Hashable]) -> Residual:
    res.jac = {mapping[role]: block for role, block in res.jac.items()}
    return res


@dataclass
class ReprojectionFactor:
    pose_key: Hashable
    landmark_key: Hashable
    intrinsics: CameraIntrinsics
    meas: KeypointMeas
    dim: int = 2

    def keys(self):
        return (self.pose_key, self.landmark_key)

    def linearize(self, values: Mapping) -> Residual:
        res = reprojection_factor(values[self.pose_key], values[self.landmark_key],
                                  self.intrinsics, self.meas)
        return _rekey(res, {"pose": self.pose_key, "landmark": self.landmark_key})


@dataclass
class PhotoclinometryFactor:
    pose_key: Hashable
    sun_key: Hashable
    landmark_key: Hashable
    normal_key: Hashable
    albedo_key: Hashable
    model: ReflectanceModel
    meas: KeypointMeas
    scale_key: Hashable = None
    bias_key: Hashable = None
    dim: int = 1

    def keys(self):
        base = (self.pose_key, self.sun_key, self.landmark_key,
                self.normal_key, self.albedo_key)
        if self.model.calibrated:
            return base
        return base + (self.scale_key, self.bias_key)

    def linearize(self, values: Mapping) -> Residual:
        if self.model.calibrated:
            params = ImagePhotoParams()
        else:
            params = ImagePhotoParams(scale=values[self.scale_key],
                                      bias=values[self.bias_key])
        res = photoclinometry_factor(
            values[self.pose_key], values[self.sun_key], values[self.landmark_key],
            values[self.normal_key], values[self.albedo_key], params, self.model,
            self.meas)
        mapping = {"pose": self.pose_key, "sun": self.sun_key,
                   "landmark": self.landmark_key, "normal": self.normal_key,
                   "albedo": self.albedo_key}
        if not self.model.calibrated:
            mapping.update({"scale": self.scale_key, "bias": self.bias_key})
        return _rekey(res, mapping)


@dataclass
class SunVectorFactor:
    pose_key: Hashable
    sun_key: Hashable
    meas_sun_cam: np.ndarray
    sigma: float
    dim: int = 2

    def keys(self):
        return (self.pose_key, self.sun_key)

    def linearize(self, values: Mapping) -> Residual:
        res = sun_vector_factor(values[self.pose_key], values[self.sun_key],
                                self.meas_sun_cam, self.sigma)
        return _rekey(res, {"pose": self.pose_key, "sun": self.sun_key})


@dataclass
class SmoothnessFactor:
    landmark_key: Hashable
    normal_key: Hashable
    neighbor_key: Hashable
    weight: float
    dim: int = 1

    def keys(self):
        return (self.landmark_key, self.normal_key, self.neighbor_key)

    def linearize(self, values: Mapping) -> Residual:
        res = smoothness_factor(values[self.landmark_key], values[self.normal_key],
                                values[self.neighbor_key], self.weight)
        return _rekey(res, {"landmark": self.landmark_key, "normal": self.normal_key,
                            "neighbor": self.neighbor_key})


@dataclass
class PriorFactor:
    """Prior on a single variable; covariance is a scalar sigma for 1- and
    2-dimensional variables or a full SPD matrix for poses and points."""

    key: Hashable
    prior: Any
    covariance: Any
    dim: int = 0

    def __post_init__(self):
        if isinstance(self.prior, Pose):
            self.dim = 6
        elif np.ndim(self.prior) == 0:
            self.dim = 1
        else:
            self.dim = len(self.prior)

    def keys(self):
        return (self.key,)

    def _sqrt_info(self, n: int) -> np.ndarray:
        cov = self.covariance
        if np.ndim(cov) == 0:
            return np.eye(n) / math.sqrt(float(cov))
        return np.linalg.inv(np.linalg.cholesky(np.asarray(cov, dtype=float)))

    def linearize(self, values: Mapping) -> Residual:
        value = values[self.key]
        if isinstance(self.prior, Pose):
            res = pose_prior_factor(value, self.prior, self._sqrt_info(6))
        elif np.ndim(self.prior) == 0:
            sigma = math.sqrt(float(self.covariance)) if np.ndim(self.covariance) == 0 \
                else math.sqrt(float(np.asarray(self.covariance).ravel()[0]))
            res = scalar_prior_factor(float(value), float(self.prior), sigma)
        elif len(self.prior) == 3:
            res = vector_prior_factor(value, self.prior, self._sqrt_info(3))
        else:
            raise TypeError("unsupported prior value")
        return _rekey(res, {"value": self.key})


@dataclass
class UnitPriorFactor:
    key: Hashable
    prior: np.ndarray
    sigma: float
    dim: int = 2

    def keys(self):
        return (self.key,)

    def linearize(self, values: Mapping) -> Residual:
        res = unit_prior_factor(values[self.key], self.prior, self.sigma)
        return _rekey(res, {"value": self.key})


@dataclass
class DistancePriorFactor:
    landmark_key: Hashable
    anchor: np.ndarray
    distance: float
    sigma: float
    dim: int = 1

    def keys(self):
        return (self.landmark_key,)

    def linearize(self, values: Mapping) -> Residual:
        res = distance_prior_factor(values[self.landmark_key], self.anchor,
                                    self.distance, self.sigma)
        return _rekey(res, {"landmark": self.landmark_key})


# ---------------------------------------------------------------------------
# Batched linearization kernels. These evaluate many factors of one type at
# once with array operations; the graph checks them against the per-factor
# path (same math, same conventions) in its stacking-oracle tests. Each
# returns (residuals (m, dim), vals (m, width), active (m,)) where vals holds
# the Jacobian blocks raveled in keys() order and inactive rows are zeroed.
# ---------------------------------------------------------------------------

def tangent_basis_batch(x: np.ndarray) -> np.ndarray:
    """(m,3) unit vectors -> (m,3,2) bases, matching tangent_basis rows."""
    axis = np.argmin(np.abs(x), axis=1)
    e = np.eye(3)[axis]
    b1 = e - np.sum(e * x, axis=1, keepdims=True) * x
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(x, b1)
    return np.stack([b1, b2], axis=2)


def d_norm_batch(v: np.ndarray) -> np.ndarray:
    """(m,3) -> (m,3,3) normalization Jacobians."""
    n2 = np.sum(v * v, axis=1)
    out = -v[:, :, None] * v[:, None, :]
    idx = np.arange(3)
    out[:, idx, idx] += n2[:, None]
    out *= (1.0 / (n2 * np.sqrt(n2)))[:, None, None]
    return out


def batch_reprojection(rot, t_cam, lms, fx, fy, cx, cy, pixels, sqrt_info):
    """Vectorized reprojection residuals/Jacobians.

    rot (m,3,3), t_cam (m,3), lms (m,3); intrinsics and measurements (m,...).
    """
    q = np.einsum("mji,mj->mi", rot, lms - t_cam)
    active = q[:, 2] > _MIN_DEPTH
    qz = np.where(active, q[:, 2], 1.0)
    inv_z = 1.0 / qz
    pixel = np.stack([fx * q[:, 0] * inv_z + cx, fy * q[:, 1] * inv_z + cy], axis=1)

    m = len(q)
    dpix_dq = np.zeros((m, 2, 3))
    dpix_dq[:, 0, 0] = fx * inv_z
    dpix_dq[:, 1, 1] = fy * inv_z
    dpix_dq[:, 0, 2] = -fx * q[:, 0] * inv_z * inv_z
    dpix_dq[:, 1, 2] = -fy * q[:, 1] * inv_z * inv_z

    # Left block skew(q), right block -I.
    dq_dzeta = np.zeros((m, 3, 6))
    dq_dzeta[:, 0, 1] = -q[:, 2]
    dq_dzeta[:, 0, 2] = q[:, 1]
    dq_dzeta[:, 1, 0] = q[:, 2]
    dq_dzeta[:, 1, 2] = -q[:, 0]
    dq_dzeta[:, 2, 0] = -q[:, 1]
    dq_dzeta[:, 2, 1] = q[:, 0]
    dq_dzeta[:, 0, 3] = -1.0
    dq_dzeta[:, 1, 4] = -1.0
    dq_dzeta[:, 2, 5] = -1.0

    w_dpix = np.einsum("mab,mbc->mac", sqrt_info, dpix_dq)
    j_pose = np.einsum("mab,mbc->mac", w_dpix, dq_dzeta)
    j_lm = np.einsum("mab,mcb->mac", w_dpix, rot)  # dq/dl = R^T
    r = np.einsum("mab,mb->ma", sqrt_info, pixel - pixels)

    r[~active] = 0.0
    j_pose[~active] = 0.0
    j_lm[~active] = 0.0
    vals = np.concatenate([j_pose.reshape(m, 12), j_lm.reshape(m, 6)], axis=1)
    return r, vals, active


def batch_photoclinometry(model, rot, t_cam, suns, lms, normals, albedos,
                          scales, biases, brightness, sigma_i):
    """Vectorized photoclinometry residuals/Jacobians for one model."""
    m = len(lms)
    e_vec = t_cam - lms
    norm_e = np.sqrt(np.sum(e_vec * e_vec, axis=1))
    safe_norm = np.maximum(norm_e, _MIN_SEPARATION)
    emit = e_vec / safe_norm[:, None]
    f = np.sum(suns * normals, axis=1)
    w = np.sum(emit * normals, axis=1)
    h = np.sum(suns * emit, axis=1)
    active = ((norm_e >= _MIN_SEPARATION) & (f > 0.0) & (w > 0.0)
              & (h * h < 1.0 - 1e-12))

    fc = np.maximum(f, 1e-9)
    wc = np.maximum(w, 1e-9)
    hc = np.clip(h, -1.0 + 1e-9, 1.0 - 1e-9)
    value, di_df, di_dw, di_dh, di_da, di_dscale, di_dbias = \
        brightness_with_partials_batch(model, scales, biases, albedos, fc, wc, hc)

    inv_sigma = 1.0 / sigma_i
    inv_sigma_col = inv_sigma[:, None] if np.ndim(inv_sigma) else inv_sigma
    dn = d_norm_batch(np.where(active[:, None], e_vec, [1.0, 0.0, 0.0]))
    di_de = np.einsum("mi,mij->mj",
                      di_dw[:, None] * normals + di_dh[:, None] * suns, dn)
    b_sun = tangent_basis_batch(suns)
    b_normal = tangent_basis_batch(normals)

    j_pose = np.zeros((m, 6))
    j_pose[:, 3:] = np.einsum("mi,mij->mj", di_de, rot) * inv_sigma_col
    n_bs = np.einsum("mi,mij->mj", normals, b_sun)
    e_bs = np.einsum("mi,mij->mj", emit, b_sun)
    s_bn = np.einsum("mi,mij->mj", suns, b_normal)
    e_bn = np.einsum("mi,mij->mj", emit, b_normal)
    j_sun = (di_df[:, None] * n_bs + di_dh[:, None] * e_bs) * inv_sigma_col
    j_lm = -di_de * inv_sigma_col
    j_normal = (di_df[:, None] * s_bn + di_dw[:, None] * e_bn) * inv_sigma_col
    j_albedo = (di_da * inv_sigma)[:, None]
    r = ((value - brightness) * inv_sigma)[:, None]

    blocks = [j_pose, j_sun, j_lm, j_normal, j_albedo]
    if not model.calibrated:
        blocks.append((di_dscale * inv_sigma)[:, None])
        blocks.append((di_dbias * inv_sigma)[:, None])
    vals = np.concatenate(blocks, axis=1)
    r[~active] = 0.0
    vals[~active] = 0.0
    return r, vals, active


def batch_smoothness(lms, normals, nbrs, weights):
    """Vectorized smoothness residuals/Jacobians."""
    m = len(lms)
    diff = nbrs - lms
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    active = dist > _MIN_SEPARATION
    safe = np.where(active[:, None], diff, [1.0, 0.0, 0.0])
    direction = safe / np.maximum(dist, _MIN_SEPARATION)[:, None]
    u = np.clip(np.sum(direction * normals, axis=1),
                -1.0 + _ARCCOS_GUARD, 1.0 - _ARCCOS_GUARD)
    sqrt_w = np.sqrt(weights)
    r = (sqrt_w * (np.arccos(u) - 0.5 * np.pi))[:, None]
    dr_du = -sqrt_w / np.sqrt(1.0 - u * u)
    du_dnbr = np.einsum("mi,mij->mj", normals, d_norm_batch(safe))
    b_normal = tangent_basis_batch(normals)
    d_bn = np.einsum("mi,mij->mj", direction, b_normal)
    j_lm = -dr_du[:, None] * du_dnbr
    j_normal = dr_du[:, None] * d_bn
    j_nbr = dr_du[:, None] * du_dnbr
    vals = np.concatenate([j_lm, j_normal, j_nbr], axis=1)
    r[~active] = 0.0
    vals[~active] = 0.0
    return r, vals, active
