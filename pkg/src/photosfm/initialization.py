"""Initialization and alignment procedures.

Landmarks are triangulated by the direct linear transform, correspondence
candidates gated on squared Sampson error, surface normals seeded from k-NN
plane fits, albedos from per-view photometric inversion, and reconstructions
aligned to a reference with a closed-form similarity transform before metric
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.spatial

from .factors import CameraIntrinsics
from .manifold import Pose, normalize, skew
from .photometry import (
    ImagePhotoParams,
    NotIlluminated,
    NotVisible,
    ReflectanceModel,
    disk_function,
    illum_geometry,
    phase_function,
)


class DegenerateGeometry(ValueError):
    """Triangulation system is rank-deficient (parallel or coincident rays)."""


class CheiralityError(ValueError):
    """Triangulated point has non-positive depth in some observing camera."""


class DegenerateConfiguration(ValueError):
    """Point sets too collinear or coincident to define a similarity."""


@dataclass(frozen=True)
class Sim3:
    """Similarity transform x -> scale * R x + t with scale > 0."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_direction(self, d: np.ndarray) -> np.ndarray:
        return self.rotation @ d

    def transform_pose(self, pose: Pose) -> Pose:
        return Pose(self.rotation @ pose.R,
                    self.scale * self.rotation @ pose.t + self.translation)


def _projection_matrix(pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    k_mat = np.array([[intr.fx, 0.0, intr.cx],
                      [0.0, intr.fy, intr.cy],
                      [0.0, 0.0, 1.0]])
    return k_mat @ pose.inverse().matrix()[:3, :]


def triangulate_dlt(observations) -> np.ndarray:
    """Triangulate one landmark from (pose, intrinsics, pixel) observations.

    Solves the stacked homogeneous system by SVD and checks both rank (rays
    must actually intersect) and cheirality (positive depth in every view).
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    rows = []
    for pose, intr, pixel in observations:
        p = _projection_matrix(pose, intr)
        rows.append(pixel[0] * p[2] - p[0])
        rows.append(pixel[1] * p[2] - p[1])
    a = np.asarray(rows)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-9 * s[0]:
        raise DegenerateGeometry("triangulation nullspace has dimension > 1")
    x = vt[-1]
    if abs(x[3]) < 1e-12 * np.linalg.norm(x[:3]):
        raise DegenerateGeometry("triangulated point at infinity (parallel rays)")
    point = x[:3] / x[3]
    for pose, _, _ in observations:
        if pose.transform_inverse(point)[2] <= 0.0:
            raise CheiralityError("triangulated point behind a camera")
    return point


def sampson_gate(pose_a: Pose, pose_b: Pose, intr: CameraIntrinsics,
                 pixel_a: np.ndarray, pixel_b: np.ndarray) -> float:
    """Squared Sampson distance of a putative correspondence under the
    essential geometry induced by the pose pair. Callers keep matches < 1."""
    r_rel = pose_a.R.T @ pose_b.R
    t_rel = pose_a.R.T @ (pose_b.t - pose_a.t)
    essential = skew(t_rel) @ r_rel
    k_mat = np.array([[intr.fx, 0.0, intr.cx],
                      [0.0, intr.fy, intr.cy],
                      [0.0, 0.0, 1.0]])
    k_inv = np.linalg.inv(k_mat)
    fundamental = k_inv.T @ essential @ k_inv
    xa = np.array([pixel_a[0], pixel_a[1], 1.0])
    xb = np.array([pixel_b[0], pixel_b[1], 1.0])
    fxb = fundamental @ xb
    ftxa = fundamental.T @ xa
    num = float(xa @ fxb) ** 2
    den = fxb[0] ** 2 + fxb[1] ** 2 + ftxa[0] ** 2 + ftxa[1] ** 2
    if den == 0.0:
        return 0.0
    return num / den


def init_normals(landmarks: np.ndarray, camera_positions: np.ndarray,
                 k: int = 32) -> np.ndarray:
    """Plane-fit normals from each landmark's k nearest neighbors.

    The normal is the smallest-eigenvalue direction of the neighborhood
    covariance, signed toward the average direction to the observing cameras
    (any imaged surface element must face the cameras).
    """
    landmarks = np.asarray(landmarks, dtype=float)
    camera_positions = np.asarray(camera_positions, dtype=float)
    if len(landmarks) < k + 1:
        raise ValueError(f"need at least {k + 1} landmarks for {k}-NN plane fits")
    tree = scipy.spatial.cKDTree(landmarks)
    _, idx = tree.query(landmarks, k=k + 1)
    normals = np.empty_like(landmarks)
    for j in range(len(landmarks)):
        nbr = landmarks[idx[j]]
        centered = nbr - nbr.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        n = vecs[:, 0]
        toward = camera_positions - landmarks[j]
        toward /= np.linalg.norm(toward, axis=1, keepdims=True)
        if n @ toward.sum(axis=0) < 0.0:
            n = -n
        normals[j] = n
    return normals


def init_albedos(tracks: dict, landmarks: dict, normals: dict, poses: dict,
                 suns: dict, model: ReflectanceModel,
                 image_params: dict | None = None,
                 floor: float = 1e-4) -> dict:
    """Per-landmark albedo averaged over per-view photometric inversions.

    Each valid view contributes (I - bias) / (scale * Lambda * disk); the
    landmark albedo is the mean over views, falling back to the global median
    for landmarks shadowed in every view.
    """
    albedos = {}
    pending = []
    for j, obs in tracks.items():
        samples = []
        for k, _, _, brightness in obs:
            pose = poses[k]
            params = image_params[k] if image_params else ImagePhotoParams()
            emit = normalize(pose.t - landmarks[j])
            geom = illum_geometry(suns[k], emit, normals[j])
            try:
                d = disk_function(model, geom)
            except (NotIlluminated, NotVisible):
                continue
            if model.calibrated:
                denom = phase_function(model, geom.phase) * d
                numer = brightness
            else:
                denom = params.scale * d
                numer = brightness - params.bias
            if denom > 1e-12:
                samples.append(numer / denom)
        if samples:
            albedos[j] = max(float(np.mean(samples)), floor)
        else:
            pending.append(j)
    fallback = float(np.median(list(albedos.values()))) if albedos else 0.2
    for j in pending:
        albedos[j] = fallback
    return albedos


def align_sim3(source: np.ndarray, target: np.ndarray) -> Sim3:
    """Closed-form least-squares similarity mapping source onto target."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or len(source) < 3:
        raise DegenerateConfiguration("need >= 3 paired points")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    ds = source - mu_s
    dt = target - mu_t
    var_s = float((ds * ds).sum()) / len(source)
    cov = dt.T @ ds / len(source)
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300) or var_s < 1e-24:
        raise DegenerateConfiguration("points too collinear or coincident")
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign)) / var_s
    if scale <= 0.0:
        raise DegenerateConfiguration("non-positive similarity scale")
    translation = mu_t - scale * rotation @ mu_s
    return Sim3(scale, rotation, translation)
