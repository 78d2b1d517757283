"""Central finite-difference verification of factor Jacobians.

Perturbations go through each variable's retraction (pose lift, sphere
retraction, additive), so the checks validate the Jacobians in exactly the
local coordinates the optimizer steps in.
"""

import numpy as np

from photosfm.manifold import Pose, normalize, pose_retract, s2_retract, so3_exp, tangent_basis
from photosfm.factors import CameraIntrinsics, KeypointMeas

FD_STEP = 1e-6
REL_TOL = 1e-5


def perturb(value, delta):
    """Apply a local-coordinate perturbation through the value's retraction."""
    if isinstance(value, Pose):
        return pose_retract(value, delta)
    if np.ndim(value) == 0:
        return float(value) + float(delta[0])
    value = np.asarray(value, dtype=float)
    if len(value) == 3 and abs(np.linalg.norm(value) - 1.0) < 1e-9 and len(delta) == 2:
        return s2_retract(value, delta)
    return value + delta


def local_dim(value):
    if isinstance(value, Pose):
        return 6
    if np.ndim(value) == 0:
        return 1
    value = np.asarray(value)
    if len(value) == 3 and abs(np.linalg.norm(value) - 1.0) < 1e-9:
        return 2
    return len(value)


def fd_jacobians(residual_fn, variables: dict, step=FD_STEP):
    """Finite-difference Jacobian blocks of residual_fn(**variables)."""
    blocks = {}
    for name, value in variables.items():
        d = local_dim(value)
        cols = []
        for i in range(d):
            delta = np.zeros(d)
            delta[i] = step
            plus = residual_fn(**{**variables, name: perturb(value, delta)})
            minus = residual_fn(**{**variables, name: perturb(value, -delta)})
            cols.append((plus.r - minus.r) / (2.0 * step))
        blocks[name] = np.column_stack(cols)
    return blocks


def check_factor(residual_fn, variables: dict, rel_tol=REL_TOL, step=FD_STEP):
    """Assert analytic and FD Jacobians agree block-wise in relative Frobenius
    norm. Returns the largest relative error seen."""
    res = residual_fn(**variables)
    assert res.active, "cannot FD-check an inactive factor"
    fd = fd_jacobians(residual_fn, variables, step=step)
    worst = 0.0
    for name, block in fd.items():
        analytic = res.jac[name]
        denom = max(np.linalg.norm(analytic), 1e-6)
        err = np.linalg.norm(block - analytic) / denom
        worst = max(worst, err)
        assert err < rel_tol, (
            f"block {name}: rel err {err:.3e}\nanalytic=\n{analytic}\nfd=\n{block}")
    return worst


# ---------------------------------------------------------------------------
# Random factor configurations
# ---------------------------------------------------------------------------

def random_pose(rng, spread=5.0):
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * spread)


def random_intrinsics(rng):
    return CameraIntrinsics(fx=rng.uniform(400, 1200), fy=rng.uniform(400, 1200),
                            cx=rng.uniform(300, 700), cy=rng.uniform(300, 700))


def random_reprojection_config(rng):
    """Pose observing a landmark in front of the camera, offset measurement."""
    pose = random_pose(rng)
    depth = rng.uniform(2.0, 20.0)
    cam_point = np.concatenate([rng.normal(size=2) * 0.2 * depth, [depth]])
    landmark = pose.transform(cam_point)
    intr = random_intrinsics(rng)
    a = rng.normal(size=(2, 2)) * 0.2
    cov = a @ a.T + np.eye(2)
    from photosfm.factors import project
    pixel = project(pose, landmark, intr) + rng.normal(size=2) * 2.0
    meas = KeypointMeas(pixel=pixel, brightness=0.0, pixel_cov=cov, brightness_sigma=1.0)
    return pose, landmark, intr, meas


def random_photo_config(rng, model, sigma_i=0.01):
    """Illuminated, visible, non-degenerate configuration for one model."""
    while True:
        normal = normalize(rng.normal(size=3))
        b = tangent_basis(normal)
        sun = s2_retract(normal, rng.uniform(0.05, 1.2) * normalize(rng.normal(size=2)), basis=b)
        emit = s2_retract(normal, rng.uniform(0.05, 1.2) * normalize(rng.normal(size=2)), basis=b)
        h = float(sun @ emit)
        if sun @ normal > 0.05 and emit @ normal > 0.05 and 1 - h * h > 0.01:
            break
    landmark = rng.normal(size=3)
    dist = rng.uniform(2.0, 30.0)
    cam_pos = landmark + dist * emit
    pose = Pose(so3_exp(rng.normal(size=3)), cam_pos)
    albedo = rng.uniform(0.05, 0.95)
    from photosfm.photometry import ImagePhotoParams
    params = ImagePhotoParams(scale=rng.uniform(0.5, 2.0), bias=rng.normal() * 0.05)
    from photosfm.factors import photoclinometry_factor
    clean = photoclinometry_factor(
        pose, sun, landmark, normal, albedo, params, model,
        KeypointMeas(np.zeros(2), 0.0, np.eye(2), sigma_i))
    brightness = clean.r[0] * sigma_i + rng.normal() * sigma_i
    meas = KeypointMeas(np.zeros(2), brightness, np.eye(2), sigma_i)
    return pose, sun, landmark, normal, albedo, params, meas


def random_sun_config(rng):
    pose = random_pose(rng)
    sun = normalize(rng.normal(size=3))
    meas = s2_retract(pose.R.T @ sun, rng.normal(size=2) * 0.2)
    return pose, sun, meas


def random_smoothness_config(rng):
    while True:
        landmark = rng.normal(size=3)
        neighbor = landmark + rng.normal(size=3) * rng.uniform(0.01, 1.0)
        normal = normalize(rng.normal(size=3))
        diff = neighbor - landmark
        if np.linalg.norm(diff) < 1e-6:
            continue
        u = diff / np.linalg.norm(diff) @ normal
        if abs(u) < 0.95:
            return landmark, normal, neighbor
