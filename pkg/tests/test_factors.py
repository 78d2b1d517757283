import math

import numpy as np
import pytest

from photosfm.factors import (
    BehindCamera,
    CameraIntrinsics,
    KeypointMeas,
    d_norm,
    distance_prior_factor,
    photoclinometry_factor,
    pose_prior_factor,
    project,
    reprojection_factor,
    scalar_prior_factor,
    smoothness_factor,
    sun_vector_factor,
    unit_prior_factor,
    vector_prior_factor,
)
from photosfm.manifold import Pose, normalize, pose_retract, s2_retract, so3_exp
from photosfm.photometry import ImagePhotoParams, ModelKind, make_model

import fdcheck
from fdcheck import (
    check_factor,
    random_photo_config,
    random_pose,
    random_reprojection_config,
    random_smoothness_config,
    random_sun_config,
)

RNG = np.random.default_rng(42)
K_TEST = CameraIntrinsics(100.0, 100.0, 512.0, 512.0)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        p = project(Pose.identity(), np.array([0.0, 0.0, 10.0]), K_TEST)
        assert np.allclose(p, [512.0, 512.0])

    def test_lateral_offset(self):
        p = project(Pose.identity(), np.array([1.0, 0.0, 10.0]), K_TEST)
        assert np.allclose(p, [522.0, 512.0])

    def test_matches_homogeneous_oracle(self):
        # Independent oracle: 3x4 projection matrix times homogeneous point.
        for _ in range(50):
            pose = random_pose(RNG)
            depth = RNG.uniform(1.0, 30.0)
            landmark = pose.transform(np.array([RNG.normal(), RNG.normal(), depth]))
            k_mat = np.array([[K_TEST.fx, 0, K_TEST.cx],
                              [0, K_TEST.fy, K_TEST.cy],
                              [0, 0, 1.0]])
            proj = k_mat @ pose.inverse().matrix()[:3, :]
            hom = proj @ np.append(landmark, 1.0)
            assert np.allclose(project(pose, landmark, K_TEST), hom[:2] / hom[2], atol=1e-9)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project(Pose.identity(), np.array([0.0, 0.0, -1.0]), K_TEST)


class TestReprojectionFactor:
    def test_zero_residual_at_exact_projection(self):
        pose = random_pose(RNG)
        landmark = pose.transform(np.array([0.3, -0.2, 5.0]))
        meas = KeypointMeas(project(pose, landmark, K_TEST), 0.0, np.eye(2), 1.0)
        res = reprojection_factor(pose, landmark, K_TEST, meas)
        assert res.active
        assert np.abs(res.r).max() < 1e-9

    def test_one_pixel_offset_unit_residual(self):
        pose = Pose.identity()
        landmark = np.array([0.0, 0.0, 10.0])
        pixel = project(pose, landmark, K_TEST) + np.array([1.0, 0.0])
        res = reprojection_factor(pose, landmark, K_TEST,
                                  KeypointMeas(pixel, 0.0, np.eye(2), 1.0))
        assert abs(np.linalg.norm(res.r) - 1.0) < 1e-12

    def test_behind_camera_deactivates(self):
        pose = Pose.identity()
        res = reprojection_factor(pose, np.array([0.0, 0.0, -5.0]), K_TEST,
                                  KeypointMeas(np.zeros(2), 0.0, np.eye(2), 1.0))
        assert not res.active
        assert np.all(res.r == 0.0)
        assert all(np.all(b == 0.0) for b in res.jac.values())

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            pose, landmark, intr, meas = random_reprojection_config(rng)
            check_factor(
                lambda pose, landmark: reprojection_factor(pose, landmark, intr, meas),
                {"pose": pose, "landmark": landmark})


class TestPhotoclinometryFactor:
    def make_consistent(self, model, rng, with_noise=0.0):
        pose, sun, landmark, normal, albedo, params, meas = random_photo_config(rng, model)
        return pose, sun, landmark, normal, albedo, params, meas

    def test_zero_residual_when_measurement_matches(self):
        rng = np.random.default_rng(3)
        model = make_model(ModelKind.LUNAR_LAMBERT, "vesta")
        pose, sun, landmark, normal, albedo, params, _ = random_photo_config(rng, model)
        res0 = photoclinometry_factor(pose, sun, landmark, normal, albedo, params, model,
                                      KeypointMeas(np.zeros(2), 0.0, np.eye(2), 0.01))
        exact = res0.r[0] * 0.01
        res = photoclinometry_factor(pose, sun, landmark, normal, albedo, params, model,
                                     KeypointMeas(np.zeros(2), exact, np.eye(2), 0.01))
        assert abs(res.r[0]) < 1e-12

    def test_albedo_gradient_at_overhead_is_unity(self):
        # Overhead geometry, calibrated: dI/da = Lambda(0) * d(0,0,0) = 1.
        model = make_model(ModelKind.LUNAR_LAMBERT, "vesta")
        n = np.array([0.0, 0.0, 1.0])
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 4.0]))
        # Shift sun marginally off the exact zero-phase axis to stay in the
        # differentiable domain.
        sun = normalize(np.array([1e-4, 0.0, 1.0]))
        res = photoclinometry_factor(pose, sun, np.zeros(3), n, 0.3,
                                     ImagePhotoParams(), model,
                                     KeypointMeas(np.zeros(2), 0.3, np.eye(2), 1.0))
        assert abs(res.jac["albedo"][0, 0] - 1.0) < 1e-3

    def test_shadowed_deactivates(self):
        model = make_model(ModelKind.MCEWEN)
        n = np.array([0.0, 0.0, 1.0])
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 4.0]))
        sun = np.array([0.0, 0.0, -1.0])  # below the horizon
        res = photoclinometry_factor(pose, sun, np.zeros(3), n, 0.3,
                                     ImagePhotoParams(), model,
                                     KeypointMeas(np.zeros(2), 0.1, np.eye(2), 0.01))
        assert not res.active
        assert set(res.jac) == {"pose", "sun", "landmark", "normal", "albedo", "scale", "bias"}
        assert all(np.all(v == 0.0) for v in res.jac.values())

    @pytest.mark.parametrize("kind", list(ModelKind))
    @pytest.mark.parametrize("calibrated", [True, False])
    def test_jacobians_match_finite_differences(self, kind, calibrated):
        rng = np.random.default_rng(hash((kind.value, calibrated)) % 2**32)
        model = make_model(kind, "vesta", calibrated=calibrated)
        for _ in range(40):
            pose, sun, landmark, normal, albedo, params, meas = random_photo_config(rng, model)
            if calibrated:
                def fn(pose, sun, landmark, normal, albedo):
                    return photoclinometry_factor(pose, sun, landmark, normal,
                                                  albedo, params, model, meas)
                variables = {"pose": pose, "sun": sun, "landmark": landmark,
                             "normal": normal, "albedo": albedo}
            else:
                def fn(pose, sun, landmark, normal, albedo, scale, bias):
                    p = ImagePhotoParams(scale=scale, bias=bias)
                    return photoclinometry_factor(pose, sun, landmark, normal,
                                                  albedo, p, model, meas)
                variables = {"pose": pose, "sun": sun, "landmark": landmark,
                             "normal": normal, "albedo": albedo,
                             "scale": params.scale, "bias": params.bias}
            check_factor(fn, variables)

    def test_sigma_scaling(self):
        # Scaling sigma by c scales residual and Jacobians by 1/c exactly.
        rng = np.random.default_rng(5)
        model = make_model(ModelKind.MINNAERT, "ceres")
        pose, sun, landmark, normal, albedo, params, meas = random_photo_config(rng, model)
        meas2 = KeypointMeas(meas.pixel, meas.brightness, meas.pixel_cov,
                             meas.brightness_sigma * 4.0)
        r1 = photoclinometry_factor(pose, sun, landmark, normal, albedo, params, model, meas)
        r2 = photoclinometry_factor(pose, sun, landmark, normal, albedo, params, model, meas2)
        assert np.allclose(r1.r, 4.0 * r2.r)
        for k in r1.jac:
            assert np.allclose(r1.jac[k], 4.0 * r2.jac[k])


class TestSunVectorFactor:
    def test_zero_residual(self):
        s = normalize(np.array([0.3, -0.5, 0.8]))
        res = sun_vector_factor(Pose.identity(), s, s.copy(), 1e-3)
        assert np.abs(res.r).max() < 1e-12

    def test_small_rotation_tangent_distance(self):
        s = np.array([0.0, 0.0, 1.0])
        rotated = s2_retract(s, np.array([0.01, 0.0]))
        res = sun_vector_factor(Pose.identity(), rotated, s, 1.0)
        assert abs(np.linalg.norm(res.r) - 0.01) < 1e-6

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            pose, sun, meas = random_sun_config(rng)
            check_factor(
                lambda pose, sun: sun_vector_factor(pose, sun, meas, 1e-3),
                {"pose": pose, "sun": sun})


class TestSmoothnessFactor:
    def test_in_plane_neighbor_zero_residual(self):
        landmark = np.zeros(3)
        normal = np.array([0.0, 0.0, 1.0])
        neighbor = np.array([1.0, 2.0, 0.0])
        res = smoothness_factor(landmark, normal, neighbor, 1e-4)
        assert abs(res.r[0]) < 1e-12

    def test_parallel_direction_max_residual(self):
        landmark = np.zeros(3)
        normal = np.array([0.0, 0.0, 1.0])
        neighbor = np.array([0.0, 0.0, 2.0])
        res = smoothness_factor(landmark, normal, neighbor, 1e-4)
        assert abs(abs(res.r[0]) / math.sqrt(1e-4) - math.pi / 2) < 1e-4

    def test_coincident_deactivates(self):
        landmark = np.ones(3)
        res = smoothness_factor(landmark, np.array([0.0, 0.0, 1.0]),
                                landmark + 1e-12, 1e-4)
        assert not res.active

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            landmark, normal, neighbor = random_smoothness_config(rng)
            check_factor(
                lambda landmark, normal, neighbor: smoothness_factor(
                    landmark, normal, neighbor, 1e-4),
                {"landmark": landmark, "normal": normal, "neighbor": neighbor})


class TestPriors:
    def test_zero_at_prior(self):
        pose = random_pose(RNG)
        res = pose_prior_factor(pose, pose, np.eye(6))
        assert np.abs(res.r).max() < 1e-12
        v = normalize(np.array([1.0, 2.0, 2.0]))
        assert np.abs(unit_prior_factor(v, v.copy(), 0.1).r).max() < 1e-12
        assert scalar_prior_factor(0.7, 0.7, 0.1).r[0] == 0.0

    def test_unit_prior_definition(self):
        from photosfm.manifold import s2_local
        prior = normalize(np.array([0.2, 0.4, 0.9]))
        value = s2_retract(prior, np.array([0.3, -0.1]))
        res = unit_prior_factor(value, prior, 0.5)
        assert np.allclose(res.r, s2_local(prior, value) / 0.5)

    def test_pose_prior_jacobians(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            prior = random_pose(rng)
            value = pose_retract(prior, rng.normal(size=6) * 0.4)
            sigmas = rng.uniform(0.05, 2.0, size=6)
            w = np.diag(1.0 / sigmas)
            check_factor(lambda value: pose_prior_factor(value, prior, w),
                         {"value": value})

    def test_unit_prior_jacobians(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            prior = normalize(rng.normal(size=3))
            value = s2_retract(prior, rng.normal(size=2) * 0.4)
            check_factor(lambda value: unit_prior_factor(value, prior, 0.2),
                         {"value": value})

    def test_vector_prior_jacobians(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            prior = rng.normal(size=3)
            value = prior + rng.normal(size=3) * 0.5
            a = rng.normal(size=(3, 3)) * 0.1
            cov = a @ a.T + np.eye(3)
            w = np.linalg.inv(np.linalg.cholesky(cov))
            check_factor(lambda value: vector_prior_factor(value, prior, w),
                         {"value": value})

    def test_distance_prior_jacobians(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            anchor = rng.normal(size=3) * 3
            landmark = anchor + rng.normal(size=3)
            check_factor(
                lambda landmark: distance_prior_factor(landmark, anchor, 1.3, 0.1),
                {"landmark": landmark})


class TestDNorm:
    def test_projects_out_input_direction(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            v = rng.normal(size=3) * rng.uniform(0.1, 10)
            assert np.abs(d_norm(v) @ v).max() < 1e-12

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(37)
        v = rng.normal(size=3)
        eps = 1e-7
        fd = np.zeros((3, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            fd[:, i] = ((v + d) / np.linalg.norm(v + d) - (v - d) / np.linalg.norm(v - d)) / (2 * eps)
        assert np.allclose(fd, d_norm(v), atol=1e-9)
