import numpy as np
import pytest

from photosfm.factors import PriorFactor, ReprojectionFactor, KeypointMeas
from photosfm.graph import (
    DuplicateKeyError,
    FactorGraph,
    LMConfig,
    Termination,
    VariableKey,
    VarKind,
    albedo_key,
    bias_key,
    landmark_key,
    normal_key,
    optimize_lm,
    pose_key,
    scale_key,
    sun_key,
)
from photosfm.manifold import Pose, normalize, pose_local, pose_retract, s2_retract

from toys import INTR, toy_graph, toy_scene


def dense_stacked_system(graph):
    """Oracle: stack per-factor Jacobians into a dense J and form J^T J."""
    offsets = graph.ordering()
    n = graph.total_local_dim()
    rows = sum(f.dim for f in graph.factors)
    jac = np.zeros((rows, n))
    r = np.zeros(rows)
    row = 0
    for f in graph.factors:
        res = f.linearize(graph.values)
        if res.active:
            r[row:row + f.dim] = res.r
            for key, block in res.jac.items():
                if key in offsets:
                    c = offsets[key]
                    jac[row:row + f.dim, c:c + block.shape[1]] = block
        row += f.dim
    return jac.T @ jac, jac.T @ r, 0.5 * float(r @ r)


class TestVariables:
    def test_add_pose_local_dim(self):
        g = FactorGraph()
        g.add_variable(pose_key(0), Pose.identity())
        assert g.total_local_dim() == 6

    def test_duplicate_key(self):
        g = FactorGraph()
        g.add_variable(pose_key(0), Pose.identity())
        with pytest.raises(DuplicateKeyError):
            g.add_variable(pose_key(0), Pose.identity())

    def test_full_block_set_dimension_bookkeeping(self):
        # 2 images, 3 landmarks: 2*6 + 3*3 + 3*2 + 3*1 + 2*2 = 34 (+4 uncal).
        g = FactorGraph()
        for k in range(2):
            g.add_variable(pose_key(k), Pose.identity())
            g.add_variable(sun_key(k), np.array([0.0, 0.0, 1.0]))
        for j in range(3):
            g.add_variable(landmark_key(j), np.zeros(3))
            g.add_variable(normal_key(j), np.array([0.0, 0.0, 1.0]))
            g.add_variable(albedo_key(j), 0.2)
        assert g.total_local_dim() == 34
        for k in range(2):
            g.add_variable(scale_key(k), 1.0)
            g.add_variable(bias_key(k), 0.0)
        assert g.total_local_dim() == 38

    def test_factor_with_unknown_key_rejected(self):
        g = FactorGraph()
        with pytest.raises(KeyError):
            g.add_factor(PriorFactor(albedo_key(0), 0.2, 0.01))


class TestLinearize:
    def test_single_prior_system_is_inverse_covariance(self):
        g = FactorGraph()
        g.add_variable(landmark_key(0), np.array([1.0, 2.0, 3.0]))
        cov = np.diag([0.04, 0.09, 0.25])
        g.add_factor(PriorFactor(landmark_key(0), np.array([1.0, 2.0, 3.0]), cov))
        system = g.linearize()
        assert np.allclose(system.hessian.toarray(), np.linalg.inv(cov), atol=1e-12)

    def test_independent_landmarks_block_diagonal(self):
        g = FactorGraph()
        for j in range(2):
            g.add_variable(landmark_key(j), np.ones(3) * j)
            g.add_factor(PriorFactor(landmark_key(j), np.zeros(3), np.eye(3)))
        h = g.linearize().hessian.toarray()
        assert np.all(h[:3, 3:] == 0.0)
        assert np.all(h[3:, :3] == 0.0)

    def test_matches_dense_stacking_oracle(self):
        g = toy_graph(n_poses=2, n_landmarks=5, noise=0.5)
        system = g.linearize()
        h_dense, grad_dense, cost_dense = dense_stacked_system(g)
        assert np.allclose(system.hessian.toarray(), h_dense, atol=1e-8)
        assert np.allclose(system.gradient, grad_dense, atol=1e-10)
        assert abs(system.cost - cost_dense) < 1e-10

    def test_frozen_variables_excluded(self):
        g = toy_graph(n_poses=2, n_landmarks=5)
        full = g.total_local_dim()
        g.freeze(pose_key(0))
        assert g.total_local_dim() == full - 6
        system = g.linearize()
        assert system.hessian.shape == (full - 6, full - 6)
        assert pose_key(0) not in system.offsets

    def test_ordering_sorted_by_kind_then_index(self):
        g = toy_graph(n_poses=2, n_landmarks=3)
        keys = list(g.ordering())
        assert keys == sorted(keys, key=VariableKey.sort_key)
        assert keys[0].kind is VarKind.POSE


class TestEvaluateCost:
    def test_empty_graph_zero(self):
        assert FactorGraph().evaluate_cost() == 0.0

    def test_single_factor_half_norm_squared(self):
        g = FactorGraph()
        g.add_variable(landmark_key(0), np.array([2.0, 0.0, 0.0]))
        g.add_factor(PriorFactor(landmark_key(0), np.zeros(3), np.eye(3)))
        assert abs(g.evaluate_cost() - 2.0) < 1e-12

    def test_matches_per_factor_sum(self):
        g = toy_graph(noise=1.0)
        total = sum(f.linearize(g.values).cost for f in g.factors)
        assert abs(g.evaluate_cost() - total) < 1e-10
        assert abs(g.linearize().cost - total) < 1e-10


class TestOptimizeLM:
    def test_already_at_optimum(self):
        g = toy_graph(noise=0.0, smoothness=False, gauge_priors=True)
        g, report = optimize_lm(g, LMConfig(max_iter=50))
        assert report.final_cost < 1e-12
        assert report.iterations <= 1

    def test_prior_only_quadratic_converges_fast(self):
        # Linear problem: two damped Gauss-Newton steps land on the prior mean.
        g = FactorGraph()
        g.add_variable(albedo_key(0), 0.9)
        g.add_factor(PriorFactor(albedo_key(0), 0.3, 0.01))
        g, report = optimize_lm(g, LMConfig(max_iter=2))
        assert abs(g.values[albedo_key(0)] - 0.3) < 1e-8
        assert report.iterations <= 2

    def test_cost_trace_non_increasing(self):
        g = toy_graph(noise=1.0)
        # Perturb initialization away from ground truth.
        rng = np.random.default_rng(77)
        for key in list(g.values):
            if key.kind is VarKind.LANDMARK:
                g.values[key] = g.values[key] + rng.normal(size=3) * 0.02
            elif key.kind is VarKind.NORMAL:
                g.values[key] = s2_retract(g.values[key], rng.normal(size=2) * 0.1)
        g, report = optimize_lm(g)
        trace = np.array(report.cost_trace)
        assert np.all(np.diff(trace) <= 0.0)
        assert report.termination in (Termination.CONVERGED, Termination.MAX_ITER)

    def test_recovers_perturbed_toy_scene(self):
        g = toy_graph(n_poses=3, n_landmarks=6, noise=0.0, smoothness=False)
        poses, suns, landmarks, normals, albedos = toy_scene(3, 6)
        rng = np.random.default_rng(5)
        for j in range(6):
            g.values[landmark_key(j)] = landmarks[j] + rng.normal(size=3) * 0.01
            g.values[normal_key(j)] = s2_retract(normals[j], rng.normal(size=2) * 0.05)
            g.values[albedo_key(j)] = float(albedos[j] * rng.uniform(0.9, 1.1))
        g, report = optimize_lm(g, LMConfig(max_iter=100, rel_cost_tol=1e-14))
        assert report.final_cost < 1e-10
        for j in range(6):
            assert np.linalg.norm(g.values[landmark_key(j)] - landmarks[j]) < 1e-6
            assert abs(g.values[albedo_key(j)] - albedos[j]) < 1e-6

    def test_pose_prior_holds_pose(self):
        # A sigma 1e-6 prior keeps the pose within 1e-5 of the prior mean.
        g = toy_graph(n_poses=2, n_landmarks=5, noise=0.5, gauge_priors=False)
        prior_pose = g.values[pose_key(0)]
        g.add_factor(PriorFactor(pose_key(0), prior_pose, np.eye(6) * 1e-12))
        g.add_factor(PriorFactor(landmark_key(0), g.values[landmark_key(0)].copy(),
                                 np.eye(3) * 1e-12))
        g.values[pose_key(0)] = pose_retract(prior_pose, np.full(6, 1e-3))
        g, _ = optimize_lm(g)
        assert np.abs(pose_local(prior_pose, g.values[pose_key(0)])).max() < 1e-5

    def test_no_unfrozen_variables_rejected(self):
        g = FactorGraph()
        g.add_variable(albedo_key(0), 0.5)
        g.freeze(albedo_key(0))
        with pytest.raises(ValueError):
            optimize_lm(g)

    def test_frozen_equals_tight_prior(self):
        def build():
            return toy_graph(n_poses=2, n_landmarks=5, noise=0.3, gauge_priors=False)

        frozen = build()
        frozen.freeze(pose_key(0))
        frozen.add_factor(PriorFactor(landmark_key(0),
                                      frozen.values[landmark_key(0)].copy(),
                                      np.eye(3) * 1e-24))
        frozen, _ = optimize_lm(frozen)

        pinned = build()
        pinned.add_factor(PriorFactor(pose_key(0), pinned.values[pose_key(0)],
                                      np.eye(6) * 1e-24))
        pinned.add_factor(PriorFactor(landmark_key(0),
                                      pinned.values[landmark_key(0)].copy(),
                                      np.eye(3) * 1e-24))
        pinned, _ = optimize_lm(pinned)

        for j in range(5):
            assert np.linalg.norm(frozen.values[landmark_key(j)]
                                  - pinned.values[landmark_key(j)]) < 1e-6
        for k in range(2):
            delta = pose_local(frozen.values[pose_key(k)], pinned.values[pose_key(k)])
            assert np.abs(delta).max() < 1e-6

    def test_manifold_update_consistency(self):
        g = toy_graph(noise=0.2)
        system = g.linearize()
        rng = np.random.default_rng(99)
        step = rng.normal(size=system.total_dim) * 1e-3
        candidate = g.retracted_values(step, system.offsets)
        cost_via_values = g.linearize(candidate).cost
        g.values = candidate
        assert abs(g.linearize().cost - cost_via_values) < 1e-12

    def test_trace_log_written(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        g = toy_graph(noise=0.5)
        optimize_lm(g, LMConfig(max_iter=5, trace_path=str(path)))
        import json
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines and all({"iteration", "cost", "lambda", "accepted"} <= set(rec) for rec in lines)
