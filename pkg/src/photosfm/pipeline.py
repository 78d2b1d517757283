"""Batch pipeline: bundle ingestion, graph construction, optimization.

Builds the full photoclinometry-aware bundle-adjustment graph from a
measurement bundle (reprojection + brightness + Sun-vector + smoothness
factors), seeds it with triangulated landmarks, plane-fit normals and
photometrically inverted albedos, fixes the gauge with a strong pose prior
plus a landmark-distance prior, and runs Levenberg-Marquardt.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.spatial

from .factors import (
    CameraIntrinsics,
    DistancePriorFactor,
    KeypointMeas,
    PhotoclinometryFactor,
    PriorFactor,
    ReprojectionFactor,
    SmoothnessFactor,
    SunVectorFactor,
    predict_track_brightness,
)
from .graph import (
    FactorGraph,
    LMConfig,
    OptimizerReport,
    albedo_key,
    bias_key,
    landmark_key,
    normal_key,
    optimize_lm,
    pose_key,
    scale_key,
    sun_key,
)
from .initialization import (
    CheiralityError,
    DegenerateGeometry,
    align_sim3,
    init_albedos,
    init_normals,
    triangulate_dlt,
)
from .manifold import Pose, normalize, pose_retract
from .metrics import albedo_alignment_scale, build_report, photometric_error
from .photometry import ImagePhotoParams, ReflectanceModel, make_model, model_from_config
from .synth import MeasurementBundle

_GAUGE_SIGMA = 1e-6


class DataError(ValueError):
    """Bundle violates an ingestion precondition."""


@dataclass
class PipelineConfig:
    """Resolved run configuration; defaults follow the reference constants
    (unit pixel covariance, sigma_i 0.01 calibrated / 0.5 uncalibrated,
    sigma_sun 1e-3, smoothness weight 1e-4 over 4 neighbors, tracks >= 6)."""

    mode: str = "synthetic"
    model_kind: str = "lunar_lambert"
    body: str = "vesta"
    calibrated: bool = True
    sigma_pixel: float = 1.0
    sigma_i_calibrated: float = 0.01
    sigma_i_uncalibrated: float = 0.5
    sigma_sun: float = 1e-3
    smoothness_weight: float = 1e-4
    smoothness_neighbors: int = 4
    min_track_length: int = 6
    knn_normals: int = 32
    max_iter: int = 100
    lambda0: float = 1e-4
    lambda_factor: float = 10.0
    rel_cost_tol: float = 1e-8
    abs_grad_tol: float = 1e-10
    seed: int = 0
    output_dir: str = "out"
    explicit_model: dict | None = None
    # False drops the photoclinometry, Sun-vector and smoothness factors,
    # leaving plain bundle adjustment (the SfM comparison baseline).
    photoclinometry: bool = True

    @property
    def sigma_i(self) -> float:
        return self.sigma_i_calibrated if self.calibrated else self.sigma_i_uncalibrated

    def model(self) -> ReflectanceModel:
        if self.explicit_model is not None:
            return model_from_config(self.explicit_model)
        return make_model(self.model_kind, self.body, calibrated=self.calibrated)

    def lm_config(self, trace_path=None) -> LMConfig:
        return LMConfig(max_iter=self.max_iter, lambda0=self.lambda0,
                        lambda_factor=self.lambda_factor,
                        rel_cost_tol=self.rel_cost_tol,
                        abs_grad_tol=self.abs_grad_tol, trace_path=trace_path)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        return PipelineConfig(**data)


@dataclass
class Solution:
    """Optimized variable values plus per-track photometric errors."""

    poses: dict[int, Pose]
    suns: dict[int, np.ndarray]
    landmarks: dict[int, np.ndarray]
    normals: dict[int, np.ndarray]
    albedos: dict[int, float]
    scales: dict[int, float]
    biases: dict[int, float]
    intrinsics: dict[int, CameraIntrinsics]
    model: ReflectanceModel
    report: OptimizerReport | None = None
    track_photometric: dict[int, float] = field(default_factory=dict)

    def landmark_ids(self) -> list[int]:
        return sorted(self.landmarks)

    def image_params(self, k: int) -> ImagePhotoParams:
        if self.model.calibrated:
            return ImagePhotoParams()
        return ImagePhotoParams(scale=self.scales[k], bias=self.biases[k])


def perturb_poses(poses: dict[int, Pose], rot_deg: float, pos_frac: float,
                  seed: int = 0) -> dict[int, Pose]:
    """Perturb each pose by a random rotation of rot_deg degrees and a random
    position offset of pos_frac of its distance to the origin."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in sorted(poses):
        pose = poses[k]
        axis = normalize(rng.normal(size=3))
        gamma = axis * np.radians(rot_deg)
        tau = normalize(rng.normal(size=3)) * pos_frac * np.linalg.norm(pose.t)
        out[k] = pose_retract(pose, np.concatenate([gamma, tau]))
    return out


def initialize_landmarks(bundle: MeasurementBundle) -> dict[int, np.ndarray]:
    """Bundle-provided landmarks, or DLT triangulation from the tracks."""
    if bundle.landmarks:
        return {j: np.asarray(bundle.landmarks[j], dtype=float)
                for j in bundle.tracks if j in bundle.landmarks}
    landmarks = {}
    for j, obs in bundle.tracks.items():
        observations = [(bundle.poses[k], bundle.intrinsics[k], np.array([u, v]))
                        for k, u, v, _ in obs]
        try:
            landmarks[j] = triangulate_dlt(observations)
        except (DegenerateGeometry, CheiralityError):
            continue
    return landmarks


def build_graph(bundle: MeasurementBundle, config: PipelineConfig):
    """Construct the optimization graph and its initial values.

    Returns (graph, landmark_ids). Raises DataError when every track is
    shorter than the minimum length gate.
    """
    model = config.model()
    short = {j for j, obs in bundle.tracks.items()
             if len(obs) < config.min_track_length}
    usable = {j: obs for j, obs in bundle.tracks.items() if j not in short}
    if not usable:
        raise DataError(
            f"no usable tracks: all {len(bundle.tracks)} tracks have fewer than "
            f"{config.min_track_length} observations (minimum track length gate)")

    bundle = MeasurementBundle(bundle.intrinsics, bundle.poses, bundle.sun_meas,
                               bundle.sigma_sun, usable, bundle.sigma_pixel,
                               bundle.sigma_i, bundle.landmarks)

    landmarks = initialize_landmarks(bundle)
    ids = sorted(landmarks)
    if not ids:
        raise DataError("no tracks survived triangulation")
    positions = np.array([landmarks[j] for j in ids])
    camera_positions = np.array([bundle.poses[k].t for k in sorted(bundle.poses)])
    knn = min(config.knn_normals, len(ids) - 1)
    normal_arr = init_normals(positions, camera_positions, k=knn)
    normals = {j: normal_arr[i] for i, j in enumerate(ids)}

    suns = {k: bundle.poses[k].R @ bundle.sun_meas[k] for k in sorted(bundle.poses)}

    albedos = init_albedos(
        {j: bundle.tracks[j] for j in ids}, landmarks, normals,
        bundle.poses, suns, model,
        image_params=None if model.calibrated else
        {k: ImagePhotoParams() for k in bundle.poses})

    scales = {}
    biases = {}
    if not model.calibrated:
        per_image_brightness = {k: [] for k in bundle.poses}
        per_image_denominator = {k: [] for k in bundle.poses}
        for j in ids:
            for k, u, v, brightness in bundle.tracks[j]:
                value = predict_track_brightness(
                    bundle.poses[k], suns[k], landmarks[j], normals[j],
                    albedos[j], ImagePhotoParams(), model)
                if value is not None and value > 1e-12:
                    per_image_brightness[k].append(brightness)
                    per_image_denominator[k].append(value)
        for k in sorted(bundle.poses):
            if per_image_denominator[k]:
                scales[k] = max(float(np.median(per_image_brightness[k]))
                                / float(np.median(per_image_denominator[k])), 1e-6)
            else:
                scales[k] = 1.0
            biases[k] = 0.0

    graph = FactorGraph()
    image_ids = sorted(bundle.poses)
    for k in image_ids:
        graph.add_variable(pose_key(k), bundle.poses[k])
        graph.add_variable(sun_key(k), suns[k])
        if not model.calibrated:
            graph.add_variable(scale_key(k), scales[k])
            graph.add_variable(bias_key(k), biases[k])
    for j in ids:
        graph.add_variable(landmark_key(j), landmarks[j])
        graph.add_variable(normal_key(j), normals[j])
        graph.add_variable(albedo_key(j), albedos[j])

    pixel_cov = np.eye(2) * config.sigma_pixel**2
    for j in ids:
        for k, u, v, brightness in bundle.tracks[j]:
            meas = KeypointMeas(np.array([u, v]), brightness, pixel_cov,
                                bundle.sigma_i)
            graph.add_factor(ReprojectionFactor(pose_key(k), landmark_key(j),
                                                bundle.intrinsics[k], meas))
            if config.photoclinometry:
                graph.add_factor(PhotoclinometryFactor(
                    pose_key(k), sun_key(k), landmark_key(j), normal_key(j),
                    albedo_key(j), model, meas,
                    scale_key=None if model.calibrated else scale_key(k),
                    bias_key=None if model.calibrated else bias_key(k)))
    if config.photoclinometry:
        for k in image_ids:
            graph.add_factor(SunVectorFactor(pose_key(k), sun_key(k),
                                             bundle.sun_meas[k], bundle.sigma_sun))
    else:
        # Plain bundle adjustment: photometric variables stay at their
        # initialization and are excluded from the optimization.
        for k in image_ids:
            graph.freeze(sun_key(k))
            if not model.calibrated:
                graph.freeze(scale_key(k))
                graph.freeze(bias_key(k))
        for j in ids:
            graph.freeze(normal_key(j))
            graph.freeze(albedo_key(j))

    if (config.photoclinometry and config.smoothness_weight > 0.0
            and len(ids) > config.smoothness_neighbors):
        tree = scipy.spatial.cKDTree(positions)
        _, nbr = tree.query(positions, k=config.smoothness_neighbors + 1)
        for i, j in enumerate(ids):
            for col in range(1, config.smoothness_neighbors + 1):
                graph.add_factor(SmoothnessFactor(
                    landmark_key(j), normal_key(j),
                    landmark_key(ids[nbr[i, col]]), config.smoothness_weight))

    # Gauge: pin pose 0 strongly and fix the remaining scale freedom (scaling
    # about the pose-0 camera center) with a landmark-distance prior.
    first = image_ids[0]
    graph.add_factor(PriorFactor(pose_key(first), bundle.poses[first],
                                 np.eye(6) * _GAUGE_SIGMA**2))
    anchor = bundle.poses[first].t
    dist = float(np.linalg.norm(landmarks[ids[0]] - anchor))
    graph.add_factor(DistancePriorFactor(landmark_key(ids[0]), anchor, dist,
                                         _GAUGE_SIGMA * max(dist, 1.0)))
    if not model.calibrated and config.photoclinometry:
        # The global albedo/scale product is unobservable; pin image 0's scale.
        graph.add_factor(PriorFactor(scale_key(first), scales[first],
                                     _GAUGE_SIGMA**2))
    return graph, ids


def extract_solution(graph: FactorGraph, ids, bundle: MeasurementBundle,
                     model: ReflectanceModel,
                     report: OptimizerReport | None = None) -> Solution:
    image_ids = sorted(bundle.poses)
    sol = Solution(
        poses={k: graph.values[pose_key(k)] for k in image_ids},
        suns={k: graph.values[sun_key(k)] for k in image_ids},
        landmarks={j: graph.values[landmark_key(j)] for j in ids},
        normals={j: graph.values[normal_key(j)] for j in ids},
        albedos={j: float(graph.values[albedo_key(j)]) for j in ids},
        scales={} if model.calibrated else
        {k: float(graph.values[scale_key(k)]) for k in image_ids},
        biases={} if model.calibrated else
        {k: float(graph.values[bias_key(k)]) for k in image_ids},
        intrinsics=dict(bundle.intrinsics),
        model=model,
        report=report,
    )
    for j in ids:
        predictions = []
        measurements = []
        for k, u, v, brightness in bundle.tracks[j]:
            value = predict_track_brightness(
                sol.poses[k], sol.suns[k], sol.landmarks[j], sol.normals[j],
                sol.albedos[j], sol.image_params(k), model)
            if value is not None:
                predictions.append(value)
                measurements.append(brightness)
        if predictions:
            sol.track_photometric[j] = photometric_error(predictions, measurements)
    return sol


def optimize_bundle(bundle: MeasurementBundle, config: PipelineConfig,
                    trace_path=None):
    """Full back-end run: build, initialize, optimize, package the solution."""
    graph, ids = build_graph(bundle, config)
    graph, report = optimize_lm(graph, config.lm_config(trace_path=trace_path))
    return extract_solution(graph, ids, bundle, config.model(), report), graph


def evaluate_against_truth(solution: Solution, true_landmarks: dict,
                           true_normals: dict, true_albedos: dict,
                           align_albedo_scale: bool = True,
                           psnr_per_image=None):
    """Sim(3)-align the solution to identity-associated truth and build the
    evaluation report. Returns (report, sim3, albedo_scale)."""
    ids = solution.landmark_ids()
    missing = [j for j in ids if j not in true_landmarks]
    if missing:
        raise DataError(f"truth is missing {len(missing)} landmark ids "
                        f"(identity association requires equal id sets)")
    est = np.array([solution.landmarks[j] for j in ids])
    truth = np.array([true_landmarks[j] for j in ids])
    sim = align_sim3(est, truth)
    est_aligned = sim.apply(est)
    est_normals = np.array([sim.apply_direction(solution.normals[j]) for j in ids])
    tru_normals = np.array([true_normals[j] for j in ids])
    est_albedo = np.array([solution.albedos[j] for j in ids])
    tru_albedo = np.array([true_albedos[j] for j in ids])
    scale = albedo_alignment_scale(est_albedo, tru_albedo) if align_albedo_scale else 1.0
    photometric = np.array([solution.track_photometric.get(j, np.nan) for j in ids])
    report = build_report(ids, est_aligned, est_normals, est_albedo * scale,
                          truth, tru_normals, tru_albedo,
                          photometric=photometric,
                          psnr_per_image=psnr_per_image)
    return report, sim, scale
