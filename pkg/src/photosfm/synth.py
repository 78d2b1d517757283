"""Synthetic asteroid-surface scenes with exact ground truth.

Scenes are 2.5D height fields (Gaussian craters and domes, optional sinusoidal
ridges) sampled on a jittered grid, so landmark positions, analytic normals
and per-landmark albedos are all known exactly. Cameras sit on an orbital arc
aimed at the patch center and every image gets its own Sun direction, giving
the azimuth/elevation diversity photoclinometry needs.

synthesize_measurements produces the keypoint/brightness/Sun-vector bundle the
optimizer consumes; render_view projects a landmark set into a camera and
interpolates brightness across the image for comparison against other renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.interpolate
import scipy.spatial

from .factors import BehindCamera, CameraIntrinsics, project
from .manifold import Pose, normalize, s2_retract
from .photometry import (
    ImagePhotoParams,
    NotIlluminated,
    NotVisible,
    ReflectanceModel,
    illum_geometry,
    predict_brightness,
)


class SceneSpecError(ValueError):
    """Scene configuration is infeasible or violates its own constraints."""


class DegenerateHull(ValueError):
    """Fewer than three non-collinear projected landmarks to interpolate."""


@dataclass(frozen=True)
class SceneConfig:
    """Procedural scene description. Lengths are in the scene unit (km)."""

    extent: float = 2.0
    grid: int = 32
    jitter: float = 0.3
    n_craters: int = 3
    n_domes: int = 2
    feature_amplitude: tuple[float, float] = (0.03, 0.09)
    feature_radius: tuple[float, float] = (0.10, 0.22)
    n_ridges: int = 0
    ridge_amplitude: float = 0.01
    ridge_wavelength: float = 0.35
    base_albedo: float = 0.2
    patch_albedos: tuple[float, float] = (0.1, 0.4)
    n_albedo_patches: int = 4
    patch_radius: tuple[float, float] = (0.10, 0.25)
    n_cameras: int = 12
    camera_distance: float = 6.0
    camera_azimuth_deg: tuple[float, float] = (0.0, 140.0)
    camera_elevation_deg: tuple[float, float] = (48.0, 72.0)
    sun_azimuth_deg: tuple[float, float] = (120.0, 280.0)
    sun_elevation_deg: tuple[float, float] = (28.0, 50.0)
    phase_range_deg: tuple[float, float] = (10.0, 100.0)
    focal: float = 800.0
    image_size: tuple[int, int] = (512, 512)
    min_visible_views: int = 6


@dataclass
class HeightField:
    """Sum of Gaussian bumps (signed) and sinusoidal ridges with analytic
    gradient."""

    bumps: list  # (x0, y0, amplitude_signed, sigma)
    ridges: list  # (cos_dir, sin_dir, amplitude, wavelength, phase)

    def height_and_gradient(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = np.zeros_like(x)
        hx = np.zeros_like(x)
        hy = np.zeros_like(x)
        for x0, y0, amp, sigma in self.bumps:
            dx, dy = x - x0, y - y0
            e = amp * np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
            h += e
            hx += e * (-dx / sigma**2)
            hy += e * (-dy / sigma**2)
        for cd, sd, amp, wavelength, phase in self.ridges:
            t = 2.0 * np.pi * (x * cd + y * sd) / wavelength + phase
            h += amp * np.sin(t)
            grad = amp * np.cos(t) * 2.0 * np.pi / wavelength
            hx += grad * cd
            hy += grad * sd
        return h, hx, hy


@dataclass
class SyntheticScene:
    landmarks: np.ndarray  # (N, 3)
    normals: np.ndarray    # (N, 3) analytic height-field normals
    albedos: np.ndarray    # (N,)
    cameras: list[Pose]
    suns: list[np.ndarray]
    intrinsics: CameraIntrinsics
    model: ReflectanceModel
    image_params: list[ImagePhotoParams]
    config: SceneConfig
    height_field: HeightField


@dataclass
class NoiseSpec:
    """Synthesis noise levels. Zeros mean noiseless measurements; the bundle
    then still records the nominal sigma so factors stay properly whitened."""

    sigma_pixel: float = 1.0
    sigma_i: float = 0.01
    sigma_sun: float = 1e-3
    min_track_length: int = 6

    def bundle_sigmas(self):
        return (self.sigma_pixel if self.sigma_pixel > 0.0 else 1.0,
                self.sigma_i if self.sigma_i > 0.0 else 0.01,
                self.sigma_sun if self.sigma_sun > 0.0 else 1e-3)


@dataclass
class MeasurementBundle:
    """Everything the back-end consumes: per-image cameras and Sun-vector
    measurements plus per-landmark tracks of (image, pixel, brightness)."""

    intrinsics: dict[int, CameraIntrinsics]
    poses: dict[int, Pose]
    sun_meas: dict[int, np.ndarray]  # unit vectors in the camera frame
    sigma_sun: float
    tracks: dict[int, list[tuple[int, float, float, float]]]
    sigma_pixel: float
    sigma_i: float
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)

    def n_observations(self) -> int:
        return sum(len(t) for t in self.tracks.values())


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Camera pose whose +z axis points from position toward target."""
    position = np.asarray(position, dtype=float)
    z = normalize(np.asarray(target, dtype=float) - position)
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = normalize(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), position)


def _azel_to_unit(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return np.array([math.cos(el) * math.cos(az),
                     math.cos(el) * math.sin(az),
                     math.sin(el)])


def generate_scene(config: SceneConfig, model: ReflectanceModel,
                   seed: int = 0) -> SyntheticScene:
    """Deterministic procedural scene for a given config, model and seed."""
    if config.n_cameras < 8:
        raise SceneSpecError("need at least 8 cameras")
    if config.camera_elevation_deg[0] <= 0.0:
        raise SceneSpecError("cameras must stay above the horizon")
    rng = np.random.default_rng(seed)
    half = 0.5 * config.extent

    bumps = []
    for _ in range(config.n_craters):
        bumps.append((rng.uniform(-0.6, 0.6) * half, rng.uniform(-0.6, 0.6) * half,
                      -rng.uniform(*config.feature_amplitude) * config.extent,
                      rng.uniform(*config.feature_radius) * config.extent))
    for _ in range(config.n_domes):
        bumps.append((rng.uniform(-0.6, 0.6) * half, rng.uniform(-0.6, 0.6) * half,
                      rng.uniform(*config.feature_amplitude) * config.extent,
                      rng.uniform(*config.feature_radius) * config.extent))
    ridges = []
    for _ in range(config.n_ridges):
        theta = rng.uniform(0.0, np.pi)
        ridges.append((math.cos(theta), math.sin(theta),
                       config.ridge_amplitude * config.extent,
                       config.ridge_wavelength * config.extent,
                       rng.uniform(0.0, 2.0 * np.pi)))
    hf = HeightField(bumps, ridges)

    lin = np.linspace(-half, half, config.grid)
    gx, gy = np.meshgrid(lin, lin)
    spacing = lin[1] - lin[0] if config.grid > 1 else config.extent
    x = (gx + rng.uniform(-config.jitter, config.jitter, gx.shape) * spacing).ravel()
    y = (gy + rng.uniform(-config.jitter, config.jitter, gy.shape) * spacing).ravel()
    h, hx, hy = hf.height_and_gradient(x, y)
    landmarks = np.column_stack([x, y, h])
    normals = np.column_stack([-hx, -hy, np.ones_like(hx)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    albedos = np.full(len(landmarks), config.base_albedo)
    for i in range(config.n_albedo_patches):
        cx_p = rng.uniform(-0.7, 0.7) * half
        cy_p = rng.uniform(-0.7, 0.7) * half
        radius = rng.uniform(*config.patch_radius) * config.extent
        value = config.patch_albedos[i % len(config.patch_albedos)]
        mask = (x - cx_p) ** 2 + (y - cy_p) ** 2 < radius**2
        albedos[mask] = value

    cameras = []
    suns = []
    n = config.n_cameras
    for k in range(n):
        frac = k / max(n - 1, 1)
        cam_az = config.camera_azimuth_deg[0] + frac * (
            config.camera_azimuth_deg[1] - config.camera_azimuth_deg[0])
        cam_el = config.camera_elevation_deg[0] + (
            config.camera_elevation_deg[1] - config.camera_elevation_deg[0]) * (
            0.5 + 0.5 * math.sin(2.1 * k))
        cameras.append(look_at(config.camera_distance * _azel_to_unit(cam_az, cam_el),
                               np.zeros(3)))
        sun_az = config.sun_azimuth_deg[0] + frac * (
            config.sun_azimuth_deg[1] - config.sun_azimuth_deg[0])
        sun_el = config.sun_elevation_deg[0] + (
            config.sun_elevation_deg[1] - config.sun_elevation_deg[0]) * (
            0.5 + 0.5 * math.cos(1.7 * k))
        suns.append(_azel_to_unit(sun_az, sun_el))

    for k in range(n):
        cam_dir = normalize(cameras[k].t)
        phase = math.degrees(math.acos(np.clip(cam_dir @ suns[k], -1.0, 1.0)))
        if not (config.phase_range_deg[0] <= phase <= config.phase_range_deg[1]):
            raise SceneSpecError(
                f"image {k}: phase {phase:.1f} deg outside "
                f"{config.phase_range_deg}")

    if model.calibrated:
        image_params = [ImagePhotoParams() for _ in range(n)]
    else:
        image_params = [ImagePhotoParams(scale=rng.uniform(0.8, 1.25),
                                         bias=rng.normal() * 0.01)
                        for _ in range(n)]

    scene = SyntheticScene(landmarks, normals, albedos, cameras, suns,
                           CameraIntrinsics(config.focal, config.focal,
                                            config.image_size[0] / 2.0,
                                            config.image_size[1] / 2.0),
                           model, image_params, config, hf)
    _check_visibility(scene)
    return scene


def _check_visibility(scene: SyntheticScene) -> None:
    counts = np.zeros(len(scene.landmarks), dtype=int)
    for pose in scene.cameras:
        emit = pose.t[None, :] - scene.landmarks
        emit /= np.linalg.norm(emit, axis=1, keepdims=True)
        counts += (np.sum(emit * scene.normals, axis=1) > 0.0).astype(int)
    if counts.min() < scene.config.min_visible_views:
        raise SceneSpecError(
            f"{(counts < scene.config.min_visible_views).sum()} landmarks "
            f"visible from fewer than {scene.config.min_visible_views} cameras")


def synthesize_measurements(scene: SyntheticScene, noise: NoiseSpec,
                            seed: int = 0) -> MeasurementBundle:
    """Project the scene into every camera and corrupt with Gaussian noise.

    Shadowed, back-facing, behind-camera and out-of-frame observations are
    dropped; tracks shorter than the minimum length are removed entirely.
    """
    rng = np.random.default_rng(seed)
    n_images = len(scene.cameras)
    w, h = scene.config.image_size
    tracks: dict[int, list] = {j: [] for j in range(len(scene.landmarks))}

    for k in range(n_images):
        pose = scene.cameras[k]
        sun = scene.suns[k]
        params = scene.image_params[k]
        for j, landmark in enumerate(scene.landmarks):
            try:
                pixel = project(pose, landmark, scene.intrinsics)
            except BehindCamera:
                continue
            if not (-0.5 <= pixel[0] <= w - 0.5 and -0.5 <= pixel[1] <= h - 0.5):
                continue
            emit = normalize(pose.t - landmark)
            geom = illum_geometry(sun, emit, scene.normals[j])
            try:
                brightness = predict_brightness(scene.model, params,
                                                float(scene.albedos[j]), geom)
            except (NotIlluminated, NotVisible):
                continue
            pixel = pixel + rng.normal(size=2) * noise.sigma_pixel
            brightness += rng.normal() * noise.sigma_i
            tracks[j].append((k, float(pixel[0]), float(pixel[1]), float(brightness)))

    tracks = {j: obs for j, obs in tracks.items()
              if len(obs) >= noise.min_track_length}

    sun_meas = {}
    for k in range(n_images):
        s_cam = scene.cameras[k].R.T @ scene.suns[k]
        sun_meas[k] = s2_retract(s_cam, rng.normal(size=2) * noise.sigma_sun)

    sigma_pixel, sigma_i, sigma_sun = noise.bundle_sigmas()
    return MeasurementBundle(
        intrinsics={k: scene.intrinsics for k in range(n_images)},
        poses={k: scene.cameras[k] for k in range(n_images)},
        sun_meas=sun_meas,
        sigma_sun=sigma_sun,
        tracks=tracks,
        sigma_pixel=sigma_pixel,
        sigma_i=sigma_i,
    )


def render_view(landmarks, albedos, normals, pose: Pose, sun, intrinsics,
                model: ReflectanceModel, params: ImagePhotoParams,
                image_size) -> np.ndarray:
    """Render a grayscale image by projecting landmarks and interpolating.

    Brightness is evaluated per landmark and linearly interpolated (Delaunay)
    at the pixel centers inside the convex hull of the projections. Pixels
    outside the hull, and pixels whose triangle touches a shadowed or
    back-facing landmark, are NaN (invalid), not zero.
    """
    points = []
    values = []
    for j, landmark in enumerate(landmarks):
        try:
            pixel = project(pose, landmark, intrinsics)
        except BehindCamera:
            continue
        try:
            emit = normalize(pose.t - landmark)
            geom = illum_geometry(sun, emit, normals[j])
            value = predict_brightness(model, params, float(albedos[j]), geom)
        except (NotIlluminated, NotVisible):
            value = np.nan
        points.append(pixel)
        values.append(value)
    finite = [p for p, v in zip(points, values) if np.isfinite(v)]
    if len(finite) < 3 or np.linalg.matrix_rank(
            np.asarray(finite[:50]) - np.mean(finite[:50], axis=0)) < 2:
        raise DegenerateHull(f"{len(finite)} usable projections")
    try:
        interp = scipy.interpolate.LinearNDInterpolator(
            np.asarray(points), np.asarray(values))
    except scipy.spatial.QhullError as exc:
        raise DegenerateHull(str(exc)) from exc
    w, h = image_size
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return interp(u, v)


def render_scene_view(scene: SyntheticScene, k: int) -> np.ndarray:
    """Ground-truth render of image k of a synthetic scene."""
    return render_view(scene.landmarks, scene.albedos, scene.normals,
                       scene.cameras[k], scene.suns[k], scene.intrinsics,
                       scene.model, scene.image_params[k],
                       scene.config.image_size)
