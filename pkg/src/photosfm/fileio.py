"""On-disk formats: measurement bundles, landmark maps, camera tables, PGM.

All text formats are line oriented with space-separated fields and use
repr() for floats, which round-trips doubles exactly and keeps repeated runs
byte-identical. Formats:

Measurement bundle (one file):
    PHOTOSFM_BUNDLE 1
    NOISE <sigma_pixel> <sigma_i>
    CAMERA <image_id> <fx> <fy> <cx> <cy>
    POSE <image_id> <r11> <r12> <r13> <r21> ... <r33> <tx> <ty> <tz>
    SUN <image_id> <sx> <sy> <sz> <sigma>        # camera-frame unit vector
    LANDMARK <id> <x> <y> <z>                    # optional initial positions
    TRACK <id> <n> { <image_id> <u> <v> <brightness> } * n

POSE rows store the camera-to-body rotation row-major and the camera position
in body coordinates. Worked example (identity camera at origin, one track
seen in two images):

    PHOTOSFM_BUNDLE 1
    NOISE 1.0 0.01
    CAMERA 0 800.0 800.0 256.0 256.0
    POSE 0 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0
    SUN 0 0.0 0.0 1.0 0.001
    TRACK 5 2 0 255.5 257.0 0.184 1 250.1 260.2 0.171

Camera tables reuse the CAMERA/POSE lines and add body-frame Sun directions
and, for uncalibrated runs, per-image scale/bias:
    PHOTOSFM_CAMERAS 1
    SUN <image_id> <sx> <sy> <sz>
    SCALE <image_id> <value>
    BIAS <image_id> <value>

Landmark maps are ASCII PLY with per-vertex properties
x y z nx ny nz albedo, one vertex per landmark in ascending landmark id.

Rendered images are 16-bit binary PGM (P5, maxval 65535). Valid pixels map
linearly from the declared [min, max] onto [1, 65535]; invalid pixels are 0.
The mapping lives in a JSON sidecar next to the image.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .factors import CameraIntrinsics
from .manifold import Pose
from .synth import MeasurementBundle

BUNDLE_MAGIC = "PHOTOSFM_BUNDLE 1"
CAMERAS_MAGIC = "PHOTOSFM_CAMERAS 1"


class FormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _pose_fields(pose: Pose) -> str:
    return " ".join(_fmt(v) for v in list(pose.R.ravel()) + list(pose.t))


def _parse_pose(fields) -> Pose:
    values = [float(v) for v in fields]
    return Pose(np.array(values[:9]).reshape(3, 3), np.array(values[9:12]))


# ---------------------------------------------------------------------------
# Measurement bundles
# ---------------------------------------------------------------------------

def write_bundle(bundle: MeasurementBundle, path) -> None:
    lines = [BUNDLE_MAGIC,
             f"NOISE {_fmt(bundle.sigma_pixel)} {_fmt(bundle.sigma_i)}"]
    for k in sorted(bundle.intrinsics):
        intr = bundle.intrinsics[k]
        lines.append(f"CAMERA {k} {_fmt(intr.fx)} {_fmt(intr.fy)} "
                     f"{_fmt(intr.cx)} {_fmt(intr.cy)}")
    for k in sorted(bundle.poses):
        lines.append(f"POSE {k} {_pose_fields(bundle.poses[k])}")
    for k in sorted(bundle.sun_meas):
        s = bundle.sun_meas[k]
        lines.append(f"SUN {k} {_fmt(s[0])} {_fmt(s[1])} {_fmt(s[2])} "
                     f"{_fmt(bundle.sigma_sun)}")
    for j in sorted(bundle.landmarks):
        p = bundle.landmarks[j]
        lines.append(f"LANDMARK {j} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    for j in sorted(bundle.tracks):
        obs = bundle.tracks[j]
        parts = [f"TRACK {j} {len(obs)}"]
        for k, u, v, brightness in obs:
            parts.append(f"{k} {_fmt(u)} {_fmt(v)} {_fmt(brightness)}")
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_bundle(path) -> MeasurementBundle:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a bundle file (missing '{BUNDLE_MAGIC}')")
    intrinsics = {}
    poses = {}
    sun_meas = {}
    landmarks = {}
    tracks = {}
    sigma_pixel = 1.0
    sigma_i = 0.01
    sigma_sun = 1e-3
    for line in lines[1:]:
        fields = line.split()
        if not fields:
            continue
        tag = fields[0]
        if tag == "NOISE":
            sigma_pixel, sigma_i = float(fields[1]), float(fields[2])
        elif tag == "CAMERA":
            intrinsics[int(fields[1])] = CameraIntrinsics(*map(float, fields[2:6]))
        elif tag == "POSE":
            poses[int(fields[1])] = _parse_pose(fields[2:14])
        elif tag == "SUN":
            sun_meas[int(fields[1])] = np.array([float(v) for v in fields[2:5]])
            sigma_sun = float(fields[5])
        elif tag == "LANDMARK":
            landmarks[int(fields[1])] = np.array([float(v) for v in fields[2:5]])
        elif tag == "TRACK":
            j, n = int(fields[1]), int(fields[2])
            rest = fields[3:]
            if len(rest) != 4 * n:
                raise FormatError(f"TRACK {j}: expected {4 * n} fields, "
                                  f"got {len(rest)}")
            tracks[j] = [(int(rest[4 * i]), float(rest[4 * i + 1]),
                          float(rest[4 * i + 2]), float(rest[4 * i + 3]))
                         for i in range(n)]
        else:
            raise FormatError(f"unknown record '{tag}'")
    return MeasurementBundle(intrinsics, poses, sun_meas, sigma_sun, tracks,
                             sigma_pixel, sigma_i, landmarks)


# ---------------------------------------------------------------------------
# Landmark maps (ASCII PLY)
# ---------------------------------------------------------------------------

def write_map_ply(path, landmark_ids, landmarks, normals, albedos) -> None:
    ids = sorted(landmark_ids)
    header = [
        "ply",
        "format ascii 1.0",
        "comment photosfm landmark map",
        f"element vertex {len(ids)}",
        "property double x",
        "property double y",
        "property double z",
        "property double nx",
        "property double ny",
        "property double nz",
        "property double albedo",
        "end_header",
    ]
    rows = []
    for j in ids:
        p = landmarks[j]
        n = normals[j]
        rows.append(" ".join(_fmt(v) for v in
                             (p[0], p[1], p[2], n[0], n[1], n[2], albedos[j])))
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_map_ply(path):
    """Returns (landmarks (N,3), normals (N,3), albedos (N,)). Landmark ids
    are implicit row order (ascending id at write time)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_vertex = None
    body_at = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[2])
        if line.strip() == "end_header":
            body_at = i + 1
            break
    if n_vertex is None or body_at is None:
        raise FormatError(f"{path}: malformed PLY header")
    data = np.array([[float(v) for v in line.split()]
                     for line in lines[body_at:body_at + n_vertex]])
    if data.shape != (n_vertex, 7):
        raise FormatError(f"{path}: expected {n_vertex} x 7 vertex rows")
    return data[:, 0:3], data[:, 3:6], data[:, 6]


# ---------------------------------------------------------------------------
# Camera tables
# ---------------------------------------------------------------------------

def write_cameras(path, intrinsics, poses, suns, scales=None, biases=None) -> None:
    lines = [CAMERAS_MAGIC]
    for k in sorted(intrinsics):
        intr = intrinsics[k]
        lines.append(f"CAMERA {k} {_fmt(intr.fx)} {_fmt(intr.fy)} "
                     f"{_fmt(intr.cx)} {_fmt(intr.cy)}")
    for k in sorted(poses):
        lines.append(f"POSE {k} {_pose_fields(poses[k])}")
    for k in sorted(suns):
        s = suns[k]
        lines.append(f"SUN {k} {_fmt(s[0])} {_fmt(s[1])} {_fmt(s[2])}")
    for k in sorted(scales or {}):
        lines.append(f"SCALE {k} {_fmt(scales[k])}")
    for k in sorted(biases or {}):
        lines.append(f"BIAS {k} {_fmt(biases[k])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CAMERAS_MAGIC:
        raise FormatError(f"{path}: not a camera table")
    intrinsics = {}
    poses = {}
    suns = {}
    scales = {}
    biases = {}
    for line in lines[1:]:
        fields = line.split()
        if not fields:
            continue
        tag, k = fields[0], int(fields[1])
        if tag == "CAMERA":
            intrinsics[k] = CameraIntrinsics(*map(float, fields[2:6]))
        elif tag == "POSE":
            poses[k] = _parse_pose(fields[2:14])
        elif tag == "SUN":
            suns[k] = np.array([float(v) for v in fields[2:5]])
        elif tag == "SCALE":
            scales[k] = float(fields[2])
        elif tag == "BIAS":
            biases[k] = float(fields[2])
        else:
            raise FormatError(f"unknown record '{tag}'")
    return intrinsics, poses, suns, scales, biases


# ---------------------------------------------------------------------------
# 16-bit PGM images with JSON sidecar
# ---------------------------------------------------------------------------

def write_pgm16(path, image: np.ndarray, value_range=None) -> dict:
    """Write a float image as 16-bit PGM; NaN pixels become 0 (invalid).

    Valid values map linearly from value_range (default: finite min/max of
    the image) onto [1, 65535]. Returns the sidecar metadata written next to
    the image as '<path>.json'.
    """
    valid = np.isfinite(image)
    if value_range is None:
        if valid.any():
            value_range = (float(image[valid].min()), float(image[valid].max()))
        else:
            value_range = (0.0, 1.0)
    lo, hi = value_range
    span = hi - lo if hi > lo else 1.0
    scaled = np.zeros(image.shape, dtype=np.uint16)
    if valid.any():
        norm = np.clip((image[valid] - lo) / span, 0.0, 1.0)
        scaled[valid] = (1 + np.round(norm * 65534)).astype(np.uint16)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + scaled.astype(">u2").tobytes())
    meta = {"min": lo, "max": hi, "invalid_value": 0,
            "width": int(image.shape[1]), "height": int(image.shape[0])}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return meta


def read_pgm16(path):
    """Returns the float image with NaN at invalid pixels."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    width, height = map(int, parts[1].split())
    maxval = int(parts[2])
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit maxval")
    pixels = np.frombuffer(parts[3], dtype=">u2", count=width * height)
    pixels = pixels.reshape(height, width).astype(float)
    meta = json.loads(Path(str(path) + ".json").read_text())
    image = meta["min"] + (pixels - 1) / 65534.0 * (meta["max"] - meta["min"])
    image[pixels == meta["invalid_value"]] = np.nan
    return image, meta


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
