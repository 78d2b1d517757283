"""Evaluation metrics comparing a reconstruction against ground truth.

Per-landmark position, normal-angle and relative-albedo errors, per-track
photometric error (prediction RMS over mean measured brightness), per-image
PSNR over valid pixels, and a generic per-landmark height error along the
scene up-axis. The caller aligns the maps (similarity transform, plus a global
albedo scale in uncalibrated mode) before computing errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.spatial


class EmptyTrack(ValueError):
    pass


class EmptyMask(ValueError):
    pass


def landmark_error(est: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(est) - np.asarray(truth)))


def normal_error(est: np.ndarray, truth: np.ndarray) -> float:
    """Angle between unit normals, in degrees."""
    dot = float(np.clip(np.asarray(est) @ np.asarray(truth), -1.0, 1.0))
    return math.degrees(math.acos(dot))


def albedo_error(est: float, truth: float) -> float:
    return abs(est - truth) / truth


def albedo_alignment_scale(est: np.ndarray, truth: np.ndarray) -> float:
    """Global scale minimizing sum (s * est - truth)^2, for uncalibrated maps
    whose albedos are only proportional to the reference."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    denom = float(est @ est)
    if denom == 0.0:
        return 1.0
    return float(est @ truth) / denom


def photometric_error(predictions, measurements) -> float:
    """RMS prediction-measurement mismatch over a track, normalized by the
    track's mean measured brightness."""
    predictions = np.asarray(predictions, dtype=float)
    measurements = np.asarray(measurements, dtype=float)
    if predictions.size == 0:
        raise EmptyTrack("no observations in track")
    rms = math.sqrt(float(np.mean((predictions - measurements) ** 2)))
    return rms / float(np.mean(measurements))


def psnr(rendered: np.ndarray, actual: np.ndarray, valid_mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over valid pixels of [0,1] images.

    Identical images return inf.
    """
    if rendered.shape != actual.shape:
        raise ValueError("image shapes differ")
    if not np.any(valid_mask):
        raise EmptyMask("no valid pixels")
    diff = rendered[valid_mask] - actual[valid_mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def associate_nearest(est_points: np.ndarray, ref_points: np.ndarray) -> np.ndarray:
    """Index into ref_points of the nearest reference point per estimate."""
    tree = scipy.spatial.cKDTree(np.asarray(ref_points))
    _, idx = tree.query(np.asarray(est_points))
    return idx


_METRIC_NAMES = ("landmark_err", "normal_err_deg", "albedo_err",
                 "height_err", "photometric_err")


@dataclass
class EvalReport:
    """Per-landmark error table plus aggregates and per-image PSNR."""

    landmark_ids: list[int]
    landmark_err: np.ndarray
    normal_err_deg: np.ndarray
    albedo_err: np.ndarray
    height_err: np.ndarray
    photometric_err: np.ndarray  # NaN where no track data was provided
    psnr_per_image: dict[int, float] = field(default_factory=dict)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    def compute_aggregates(self) -> None:
        self.aggregates = {}
        for name in _METRIC_NAMES:
            values = np.asarray(getattr(self, name), dtype=float)
            values = values[np.isfinite(values)]
            if values.size == 0:
                continue
            self.aggregates[name] = {
                "mean": float(np.mean(values)),
                "median": float(np.median(values)),
                "p95": float(np.percentile(values, 95)),
            }

    def to_text(self) -> str:
        """Serialize as a line-oriented report.

        Schema: header line 'EVALREPORT 1'; 'AGG <metric> mean <v> median <v>
        p95 <v>' per aggregated metric; 'PSNR <image_id> <dB|inf>' per image;
        a 'COLUMNS ...' line naming the table columns; one 'ROW ...' line per
        landmark. Floats use repr; missing values are 'nan'.
        """
        lines = ["EVALREPORT 1"]
        for name, agg in self.aggregates.items():
            lines.append(f"AGG {name} mean {agg['mean']!r} median {agg['median']!r} "
                         f"p95 {agg['p95']!r}")
        for image_id in sorted(self.psnr_per_image):
            lines.append(f"PSNR {image_id} {self.psnr_per_image[image_id]!r}")
        lines.append("COLUMNS id " + " ".join(_METRIC_NAMES))
        for i, lm_id in enumerate(self.landmark_ids):
            row = [str(lm_id)]
            for name in _METRIC_NAMES:
                row.append(repr(float(getattr(self, name)[i])))
            lines.append("ROW " + " ".join(row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "EvalReport":
        ids = []
        columns = {name: [] for name in _METRIC_NAMES}
        psnr_per_image = {}
        aggregates = {}
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "AGG":
                aggregates[parts[1]] = {parts[2]: float(parts[3]),
                                        parts[4]: float(parts[5]),
                                        parts[6]: float(parts[7])}
            elif parts[0] == "PSNR":
                psnr_per_image[int(parts[1])] = float(parts[2])
            elif parts[0] == "ROW":
                ids.append(int(parts[1]))
                for name, value in zip(_METRIC_NAMES, parts[2:]):
                    columns[name].append(float(value))
        report = EvalReport(
            landmark_ids=ids,
            landmark_err=np.array(columns["landmark_err"]),
            normal_err_deg=np.array(columns["normal_err_deg"]),
            albedo_err=np.array(columns["albedo_err"]),
            height_err=np.array(columns["height_err"]),
            photometric_err=np.array(columns["photometric_err"]),
            psnr_per_image=psnr_per_image,
            aggregates=aggregates,
        )
        return report


def build_report(landmark_ids, est_landmarks, est_normals, est_albedos,
                 true_landmarks, true_normals, true_albedos,
                 up_axis=(0.0, 0.0, 1.0), photometric=None,
                 psnr_per_image=None) -> EvalReport:
    """Assemble an EvalReport from aligned estimate/truth arrays.

    All arrays must already be index-aligned (identity association for
    synthetic truth, nearest-neighbor for baseline maps) and expressed in the
    same frame; height error is the position error component along up_axis.
    """
    est_landmarks = np.asarray(est_landmarks, dtype=float)
    true_landmarks = np.asarray(true_landmarks, dtype=float)
    up = np.asarray(up_axis, dtype=float)
    up = up / np.linalg.norm(up)
    diff = est_landmarks - true_landmarks
    report = EvalReport(
        landmark_ids=list(landmark_ids),
        landmark_err=np.linalg.norm(diff, axis=1),
        normal_err_deg=np.array([normal_error(e, t) for e, t in
                                 zip(est_normals, true_normals)]),
        albedo_err=np.array([albedo_error(e, t) for e, t in
                             zip(est_albedos, true_albedos)]),
        height_err=np.abs(diff @ up),
        photometric_err=(np.asarray(photometric, dtype=float)
                         if photometric is not None
                         else np.full(len(est_landmarks), np.nan)),
        psnr_per_image=dict(psnr_per_image or {}),
    )
    report.compute_aggregates()
    return report
