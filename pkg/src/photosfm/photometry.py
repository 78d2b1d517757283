"""Reflectance models and brightness prediction for airless-body surfaces.

Five photometric models are supported: Akimov, McEwen, Akimov+, Lunar-Lambert
and Minnaert. Each factors the radiance into a normal albedo, a phase function
Lambda(phi) normalized to 1 at zero phase, and a disk function d(i, e, phi)
describing the topographic brightness falloff.

Unit conventions: all angles are carried in radians, but the phase-weight
functions g(phi) and the phase polynomials Lambda(phi) evaluate phi in
degrees, matching the published coefficient fits (e.g. the McEwen exponential
exp(-phi/60) decays over tens of degrees).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_DEG = 180.0 / math.pi
_PHASE_EPS = 1e-9


class NotIlluminated(ValueError):
    """Surface element faces away from the Sun (cos incidence <= 0)."""


class NotVisible(ValueError):
    """Surface element faces away from the camera (cos emission <= 0)."""


class ModelKind(Enum):
    AKIMOV = "akimov"
    MCEWEN = "mcewen"
    AKIMOV_PLUS = "akimov_plus"
    LUNAR_LAMBERT = "lunar_lambert"
    MINNAERT = "minnaert"


# Kinds whose phase weight g(phi) is the affine w0 + w1 * phi_deg and whose
# phase function is an explicit polynomial.
_COEFF_KINDS = (ModelKind.AKIMOV_PLUS, ModelKind.LUNAR_LAMBERT, ModelKind.MINNAERT)


@dataclass(frozen=True)
class ReflectanceModel:
    """One reflectance model with its fitted coefficients.

    ``c`` holds the polynomial coefficients c1..cm of Lambda(phi); c0 is fixed
    to 1 so Lambda(0) == 1 exactly. ``calibrated`` selects whether brightness
    predictions are in radiance-factor units (albedo * Lambda * disk) or carry
    a per-image scale and bias (albedo * scale * disk + bias).
    """

    kind: ModelKind
    w0: float = 0.0
    w1: float = 0.0
    c: tuple[float, ...] = ()
    calibrated: bool = True

    def __post_init__(self):
        if self.kind in _COEFF_KINDS and not self.c:
            raise ValueError(f"{self.kind.value} requires phase coefficients")

    @property
    def has_phase_polynomial(self) -> bool:
        return self.kind in _COEFF_KINDS


@dataclass(frozen=True)
class ImagePhotoParams:
    """Per-image photometric parameters.

    ``scale`` and ``bias`` are only meaningful in uncalibrated mode; the
    calibrated prediction ignores them. ``solar_irradiance`` is the
    exposure-normalized incident flux used to normalize fitted scales when
    comparing them against an explicit phase function.
    """

    scale: float = 1.0
    bias: float = 0.0
    solar_irradiance: float = 1.0


CALIBRATED_PARAMS = ImagePhotoParams()


@dataclass(frozen=True)
class IllumGeometry:
    """Illumination geometry at a surface element.

    cos_i / cos_e are the incidence and emission cosines, ``phase`` the
    Sun-to-viewer angle in radians. ``photometric_lat`` (beta) and
    ``photometric_lon`` (gamma) place the normal relative to the scattering
    plane and satisfy cos(beta) * cos(gamma) = cos(e).
    """

    cos_i: float
    cos_e: float
    phase: float
    photometric_lat: float
    photometric_lon: float


# Coefficients fitted to Dawn approach imagery, with the phase polynomial
# normalized so the constant term is 1.
_PRESETS: dict[tuple[str, ModelKind], tuple[float, float, tuple[float, ...]]] = {
    ("vesta", ModelKind.AKIMOV_PLUS): (
        1.57, -9.88e-3, (-1.9219e-2, 2.2193e-4, -1.6245e-6, 4.6468e-9)),
    ("vesta", ModelKind.LUNAR_LAMBERT): (
        0.830, -7.22e-3, (-1.7160e-2, 1.8306e-4, -1.0399e-6, 2.3223e-9)),
    ("vesta", ModelKind.MINNAERT): (
        0.554, 4.35e-3, (-1.6910e-2, 1.7807e-4, -9.7674e-7, 2.1063e-9)),
    ("ceres", ModelKind.AKIMOV_PLUS): (
        1.109, -2.85e-3, (-2.2435e-2, 2.1477e-4, -7.5103e-7)),
    ("ceres", ModelKind.LUNAR_LAMBERT): (
        0.896, -8.87e-3, (-2.2118e-2, 2.0912e-4, -6.4209e-7)),
    ("ceres", ModelKind.MINNAERT): (
        0.514, 5.09e-3, (-2.2568e-2, 2.2297e-4, -7.3108e-7)),
}


def make_model(kind: ModelKind | str, body: str = "vesta",
               calibrated: bool | None = None) -> ReflectanceModel:
    """Build a model from a body preset.

    Akimov and McEwen are parameter-free and default to uncalibrated use; the
    coefficient models default to calibrated.
    """
    kind = ModelKind(kind) if isinstance(kind, str) else kind
    if kind in (ModelKind.AKIMOV, ModelKind.MCEWEN):
        return ReflectanceModel(kind, calibrated=False if calibrated is None else calibrated)
    try:
        w0, w1, c = _PRESETS[(body.lower(), kind)]
    except KeyError:
        raise ValueError(f"no preset for body={body!r} kind={kind.value}") from None
    return ReflectanceModel(kind, w0, w1, c, calibrated=True if calibrated is None else calibrated)


def model_from_config(cfg: dict) -> ReflectanceModel:
    """Build a model from a configuration mapping.

    Accepts either {"kind", "body", "calibrated"} for a preset or explicit
    {"kind", "w0", "w1", "c", "calibrated"} coefficients.
    """
    kind = ModelKind(cfg["kind"])
    if "w0" in cfg or "c" in cfg:
        return ReflectanceModel(
            kind,
            w0=float(cfg.get("w0", 0.0)),
            w1=float(cfg.get("w1", 0.0)),
            c=tuple(float(x) for x in cfg.get("c", ())),
            calibrated=bool(cfg.get("calibrated", True)),
        )
    return make_model(kind, cfg.get("body", "vesta"), cfg.get("calibrated"))


def model_to_config(model: ReflectanceModel) -> dict:
    return {
        "kind": model.kind.value,
        "w0": model.w0,
        "w1": model.w1,
        "c": list(model.c),
        "calibrated": model.calibrated,
    }


def illum_geometry(sun: np.ndarray, emit: np.ndarray, normal: np.ndarray) -> IllumGeometry:
    """Angles at a surface element from unit Sun, viewer and normal directions.

    ``sun`` and ``emit`` point from the surface toward the Sun and camera.
    The degenerate zero-phase case (Sun and viewer coincident) pins the
    photometric longitude to zero.
    """
    cos_i = float(sun @ normal)
    cos_e = float(emit @ normal)
    h = float(np.clip(sun @ emit, -1.0, 1.0))
    # atan2 form of arccos(s.e): identical value, well conditioned at phase 0.
    sin_phase = float(np.linalg.norm(np.cross(sun, emit)))
    phase = math.atan2(sin_phase, h)
    if sin_phase < _PHASE_EPS:
        lon = 0.0
        lat = math.acos(min(1.0, max(-1.0, cos_e)))
    else:
        # tan(gamma) = (cos_i / cos_e - cos phi) / sin phi, kept stable as
        # cos_e -> 0 by the two-argument arctangent.
        lon = math.atan2(cos_i - cos_e * h, cos_e * sin_phase)
        cos_lat = cos_e / math.cos(lon)
        lat = math.acos(min(1.0, max(-1.0, cos_lat)))
    return IllumGeometry(cos_i, cos_e, phase, lat, lon)


def lommel_lambert_mix(cos_i: float, cos_e: float, g: float) -> float:
    """Weighted sum of Lambert and Lommel-Seeliger terms used by McEwen and
    Lunar-Lambert: (1 - g) cos_i + g * 2 cos_i / (cos_i + cos_e)."""
    return (1.0 - g) * cos_i + g * 2.0 * cos_i / (cos_i + cos_e)


def phase_weight(model: ReflectanceModel, phase: float) -> float:
    """Phase weighting g(phi). Exponential for McEwen, affine for the
    coefficient models, unused (1.0) for Akimov."""
    deg = phase * _DEG
    if model.kind is ModelKind.MCEWEN:
        return math.exp(-deg / 60.0)
    if model.kind in _COEFF_KINDS:
        return model.w0 + model.w1 * deg
    return 1.0


def phase_function(model: ReflectanceModel, phase: float) -> float:
    """Phase polynomial Lambda(phi); identically 1 for Akimov and McEwen."""
    if not model.has_phase_polynomial:
        return 1.0
    deg = phase * _DEG
    acc = 0.0
    for ck in reversed(model.c):
        acc = (acc + ck) * deg
    return 1.0 + acc


def _akimov_disk(f: float, w: float, h: float, alpha: float) -> float:
    """Akimov-form disk function from the angle cosines and exponent alpha."""
    phi = math.acos(h)
    sin_phi = math.sqrt(max(0.0, 1.0 - h * h))
    if sin_phi < _PHASE_EPS:
        return 1.0
    u = (f / w - h) / sin_phi
    cos_lon = 1.0 / math.sqrt(1.0 + u * u)
    lon = math.atan(u)
    cos_lat = w / cos_lon
    scale = math.pi / (math.pi - phi)
    return math.cos(0.5 * phi) * math.cos(scale * (lon - 0.5 * phi)) \
        * cos_lat ** alpha / cos_lon


def _disk_from_cosines(model: ReflectanceModel, f: float, w: float, h: float) -> float:
    phi = math.acos(h)
    if model.kind in (ModelKind.MCEWEN, ModelKind.LUNAR_LAMBERT):
        return lommel_lambert_mix(f, w, phase_weight(model, phi))
    if model.kind is ModelKind.MINNAERT:
        g = phase_weight(model, phi)
        return f ** g * w ** (g - 1.0)
    if model.kind is ModelKind.AKIMOV:
        return _akimov_disk(f, w, h, phi / (math.pi - phi))
    # Akimov+: exponent carries the affine phase weight.
    g = phase_weight(model, phi)
    return _akimov_disk(f, w, h, g * phi / (math.pi - phi))


def disk_function(model: ReflectanceModel, geom: IllumGeometry) -> float:
    """Disk function d(i, e, phi) for an illuminated, visible element."""
    if geom.cos_i <= 0.0:
        raise NotIlluminated("cos incidence <= 0")
    if geom.cos_e <= 0.0:
        raise NotVisible("cos emission <= 0")
    return _disk_from_cosines(model, geom.cos_i, geom.cos_e, math.cos(geom.phase))


def predict_brightness(model: ReflectanceModel, params: ImagePhotoParams,
                       albedo: float, geom: IllumGeometry) -> float:
    """Predicted brightness of a surface element.

    Calibrated: albedo * Lambda(phi) * d. Uncalibrated: albedo * scale * d +
    bias, with the per-image scale standing in for the phase dependence.
    """
    d = disk_function(model, geom)
    if model.calibrated:
        return albedo * phase_function(model, geom.phase) * d
    return albedo * params.scale * d + params.bias


# ---------------------------------------------------------------------------
# Scalar derivative kernels used by the photoclinometry factor. All take the
# cosines f = cos_i = s.n, w = cos_e = d.n, h = cos_phi = s.d and return the
# value together with its partial derivatives in (f, w, h).
# ---------------------------------------------------------------------------

def phase_with_partial(model: ReflectanceModel, h: float) -> tuple[float, float]:
    """Lambda(phi(h)) and d Lambda / d h."""
    if not model.has_phase_polynomial:
        return 1.0, 0.0
    deg = math.acos(h) * _DEG
    m = len(model.c)
    lam = 0.0
    for k in range(m, 0, -1):
        lam = (lam + model.c[k - 1]) * deg
    dlam = 0.0
    for k in range(m, 1, -1):
        dlam = (dlam + k * model.c[k - 1]) * deg
    dlam += model.c[0]
    ddeg_dh = -_DEG / math.sqrt(max(1e-300, 1.0 - h * h))
    return 1.0 + lam, dlam * ddeg_dh


def _weight_with_partial(model: ReflectanceModel, h: float) -> tuple[float, float]:
    """g(phi(h)) and d g / d h."""
    s = math.sqrt(max(1e-300, 1.0 - h * h))
    deg = math.acos(h) * _DEG
    if model.kind is ModelKind.MCEWEN:
        g = math.exp(-deg / 60.0)
        return g, g / 60.0 * _DEG / s
    return model.w0 + model.w1 * deg, -model.w1 * _DEG / s


def disk_with_partials(model: ReflectanceModel, f: float, w: float,
                       h: float) -> tuple[float, float, float, float]:
    """Disk value and its partials (d, dd/df, dd/dw, dd/dh).

    Requires f > 0 and w > 0 (illuminated and visible) and a non-degenerate
    phase angle; callers deactivate instead of differentiating at phi ~ 0.
    """
    if f <= 0.0:
        raise NotIlluminated("cos incidence <= 0")
    if w <= 0.0:
        raise NotVisible("cos emission <= 0")

    if model.kind in (ModelKind.MCEWEN, ModelKind.LUNAR_LAMBERT):
        g, dg_dh = _weight_with_partial(model, h)
        denom = f + w
        d = (1.0 - g) * f + g * 2.0 * f / denom
        dd_df = (1.0 - g) + 2.0 * g * w / denom ** 2
        dd_dw = -2.0 * g * f / denom ** 2
        dd_dg = f * (2.0 / denom - 1.0)
        return d, dd_df, dd_dw, dd_dg * dg_dh

    if model.kind is ModelKind.MINNAERT:
        g, dg_dh = _weight_with_partial(model, h)
        d = f ** g * w ** (g - 1.0)
        dd_df = g * f ** (g - 1.0) * w ** (g - 1.0)
        dd_dw = (g - 1.0) * f ** g * w ** (g - 2.0)
        dd_dg = d * (math.log(f) + math.log(w))
        return d, dd_df, dd_dw, dd_dg * dg_dh

    return _akimov_with_partials(model, f, w, h)


def _akimov_with_partials(model: ReflectanceModel, f: float, w: float,
                          h: float) -> tuple[float, float, float, float]:
    phi = math.acos(h)
    s = math.sqrt(max(1e-300, 1.0 - h * h))
    dphi_dh = -1.0 / s

    u = (f / w - h) / s
    du_df = 1.0 / (w * s)
    du_dw = -f / (w * w * s)
    du_dh = -1.0 / s + (f / w - h) * h / s ** 3

    cos_lon = 1.0 / math.sqrt(1.0 + u * u)
    lon = math.atan(u)
    dlon_du = cos_lon * cos_lon

    if model.kind is ModelKind.AKIMOV:
        alpha = phi / (math.pi - phi)
        dalpha_dphi = math.pi / (math.pi - phi) ** 2
    else:
        g, dg_dh = _weight_with_partial(model, h)
        dg_dphi = dg_dh / dphi_dh
        alpha = g * phi / (math.pi - phi)
        dalpha_dphi = dg_dphi * phi / (math.pi - phi) + g * math.pi / (math.pi - phi) ** 2

    a_term = math.cos(0.5 * phi)
    da_dphi = -0.5 * math.sin(0.5 * phi)

    scale = math.pi / (math.pi - phi)
    dscale_dphi = math.pi / (math.pi - phi) ** 2
    m = scale * (lon - 0.5 * phi)
    c_term = math.cos(m)
    dc_dm = -math.sin(m)
    dm_dphi = dscale_dphi * (lon - 0.5 * phi) - 0.5 * scale
    dm_dlon = scale

    pw = w ** alpha
    pc = cos_lon ** (-(alpha + 1.0))
    d = a_term * c_term * pw * pc

    dpw_dw = alpha * w ** (alpha - 1.0)
    dpw_dalpha = pw * math.log(w)
    # d/dlon of cos_lon^-(alpha+1), using sin(lon) = u * cos(lon).
    dpc_dlon = (alpha + 1.0) * u * cos_lon ** (-(alpha + 1.0))
    dpc_dalpha = -pc * math.log(cos_lon)

    dd_dlon = a_term * (dc_dm * dm_dlon * pw * pc + c_term * pw * dpc_dlon)
    dd_dphi = (da_dphi * c_term * pw * pc
               + a_term * dc_dm * dm_dphi * pw * pc
               + a_term * c_term * (dpw_dalpha * pc + pw * dpc_dalpha) * dalpha_dphi)

    dd_df = dd_dlon * dlon_du * du_df
    dd_dw = dd_dlon * dlon_du * du_dw + a_term * c_term * dpw_dw * pc
    dd_dh = dd_dphi * dphi_dh + dd_dlon * dlon_du * du_dh
    return d, dd_df, dd_dw, dd_dh


def brightness_with_partials(model: ReflectanceModel, params: ImagePhotoParams,
                             albedo: float, f: float, w: float, h: float):
    """Brightness and partials for the photoclinometry factor.

    Returns (value, dI/df, dI/dw, dI/dh, dI/da, dI/dscale, dI/dbias); the last
    two are zero in calibrated mode.
    """
    d, dd_df, dd_dw, dd_dh = disk_with_partials(model, f, w, h)
    if model.calibrated:
        lam, dlam_dh = phase_with_partial(model, h)
        value = albedo * lam * d
        return (value,
                albedo * lam * dd_df,
                albedo * lam * dd_dw,
                albedo * (lam * dd_dh + dlam_dh * d),
                lam * d, 0.0, 0.0)
    k = albedo * params.scale
    return (k * d + params.bias,
            k * dd_df, k * dd_dw, k * dd_dh,
            params.scale * d, albedo * d, 1.0)


# ---------------------------------------------------------------------------
# Array variants of the kernels above, used by the batched graph
# linearization. Same formulas in the same evaluation order; inputs must be
# pre-clamped to the valid domain (callers mask invalid rows afterwards).
# ---------------------------------------------------------------------------

def _weight_with_partial_batch(model, h):
    s = np.sqrt(np.maximum(1e-300, 1.0 - h * h))
    deg = np.arccos(h) * _DEG
    if model.kind is ModelKind.MCEWEN:
        g = np.exp(-deg / 60.0)
        return g, g / 60.0 * _DEG / s
    return model.w0 + model.w1 * deg, -model.w1 * _DEG / s


def phase_with_partial_batch(model, h):
    if not model.has_phase_polynomial:
        return np.ones_like(h), np.zeros_like(h)
    deg = np.arccos(h) * _DEG
    m = len(model.c)
    lam = np.zeros_like(h)
    for k in range(m, 0, -1):
        lam = (lam + model.c[k - 1]) * deg
    dlam = np.zeros_like(h)
    for k in range(m, 1, -1):
        dlam = (dlam + k * model.c[k - 1]) * deg
    dlam = dlam + model.c[0]
    ddeg_dh = -_DEG / np.sqrt(np.maximum(1e-300, 1.0 - h * h))
    return 1.0 + lam, dlam * ddeg_dh


def _akimov_with_partials_batch(model, f, w, h):
    phi = np.arccos(h)
    s = np.sqrt(np.maximum(1e-300, 1.0 - h * h))
    dphi_dh = -1.0 / s

    u = (f / w - h) / s
    du_df = 1.0 / (w * s)
    du_dw = -f / (w * w * s)
    du_dh = -1.0 / s + (f / w - h) * h / s**3

    cos_lon = 1.0 / np.sqrt(1.0 + u * u)
    lon = np.arctan(u)
    dlon_du = cos_lon * cos_lon

    if model.kind is ModelKind.AKIMOV:
        alpha = phi / (np.pi - phi)
        dalpha_dphi = np.pi / (np.pi - phi) ** 2
    else:
        g, dg_dh = _weight_with_partial_batch(model, h)
        dg_dphi = dg_dh / dphi_dh
        alpha = g * phi / (np.pi - phi)
        dalpha_dphi = dg_dphi * phi / (np.pi - phi) + g * np.pi / (np.pi - phi) ** 2

    a_term = np.cos(0.5 * phi)
    da_dphi = -0.5 * np.sin(0.5 * phi)
    scale = np.pi / (np.pi - phi)
    dscale_dphi = np.pi / (np.pi - phi) ** 2
    m = scale * (lon - 0.5 * phi)
    c_term = np.cos(m)
    dc_dm = -np.sin(m)
    dm_dphi = dscale_dphi * (lon - 0.5 * phi) - 0.5 * scale
    dm_dlon = scale

    pw = w**alpha
    pc = cos_lon ** (-(alpha + 1.0))
    d = a_term * c_term * pw * pc

    dpw_dw = alpha * w ** (alpha - 1.0)
    dpw_dalpha = pw * np.log(w)
    dpc_dlon = (alpha + 1.0) * u * cos_lon ** (-(alpha + 1.0))
    dpc_dalpha = -pc * np.log(cos_lon)

    dd_dlon = a_term * (dc_dm * dm_dlon * pw * pc + c_term * pw * dpc_dlon)
    dd_dphi = (da_dphi * c_term * pw * pc
               + a_term * dc_dm * dm_dphi * pw * pc
               + a_term * c_term * (dpw_dalpha * pc + pw * dpc_dalpha) * dalpha_dphi)

    dd_df = dd_dlon * dlon_du * du_df
    dd_dw = dd_dlon * dlon_du * du_dw + a_term * c_term * dpw_dw * pc
    dd_dh = dd_dphi * dphi_dh + dd_dlon * dlon_du * du_dh
    return d, dd_df, dd_dw, dd_dh


def disk_with_partials_batch(model, f, w, h):
    if model.kind in (ModelKind.MCEWEN, ModelKind.LUNAR_LAMBERT):
        g, dg_dh = _weight_with_partial_batch(model, h)
        denom = f + w
        d = (1.0 - g) * f + g * 2.0 * f / denom
        dd_df = (1.0 - g) + 2.0 * g * w / denom**2
        dd_dw = -2.0 * g * f / denom**2
        dd_dg = f * (2.0 / denom - 1.0)
        return d, dd_df, dd_dw, dd_dg * dg_dh
    if model.kind is ModelKind.MINNAERT:
        g, dg_dh = _weight_with_partial_batch(model, h)
        d = f**g * w ** (g - 1.0)
        dd_df = g * f ** (g - 1.0) * w ** (g - 1.0)
        dd_dw = (g - 1.0) * f**g * w ** (g - 2.0)
        dd_dg = d * (np.log(f) + np.log(w))
        return d, dd_df, dd_dw, dd_dg * dg_dh
    return _akimov_with_partials_batch(model, f, w, h)


def brightness_with_partials_batch(model, scale, bias, albedo, f, w, h):
    """Array counterpart of brightness_with_partials; all inputs (m,)."""
    d, dd_df, dd_dw, dd_dh = disk_with_partials_batch(model, f, w, h)
    if model.calibrated:
        lam, dlam_dh = phase_with_partial_batch(model, h)
        value = albedo * lam * d
        zeros = np.zeros_like(d)
        return (value, albedo * lam * dd_df, albedo * lam * dd_dw,
                albedo * (lam * dd_dh + dlam_dh * d), lam * d, zeros, zeros)
    k = albedo * scale
    return (k * d + bias, k * dd_df, k * dd_dw, k * dd_dh,
            scale * d, albedo * d, np.ones_like(d))
