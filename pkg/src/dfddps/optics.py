"""Coded-aperture PSF handling: normalization, depth-to-scale, rescaling, calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DegeneratePsfError, ParameterError

CHANNELS = ("R", "G", "B")
DEFAULT_SCALE_FLOOR = 0.05


@dataclass(frozen=True)
class CodedPsf:
    """Per-channel reference PSF, shape (3, k, k) with k odd."""

    kernels: np.ndarray
    pixel_pitch: float = 13e-6
    reference_depth: float = 2.0

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=np.float64)
        if kernels.ndim != 3 or kernels.shape[0] != 3 or kernels.shape[1] != kernels.shape[2]:
            raise ParameterError(f"PSF kernels must have shape (3, k, k), got {kernels.shape}")
        if kernels.shape[1] % 2 == 0:
            raise ParameterError("PSF support must be odd")
        if np.any(kernels < 0) or not np.all(np.isfinite(kernels)):
            raise ParameterError("PSF values must be finite and non-negative")
        kernels.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)

    @property
    def size(self) -> int:
        return int(self.kernels.shape[1])

    def channel_sums(self) -> np.ndarray:
        return self.kernels.sum(axis=(1, 2))


@dataclass(frozen=True)
class CameraParams:
    focal_length: float = 0.035
    f_number: float = 1.8
    pixel_pitch: float = 13e-6
    focus_distance: float = 1.5
    aperture_width: float = 4.58e-3
    depth_range: tuple[float, float] = (2.0, 4.0)
    # depth at which the reference PSF has scale 1
    reference_depth: float = 2.0
    scale_floor: float = DEFAULT_SCALE_FLOOR
    flip_near: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depth_range", tuple(float(v) for v in self.depth_range))
        f = self.focal_length
        d_min, d_max = self.depth_range
        if f <= 0 or self.f_number <= 0 or self.pixel_pitch <= 0:
            raise ParameterError("focal_length, f_number and pixel_pitch must be positive")
        if self.focus_distance <= f:
            raise ParameterError("focus_distance must exceed focal_length")
        if d_min <= f or d_max <= d_min:
            raise ParameterError("depth_range must satisfy focal_length < d_min < d_max")
        if self.reference_depth <= f or self.reference_depth == self.focus_distance:
            raise ParameterError("reference_depth must be beyond the lens and away from focus")
        if self.scale_floor <= 0:
            raise ParameterError("scale_floor must be positive")

    @property
    def aperture_diameter(self) -> float:
        return self.focal_length / self.f_number

    @property
    def d_min(self) -> float:
        return self.depth_range[0]

    @property
    def d_max(self) -> float:
        return self.depth_range[1]

    def to_dict(self) -> dict:
        return {
            "focal_length": self.focal_length, "f_number": self.f_number,
            "pixel_pitch": self.pixel_pitch, "focus_distance": self.focus_distance,
            "aperture_width": self.aperture_width, "depth_range": list(self.depth_range),
            "reference_depth": self.reference_depth, "scale_floor": self.scale_floor,
            "flip_near": self.flip_near,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "CameraParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ParameterError(f"unknown camera keys: {sorted(unknown)}")
        cfg = dict(cfg)
        if "depth_range" in cfg:
            cfg["depth_range"] = tuple(cfg["depth_range"])
        return cls(**cfg)


def paper_camera(**overrides) -> CameraParams:
    """35 mm f/1.8, 13 um pitch, focus 1.5 m, objects at 2-4 m."""
    return CameraParams(**overrides)


def desk_camera(**overrides) -> CameraParams:
    """Paper optics with 2x2 pixel binning, which keeps blur kernels small at 64x64."""
    params = dict(pixel_pitch=26e-6)
    params.update(overrides)
    return CameraParams(**params)


# -- normalization -------------------------------------------------------

def normalize_psf(raw, pixel_pitch: float = 13e-6, reference_depth: float = 2.0) -> CodedPsf:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = np.repeat(raw[None], 3, axis=0)
    if np.any(raw < 0):
        raise ParameterError("raw PSF has negative values")
    sums = raw.sum(axis=(1, 2))
    if np.any(sums <= 0):
        bad = [CHANNELS[i] for i in np.flatnonzero(sums <= 0)]
        raise DegeneratePsfError(f"PSF channel(s) {bad} are all zero")
    return CodedPsf(raw / sums[:, None, None], pixel_pitch, reference_depth)


# -- depth to scale ------------------------------------------------------

def circle_of_confusion(d, camera: CameraParams):
    """Thin-lens blur diameter (meters on the sensor) for an object at depth ``d``."""
    d = np.asarray(d, dtype=np.float64)
    f, df = camera.focal_length, camera.focus_distance
    if np.any(d <= f):
        raise ParameterError("depth must exceed the focal length")
    return camera.aperture_diameter * f * np.abs(d - df) / (d * (df - f))


def _coc_derivative(d, camera: CameraParams):
    f, df = camera.focal_length, camera.focus_distance
    mag = camera.aperture_diameter * f * df / (d * d * (df - f))
    return np.sign(d - df) * mag


def depth_to_scale(d, camera: CameraParams):
    """Blur scale relative to the reference depth, clamped below at ``scale_floor``."""
    ratio = circle_of_confusion(d, camera) / circle_of_confusion(camera.reference_depth, camera)
    out = np.maximum(ratio, camera.scale_floor)
    return float(out) if np.ndim(out) == 0 else out


def depth_to_scale_grad(d, camera: CameraParams):
    """d(scale)/d(depth); zero where the floor clamp is active."""
    d = np.asarray(d, dtype=np.float64)
    c_ref = circle_of_confusion(camera.reference_depth, camera)
    ratio = circle_of_confusion(d, camera) / c_ref
    grad = np.where(ratio > camera.scale_floor, _coc_derivative(d, camera) / c_ref, 0.0)
    return float(grad) if np.ndim(grad) == 0 else grad


def signed_scale(d, camera: CameraParams):
    """Scale carrying the near-side flip as a sign: negative means a 180 degree flip."""
    s = np.asarray(depth_to_scale(d, camera), dtype=np.float64)
    if camera.flip_near:
        s = np.where(np.asarray(d) < camera.focus_distance, -s, s)
    return s


def signed_scale_grad(d, camera: CameraParams):
    g = np.asarray(depth_to_scale_grad(d, camera), dtype=np.float64)
    if camera.flip_near:
        g = np.where(np.asarray(d) < camera.focus_distance, -g, g)
    return g


# -- rescaling -----------------------------------------------------------

def rescaled_size(k: int, scale: float) -> int:
    n = max(1, math.ceil(abs(scale) * k - 1e-12))
    return n if n % 2 else n + 1


def _tent_weights(k: int, size: int, scale: float):
    """Bilinear interpolation matrix W (size, k) and dW/dscale for one axis."""
    center_in = (k - 1) / 2
    h = (size - 1) // 2
    u = np.arange(-h, h + 1, dtype=np.float64)
    src = center_in + u / scale
    diff = src[:, None] - np.arange(k, dtype=np.float64)[None, :]
    w = np.maximum(0.0, 1.0 - np.abs(diff))
    dsrc = -u / (scale * scale)
    dw = np.where(np.abs(diff) < 1.0, -np.sign(diff), 0.0) * dsrc[:, None]
    return w, dw


def _delta(n_channels: int) -> np.ndarray:
    return np.ones((n_channels, 1, 1))


def rescale_kernels(kernels: np.ndarray, scale: float, with_grad: bool = False):
    """Resample (C, k, k) kernels by ``scale`` about the center and renormalize.

    A negative scale resamples the point-reflected kernel.  Returns the kernels
    and, if requested, their derivative with respect to ``scale``.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    if scale == 0:
        raise ParameterError("scale must be nonzero")
    c, k, _ = kernels.shape
    size = rescaled_size(k, scale)
    if size == 1:
        out = _delta(c)
        return (out, np.zeros_like(out)) if with_grad else out
    w, dw = _tent_weights(k, size, scale)
    raw = np.einsum("ai,cij,bj->cab", w, kernels, w)
    sums = raw.sum(axis=(1, 2))
    if np.any(sums <= 0):
        # footprint missed all mass; fall back to a point kernel
        out = np.zeros((c, size, size))
        out[:, size // 2, size // 2] = 1.0
        return (out, np.zeros_like(out)) if with_grad else out
    out = raw / sums[:, None, None]
    if not with_grad:
        return out
    draw = np.einsum("ai,cij,bj->cab", dw, kernels, w) + np.einsum("ai,cij,bj->cab", w, kernels, dw)
    dsums = draw.sum(axis=(1, 2))
    grad = (draw - out * dsums[:, None, None]) / sums[:, None, None]
    return out, grad


def rescale_psf(psf: CodedPsf, scale: float) -> CodedPsf:
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    return CodedPsf(rescale_kernels(psf.kernels, scale), psf.pixel_pitch, psf.reference_depth)


def rescale_psf_dscale(psf: CodedPsf, scale: float, scale_floor: float = DEFAULT_SCALE_FLOOR) -> np.ndarray:
    """Derivative of ``rescale_psf(psf, scale).kernels`` with respect to ``scale``."""
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if scale <= scale_floor:
        size = rescaled_size(psf.size, scale_floor)
        return np.zeros((3, size, size))
    return rescale_kernels(psf.kernels, scale, with_grad=True)[1]


# -- calibration ---------------------------------------------------------

def calibrate_reference_psf(pinhole_image, background, k: int, *, threshold: float = 1e-3,
                            pixel_pitch: float = 13e-6, reference_depth: float = 2.0) -> CodedPsf:
    """Estimate the reference PSF from a pinhole frame and a dark/background frame.

    ``pinhole_image`` and ``background`` are (H, W, 3).  ``threshold`` is the
    minimum peak of the background-subtracted signal, relative to the peak of
    the pinhole frame.
    """
    if k < 1 or k % 2 == 0:
        raise ParameterError("calibration window k must be odd")
    img = np.asarray(pinhole_image, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if img.shape != bg.shape or img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError("pinhole and background frames must both be (H, W, 3)")
    sig = np.clip(img - bg, 0.0, None)
    lum = sig.sum(axis=2)
    peak = lum.max()
    scale = max(np.abs(img).max(), 1e-300)
    if peak <= threshold * scale:
        raise CalibrationError("no pinhole peak above threshold")
    total = lum.sum()
    rows, cols = np.indices(lum.shape)
    cy = int(round(float((rows * lum).sum() / total)))
    cx = int(round(float((cols * lum).sum() / total)))
    h = k // 2
    H, W = lum.shape
    if cy - h < 0 or cx - h < 0 or cy + h >= H or cx + h >= W:
        raise CalibrationError(f"peak at ({cy}, {cx}) too close to the frame edge for a {k}x{k} crop")
    crop = sig[cy - h:cy + h + 1, cx - h:cx + h + 1, :].transpose(2, 0, 1)
    return normalize_psf(crop, pixel_pitch, reference_depth)


# -- synthetic reference PSF ----------------------------------------------

def coded_pattern(n: int = 5, seed: int = 3, fill: float = 0.55) -> np.ndarray:
    """Binary n x n aperture code with at least the center open and a balanced centroid."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        pat = (rng.random((n, n)) < fill).astype(np.float64)
        pat[n // 2, n // 2] = 1.0
        rows, cols = np.indices(pat.shape)
        cy = (rows * pat).sum() / pat.sum()
        cx = (cols * pat).sum() / pat.sum()
        if abs(cy - n // 2) < 0.25 and abs(cx - n // 2) < 0.25:
            return pat
    raise RuntimeError("could not draw a centered coded pattern")


def synthetic_coded_psf(n: int = 5, seed: int = 3, pixel_pitch: float = 26e-6,
                        reference_depth: float = 2.0,
                        channel_spread=(0.10, 0.0, 0.05)) -> CodedPsf:
    """Reference PSF from a binary code, with a one-pixel zero border.

    A small per-channel blur stands in for the calibrated color response; the
    zero border keeps rescaled kernels continuous in scale.
    """
    pat = coded_pattern(n, seed)
    k = n + 2
    chans = []
    for spread in channel_spread:
        base = np.zeros((k, k))
        base[1:-1, 1:-1] = pat
        if spread > 0:
            blurred = base.copy()
            blurred[1:-1, 1:-1] = (1 - 4 * spread) * base[1:-1, 1:-1] + spread * (
                base[:-2, 1:-1] + base[2:, 1:-1] + base[1:-1, :-2] + base[1:-1, 2:])
            base = blurred
        chans.append(base)
    return normalize_psf(np.stack(chans), pixel_pitch, reference_depth)


# -- bank ----------------------------------------------------------------

@dataclass(frozen=True)
class PsfBank:
    scales: np.ndarray
    kernels_by_scale: tuple
    depths: np.ndarray = field(default=None)

    def depth_of(self, index: int) -> float:
        return float(self.depths[index])

    def __len__(self) -> int:
        return len(self.kernels_by_scale)


def build_psf_bank(psf: CodedPsf, camera: CameraParams, n_depths: int) -> PsfBank:
    if n_depths < 2:
        raise ParameterError("n_depths must be >= 2")
    depths = np.linspace(camera.d_min, camera.d_max, n_depths)
    scales = np.asarray(signed_scale(depths, camera), dtype=np.float64)
    order = np.argsort(np.abs(scales), kind="stable")
    mags = np.abs(scales[order])
    if np.any(np.diff(mags) <= 0):
        raise ParameterError("depth range maps to repeated blur scales (straddles focus?)")
    kernels = tuple(
        CodedPsf(rescale_kernels(psf.kernels, float(scales[i])), psf.pixel_pitch, psf.reference_depth)
        for i in order)
    return PsfBank(mags, kernels, depths[order])
