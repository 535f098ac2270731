"""Differentiable coded-defocus observation model.

Every scene point spreads light with the PSF of its own depth (scatter
convention); the adjoint is the matching gather.  Borders use half-sample
symmetric extension (``d c b a | a b c d``) of both the image and the depth
map.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _render_py
from .errors import ParameterError
from .optics import CameraParams, CodedPsf, rescaled_size, signed_scale, signed_scale_grad

try:
    from . import _render_ext
except ImportError:  # pragma: no cover - exercised when built without the extension
    _render_ext = None

_BACKENDS = {"python": _render_py}
if _render_ext is not None:
    _BACKENDS["ext"] = _render_ext

DEFAULT_BACKEND = os.environ.get("DFDDPS_BACKEND") or ("ext" if _render_ext is not None else "python")
if DEFAULT_BACKEND not in _BACKENDS:
    raise ImportError(f"DFDDPS_BACKEND={DEFAULT_BACKEND!r} is not available; have {sorted(_BACKENDS)}")


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _backend(name):
    name = name or DEFAULT_BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ParameterError(f"unknown render backend {name!r}; have {sorted(_BACKENDS)}") from None


# -- state ---------------------------------------------------------------

@dataclass(frozen=True)
class RgbdState:
    """All-in-focus RGB (H, W, 3) in [0, 1] plus metric depth (H, W)."""

    rgb: np.ndarray
    depth: np.ndarray
    depth_range: tuple[float, float] = (2.0, 4.0)

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ParameterError(f"rgb must be (H, W, 3), got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise ParameterError(f"depth shape {depth.shape} does not match rgb {rgb.shape[:2]}")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "depth_range", (float(self.depth_range[0]), float(self.depth_range[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def encode(self) -> np.ndarray:
        """Normalized (H, W, 4) view in [-1, 1]: RGB then depth."""
        d_min, d_max = self.depth_range
        out = np.empty(self.shape + (4,))
        out[..., :3] = 2.0 * self.rgb - 1.0
        out[..., 3] = 2.0 * (self.depth - d_min) / (d_max - d_min) - 1.0
        return out

    @classmethod
    def decode(cls, x, depth_range=(2.0, 4.0), clip: bool = True) -> "RgbdState":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != 4:
            raise ParameterError(f"normalized state must be (H, W, 4), got {x.shape}")
        d_min, d_max = depth_range
        rgb = (x[..., :3] + 1.0) / 2.0
        depth = d_min + (x[..., 3] + 1.0) / 2.0 * (d_max - d_min)
        if clip:
            rgb = np.clip(rgb, 0.0, 1.0)
            depth = np.clip(depth, d_min, d_max)
        return cls(rgb, depth, depth_range)


@dataclass(frozen=True)
class Observation:
    image: np.ndarray
    noise_sigma: float
    camera: CameraParams
    psf: CodedPsf

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ParameterError(f"observation must be (H, W, 3), got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ParameterError("observation contains non-finite values")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        object.__setattr__(self, "image", img)


# -- workspace -------------------------------------------------------------

def _reflect_index(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="symmetric")


def _nonzero_radius(kernels: np.ndarray) -> int:
    k = kernels.shape[1]
    c = k // 2
    rows, cols = np.nonzero(kernels.sum(axis=0) > 0)
    if rows.size == 0:
        return 0
    return int(max(np.abs(rows - c).max(), np.abs(cols - c).max()))


def kernel_half_widths(scale, psf: CodedPsf) -> np.ndarray:
    """Per-pixel half-width of the rescaled kernel, trimmed to its nonzero footprint."""
    s = np.abs(np.asarray(scale, dtype=np.float64))
    k = psf.size
    sizes = np.maximum(1, np.ceil(s * k - 1e-12)).astype(np.int64)
    sizes += 1 - sizes % 2
    spec_half = (sizes - 1) // 2
    tight = np.ceil(s * (_nonzero_radius(psf.kernels) + 1) - 1e-12).astype(np.int64) - 1
    return np.minimum(spec_half, np.maximum(tight, 0))


@dataclass
class RenderWorkspace:
    """Reflect-padding index tables for an (H, W) grid with a fixed border."""

    height: int
    width: int
    pad: int
    row_index: np.ndarray = field(init=False, repr=False)
    col_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.row_index = _reflect_index(self.height, self.pad)
        self.col_index = _reflect_index(self.width, self.pad)

    @classmethod
    def for_camera(cls, height: int, width: int, camera: CameraParams, psf: CodedPsf) -> "RenderWorkspace":
        ends = np.array([camera.d_min, camera.d_max])
        hmax = int(kernel_half_widths(signed_scale(ends, camera), psf).max())
        return cls(height, width, hmax)

    def matches(self, height: int, width: int) -> bool:
        return (height, width) == (self.height, self.width)

    def pad_array(self, arr: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(arr[self.row_index][:, self.col_index])

    def fold(self, arr_pad: np.ndarray) -> np.ndarray:
        """Adjoint of ``pad_array``: accumulate padded entries onto their sources."""
        rows = np.zeros((self.height,) + arr_pad.shape[1:])
        np.add.at(rows, self.row_index, arr_pad)
        out = np.zeros((self.height, self.width) + arr_pad.shape[2:])
        np.add.at(out, (slice(None), self.col_index), rows)
        return out


def _prepare(x: RgbdState, camera: CameraParams, psf: CodedPsf, workspace):
    h, w = x.shape
    d_min, d_max = camera.depth_range
    tol = 1e-9 * (d_max - d_min)
    if np.any(x.depth < d_min - tol) or np.any(x.depth > d_max + tol) or not np.all(np.isfinite(x.depth)):
        raise ParameterError(f"depth outside camera range [{d_min}, {d_max}]")
    depth = np.clip(x.depth, d_min, d_max)
    if workspace is None or not workspace.matches(h, w):
        workspace = RenderWorkspace.for_camera(h, w, camera, psf)
    scale = signed_scale(depth, camera)
    s_pad = workspace.pad_array(scale)
    half = np.ascontiguousarray(kernel_half_widths(s_pad, psf), dtype=np.int64)
    rgb_pad = workspace.pad_array(x.rgb)
    return workspace, depth, s_pad, half, rgb_pad


def render(x: RgbdState, camera: CameraParams, psf: CodedPsf,
           workspace: RenderWorkspace | None = None, backend: str | None = None) -> np.ndarray:
    """Coded-defocus image (H, W, 3) of an RGBD scene."""
    workspace, _, s_pad, half, rgb_pad = _prepare(x, camera, psf, workspace)
    h, w = x.shape
    ref = np.ascontiguousarray(psf.kernels)
    return np.asarray(_backend(backend).render_core(rgb_pad, s_pad, half, ref, h, w, workspace.pad))


def render_vjp(x: RgbdState, cotangent, camera: CameraParams, psf: CodedPsf,
               workspace: RenderWorkspace | None = None, backend: str | None = None):
    """Vector-Jacobian product of ``render`` at ``x``: (grad_rgb, grad_depth)."""
    cot = np.ascontiguousarray(cotangent, dtype=np.float64)
    if cot.shape != x.rgb.shape:
        raise ParameterError(f"cotangent shape {cot.shape} does not match image {x.rgb.shape}")
    workspace, depth, s_pad, half, rgb_pad = _prepare(x, camera, psf, workspace)
    ref = np.ascontiguousarray(psf.kernels)
    g_rgb_pad, g_s_pad = _backend(backend).render_vjp_core(rgb_pad, s_pad, half, ref, cot, workspace.pad)
    grad_rgb = workspace.fold(np.asarray(g_rgb_pad))
    grad_depth = workspace.fold(np.asarray(g_s_pad)) * signed_scale_grad(depth, camera)
    return grad_rgb, grad_depth


def data_fidelity(x: RgbdState, y: Observation, **kw) -> float:
    img = render(x, y.camera, y.psf, **kw)
    if img.shape != y.image.shape:
        raise ParameterError("observation and scene shapes differ")
    r = y.image - img
    return float(np.sum(r * r))


def data_fidelity_grad(x: RgbdState, y: Observation, **kw) -> np.ndarray:
    """Gradient of ``data_fidelity`` with respect to the normalized (H, W, 4) state."""
    img = render(x, y.camera, y.psf, **kw)
    if img.shape != y.image.shape:
        raise ParameterError("observation and scene shapes differ")
    g_rgb, g_d = render_vjp(x, 2.0 * (img - y.image), y.camera, y.psf, **kw)
    d_min, d_max = y.camera.depth_range
    out = np.empty(x.shape + (4,))
    out[..., :3] = 0.5 * g_rgb
    out[..., 3] = 0.5 * (d_max - d_min) * g_d
    return out


def add_observation_noise(clean, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    clean = np.asarray(clean, dtype=np.float64)
    if sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    return clean + sigma * rng.standard_normal(clean.shape)


def psnr_label_db(sigma: float) -> float:
    """Nominal PSNR (peak 1) of i.i.d. noise with standard deviation ``sigma``."""
    return -20.0 * math.log10(sigma)


# -- operator used by the samplers ---------------------------------------

class CodedDefocusOperator:
    """Measurement term ``||y - f(x)||^2`` on normalized (H, W, 4) states.

    Depth is clamped to the camera range before rendering; the clamp's
    gradient is the identity inside the range and zero outside.  RGB is
    rendered without clamping.
    """

    def __init__(self, observation: Observation, backend: str | None = None):
        self.y = observation
        self.camera = observation.camera
        self.backend = backend
        h, w = observation.image.shape[:2]
        self.shape = (h, w, 4)
        self.workspace = RenderWorkspace.for_camera(h, w, self.camera, observation.psf)

    def _state(self, x):
        d_min, d_max = self.camera.depth_range
        rgb = (x[..., :3] + 1.0) / 2.0
        depth_raw = d_min + (x[..., 3] + 1.0) / 2.0 * (d_max - d_min)
        inside = (depth_raw >= d_min) & (depth_raw <= d_max)
        depth = np.clip(depth_raw, d_min, d_max)
        return RgbdState(rgb, depth, self.camera.depth_range), inside

    def apply(self, x) -> np.ndarray:
        state, _ = self._state(np.asarray(x, dtype=np.float64))
        return render(state, self.camera, self.y.psf, self.workspace, self.backend)

    def fidelity(self, x) -> float:
        r = self.y.image - self.apply(x)
        return float(np.sum(r * r))

    def fidelity_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        state, inside = self._state(x)
        img = render(state, self.camera, self.y.psf, self.workspace, self.backend)
        resid = img - self.y.image
        g_rgb, g_d = render_vjp(state, 2.0 * resid, self.camera, self.y.psf, self.workspace, self.backend)
        d_min, d_max = self.camera.depth_range
        grad = np.empty_like(x)
        grad[..., :3] = 0.5 * g_rgb
        grad[..., 3] = np.where(inside, 0.5 * (d_max - d_min) * g_d, 0.0)
        return float(np.sum(resid * resid)), grad

    def decode(self, x) -> RgbdState:
        return RgbdState.decode(x, self.camera.depth_range)
