"""Deterministic procedural RGBD scenes: textured rectangles over a sloped floor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ParameterError
from .forward import RgbdState

TEXTURES = ("noise", "checker", "flat")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_objects: int = 3
    depth_range: tuple = (2.0, 4.0)
    texture: str = "noise"
    # fraction of the depth range spanned by the floor from top to bottom row
    slope_range: tuple = (0.2, 0.8)
    floor: bool = True
    object_size: tuple = (0.2, 0.45)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depth_range", tuple(float(v) for v in self.depth_range))
        object.__setattr__(self, "slope_range", tuple(float(v) for v in self.slope_range))
        object.__setattr__(self, "object_size", tuple(float(v) for v in self.object_size))
        d_min, d_max = self.depth_range
        if self.height < 4 or self.width < 4:
            raise ParameterError("scene must be at least 4x4")
        if not d_min < d_max:
            raise ParameterError("depth_range must satisfy d_min < d_max")
        if self.n_objects < 0:
            raise ParameterError("n_objects must be >= 0")
        if self.texture not in TEXTURES:
            raise ParameterError(f"texture must be one of {TEXTURES}")
        lo, hi = self.slope_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError("slope_range must satisfy 0 <= lo <= hi <= 1")
        lo, hi = self.object_size
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError("object_size must satisfy 0 < lo <= hi <= 1")

    def check_camera(self, camera) -> None:
        if self.depth_range[0] < camera.d_min or self.depth_range[1] > camera.d_max:
            raise ParameterError(f"scene depth range {self.depth_range} outside camera range {camera.depth_range}")

    @classmethod
    def from_dict(cls, cfg: dict) -> "SceneSpec":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


def _texture(kind, shape, base, rng):
    h, w = shape
    if kind == "flat":
        return np.broadcast_to(base, (h, w, 3)).copy()
    if kind == "checker":
        cell = int(rng.integers(2, 5))
        rows, cols = np.indices((h, w))
        pattern = ((rows // cell + cols // cell) % 2)[..., None] - 0.5
        return np.clip(base + 0.5 * pattern * rng.uniform(0.3, 0.6, 3), 0.0, 1.0)
    noise = gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(1.0, 1.0, 0.0))
    noise /= noise.std() + 1e-12
    return np.clip(base + 0.15 * noise, 0.0, 1.0)


def generate_scene_with_mask(spec: SceneSpec):
    """Scene plus its instance mask (0 = floor, i = i-th object, -1 = background)."""
    if spec.n_objects == 0 and not spec.floor:
        raise ParameterError("degenerate scene: no floor and no objects")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    d_min, d_max = spec.depth_range
    rgb = np.zeros((h, w, 3))
    mask = np.full((h, w), -1, dtype=np.int64)
    if spec.floor:
        g = rng.uniform(*spec.slope_range)
        rows = np.arange(h)[:, None] / max(h - 1, 1)
        # far at the top row, near at the bottom
        depth = np.broadcast_to(d_max - g * (d_max - d_min) * rows, (h, w)).copy()
        rgb[:] = _texture(spec.texture, (h, w), rng.uniform(0.25, 0.75, 3), rng)
        mask[:] = 0
    else:
        depth = np.full((h, w), d_max)
    objects = []
    for i in range(spec.n_objects):
        oh = max(2, int(round(rng.uniform(*spec.object_size) * h)))
        ow = max(2, int(round(rng.uniform(*spec.object_size) * w)))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        d = rng.uniform(d_min, d_max)
        tex = _texture(spec.texture, (oh, ow), rng.uniform(0.1, 0.9, 3), rng)
        objects.append((d, i + 1, top, left, oh, ow, tex))
    # paint far to near so the nearest surface wins
    for d, label, top, left, oh, ow, tex in sorted(objects, key=lambda o: -o[0]):
        sl = (slice(top, top + oh), slice(left, left + ow))
        closer = depth[sl] > d
        if not spec.floor:
            closer |= mask[sl] < 0
        depth[sl] = np.where(closer, d, depth[sl])
        rgb[sl] = np.where(closer[..., None], tex, rgb[sl])
        mask[sl] = np.where(closer, label, mask[sl])
    if np.any(mask < 0):
        # no floor: uncovered pixels become a flat far backdrop
        rgb[mask < 0] = 0.5
    depth = np.clip(depth, d_min, d_max)
    return RgbdState(rgb, depth, spec.depth_range), mask


def generate_scene(spec: SceneSpec) -> RgbdState:
    return generate_scene_with_mask(spec)[0]


def two_plane_scene(height: int, width: int, depths, texture: str = "noise", seed: int = 0,
                    depth_range=(2.0, 4.0)):
    """Left half at ``depths[0]``, right half at ``depths[1]``; returns (state, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((height, width), dtype=np.int64)
    labels[:, width // 2:] = 1
    rgb = np.empty((height, width, 3))
    for lab in (0, 1):
        tex = _texture(texture, (height, width), rng.uniform(0.3, 0.7, 3), rng)
        rgb[labels == lab] = tex[labels == lab]
    depth = np.where(labels == 0, depths[0], depths[1]).astype(np.float64)
    return RgbdState(rgb, depth, depth_range), labels
