"""Run configuration and the per-scene building blocks shared by the CLI and the acceptance suite.

A run configuration is a JSON object with the sections in ``DEFAULTS``.
Unknown keys are rejected and every value is validated by constructing the
corresponding typed object before any computation starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .baseline import BaselineConfig, depth_sweep_reconstruct
from .errors import ParameterError
from .forward import CodedDefocusOperator, Observation, RgbdState, add_observation_noise, render
from .io import read_psf
from .optics import CameraParams, build_psf_bank, synthetic_coded_psf
from .prior import GaussianPrior, GmmPrior, TinyDenoiser, TrainConfig
from .samplers import SamplerConfig, Trajectory, sample_ddpm, sample_dfd_dps, sample_dps
from .scenes import SceneSpec, generate_scene
from .schedule import NoiseSchedule, build_schedule

METHODS = ("dfd_dps", "dps", "ddpm_prior_only", "baseline")
PRIOR_KINDS = ("denoiser", "gaussian", "gmm")

DEFAULTS = {
    "seed": 0,
    "sigma": 0.01,
    "n_scenes": 4,
    "method": "dfd_dps",
    "out": "runs",
    "camera": {"pixel_pitch": 26e-6},
    "psf": {"path": None, "pattern_size": 5, "pattern_seed": 3},
    "scene": {"height": 64, "width": 64},
    "schedule": {"kind": "linear", "n_steps": 200, "beta_min": None, "beta_max": None},
    "sampler": {"tau": 1.0, "tau_mode": "normalized", "zeta": 1.0, "zeta_mode": "normalized",
                "variant": "ddpm_posterior", "inner_grad_steps": 1, "n_steps": None,
                "record_stride": 1, "snapshot_stride": 20, "clip_x0": None,
                "channel_weights": None},
    "prior": {"kind": "denoiser", "checkpoint": None, "mean": 0.0, "variance": 0.25,
              "n_components": 8, "component_variance": 0.01, "component_seed": 900},
    "baseline": {},
    "train": {"steps": 5000, "batch_size": 64, "learning_rate": 0.2, "momentum": 0.9,
              "grad_clip": 10.0, "log_every": 50, "n_patches": 4000, "n_train_scenes": 300,
              "train_scene_seed": 1000, "hidden": [256, 256], "patch": 16,
              "resume": None, "data": None},
}

_OPEN_SECTIONS = {"camera", "scene", "baseline"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            if path.rstrip(".") in _OPEN_SECTIONS:
                out[key] = val
                continue
            raise ParameterError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ParameterError(f"config key {where} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None) -> dict:
    """DEFAULTS, updated from a JSON file, then from flat ``overrides`` (None values skipped)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ParameterError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ParameterError("config root must be an object")
        cfg = _merge(cfg, raw)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = val
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed object once so bad values fail before any work."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ParameterError("seed must be a non-negative integer")
    if not isinstance(cfg["sigma"], (int, float)) or not 0 <= cfg["sigma"] <= 1:
        raise ParameterError("sigma must lie in [0, 1]")
    if not isinstance(cfg["n_scenes"], int) or cfg["n_scenes"] < 1:
        raise ParameterError("n_scenes must be a positive integer")
    if cfg["method"] not in METHODS:
        raise ParameterError(f"method must be one of {METHODS}")
    if cfg["prior"]["kind"] not in PRIOR_KINDS:
        raise ParameterError(f"prior.kind must be one of {PRIOR_KINDS}")
    camera = make_camera(cfg)
    make_scene_spec(cfg, 0).check_camera(camera)
    schedule = make_schedule(cfg)
    make_sampler_config(cfg, 0).steps_for(schedule)
    make_baseline_config(cfg)
    make_train_config(cfg)
    pr = cfg["prior"]
    if pr["variance"] <= 0 or pr["component_variance"] <= 0 or pr["n_components"] < 1:
        raise ParameterError("prior variances and n_components must be positive")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def make_camera(cfg) -> CameraParams:
    return CameraParams.from_dict(cfg["camera"])


def make_psf(cfg):
    p = cfg["psf"]
    if p["path"]:
        return read_psf(p["path"])
    camera = make_camera(cfg)
    return synthetic_coded_psf(p["pattern_size"], p["pattern_seed"], camera.pixel_pitch,
                               camera.reference_depth)


def make_schedule(cfg) -> NoiseSchedule:
    s = cfg["schedule"]
    return build_schedule(s["kind"], s["n_steps"], s["beta_min"], s["beta_max"])


def make_scene_spec(cfg, index: int) -> SceneSpec:
    scene = dict(cfg["scene"])
    scene.setdefault("depth_range", tuple(cfg["camera"].get("depth_range", (2.0, 4.0))))
    scene["seed"] = scene_seed(cfg, index)
    return SceneSpec.from_dict(scene)


def make_sampler_config(cfg, seed: int) -> SamplerConfig:
    s = dict(cfg["sampler"])
    if s["channel_weights"] is not None:
        s["channel_weights"] = tuple(s["channel_weights"])
    return SamplerConfig(seed=seed, **s)


def make_baseline_config(cfg) -> BaselineConfig:
    return BaselineConfig.from_dict(cfg["baseline"])


def make_train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=t["steps"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                       momentum=t["momentum"], grad_clip=t["grad_clip"], seed=cfg["seed"],
                       log_every=t["log_every"])


# seeds for the independent random streams of scene i
def scene_seed(cfg, index: int) -> int:
    return cfg["seed"] * 100_003 + index


def noise_seed(cfg, index: int) -> int:
    return cfg["seed"] * 100_003 + index + 50_000


def sampler_seed(cfg, index: int) -> int:
    return cfg["seed"] * 100_003 + index + 70_000


def simulate_scene(state: RgbdState, camera, psf, sigma: float, seed: int):
    """(clean render, noisy Observation) for one ground-truth state."""
    clean = render(state, camera, psf)
    return clean, Observation(add_observation_noise(clean, sigma, seed), sigma, camera, psf)


def toy_gmm_prior(spec: SceneSpec, n_components: int, variance: float, seed: int) -> GmmPrior:
    """Equal-weight mixture centred on ``n_components`` procedural scenes."""
    means = []
    for i in range(n_components):
        fields = spec.to_dict()
        fields["seed"] = seed + i
        means.append(generate_scene(SceneSpec.from_dict(fields)).encode())
    return GmmPrior(np.full(n_components, 1.0 / n_components), np.stack(means), variance)


def make_prior(cfg, shape):
    pr = cfg["prior"]
    if pr["kind"] == "gaussian":
        return GaussianPrior(np.full(shape, float(pr["mean"])), pr["variance"])
    if pr["kind"] == "gmm":
        spec = make_scene_spec(cfg, 0)
        return toy_gmm_prior(spec, pr["n_components"], pr["component_variance"], pr["component_seed"])
    if not pr["checkpoint"]:
        raise ParameterError("prior.kind = denoiser needs prior.checkpoint")
    model = TinyDenoiser.load(pr["checkpoint"])
    if model.n_schedule_steps != cfg["schedule"]["n_steps"]:
        raise ParameterError("checkpoint was trained for a schedule of a different length")
    return model


def reconstruct(method: str, y: Observation, cfg, seed: int, prior=None, schedule=None):
    """Run one reconstruction; returns (RgbdState, Trajectory or None)."""
    if method not in METHODS:
        raise ParameterError(f"method must be one of {METHODS}")
    if method == "baseline":
        bcfg = make_baseline_config(cfg)
        bank = build_psf_bank(y.psf, y.camera, bcfg.n_depths)
        return depth_sweep_reconstruct(y, bank, bcfg).state, None
    schedule = schedule or make_schedule(cfg)
    op = CodedDefocusOperator(y)
    prior = prior if prior is not None else make_prior(cfg, op.shape)
    scfg = make_sampler_config(cfg, seed)
    if method == "dfd_dps":
        return sample_dfd_dps(prior, schedule, op, scfg)
    traj = Trajectory()
    if method == "dps":
        return sample_dps(prior, schedule, op, scfg, trajectory=traj), traj
    x = sample_ddpm(prior, schedule, op.shape, seed=seed, config=scfg, operator=op, trajectory=traj)
    return op.decode(x), traj
