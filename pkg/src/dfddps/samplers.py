"""Reverse-diffusion samplers: DDPM, DDIM, DPS and the x0-space guided DFD-DPS.

All stochastic samplers draw from one ``numpy.random.default_rng(seed)``
stream in the same order (initial state, then one ``z`` per step), so with
zero guidance the guided samplers reproduce ``sample_ddpm`` bit for bit.

Guided samplers take a measurement operator exposing ``shape``,
``fidelity_and_grad(x) -> (||y - f(x)||^2, gradient)`` and ``decode(x)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapabilityError, NumericalError, ParameterError
from .schedule import VARIANTS, NoiseSchedule, posterior_step_coefficients, x0_from_score

log = logging.getLogger(__name__)

STEP_MODES = ("normalized", "constant")


@dataclass
class SamplerConfig:
    """Reverse-process settings.

    ``tau`` / ``zeta`` are base step sizes.  In ``normalized`` mode the x0-space
    step is ``tau / (||grad|| + stab)`` and the DPS step is
    ``zeta / ||y - f(x0_hat)||``; in ``constant`` mode they are used as is.
    Explicit ``tau_schedule`` / ``zeta_schedule`` arrays, indexed by ``t - 1``,
    override both.
    """

    n_steps: int | None = None
    tau: float = 1.0
    tau_mode: str = "normalized"
    tau_schedule: np.ndarray | None = None
    zeta: float = 1.0
    zeta_mode: str = "normalized"
    zeta_schedule: np.ndarray | None = None
    variant: str = "ddpm_posterior"
    seed: int = 0
    inner_grad_steps: int = 1
    eta: float = 0.0
    channel_weights: tuple | None = None
    clip_x0: float | None = None
    record_stride: int = 1
    snapshot_stride: int = 20
    stab: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.tau_mode not in STEP_MODES or self.zeta_mode not in STEP_MODES:
            raise ParameterError(f"step modes must be one of {STEP_MODES}")
        if self.tau < 0 or self.zeta < 0:
            raise ParameterError("step sizes must be >= 0")
        for sched in (self.tau_schedule, self.zeta_schedule):
            if sched is not None and np.any(np.asarray(sched) < 0):
                raise ParameterError("step-size schedules must be >= 0")
        if self.inner_grad_steps < 1 or self.record_stride < 1 or self.snapshot_stride < 1:
            raise ParameterError("inner_grad_steps and strides must be >= 1")
        if self.eta < 0:
            raise ParameterError("eta must be >= 0")

    def steps_for(self, schedule: NoiseSchedule) -> int:
        n = schedule.n_steps if self.n_steps is None else int(self.n_steps)
        if not 1 <= n <= schedule.n_steps:
            raise ParameterError(f"n_steps {n} outside [1, {schedule.n_steps}]")
        for sched in (self.tau_schedule, self.zeta_schedule):
            if sched is not None and len(sched) < n:
                raise ParameterError("step-size schedule shorter than the number of steps")
        return n


@dataclass
class TrajectoryRecord:
    step: int
    t: int
    fidelity: float
    tau: float
    xt_mean: float
    xt_std: float
    x0_hat: np.ndarray | None = None
    x0_prime: np.ndarray | None = None


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def fidelities(self) -> np.ndarray:
        return np.array([r.fidelity for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} at diffusion step t={t}", step=t)


def _clip(x0, config):
    return x0 if config.clip_x0 is None else np.clip(x0, -config.clip_x0, config.clip_x0)


def _reverse_update(x, x0, t, schedule, variant, z):
    c_xt, c_x0, sigma = posterior_step_coefficients(t, schedule, variant)
    return c_xt * x + c_x0 * x0 + sigma * z


def _record(traj, config, step, t, x, x0, x0p, fid, tau, last):
    if traj is None or step % config.record_stride:
        return
    snap = last or step % config.snapshot_stride == 0
    traj.records.append(TrajectoryRecord(
        step, t, float(fid), float(tau), float(np.mean(x)), float(np.std(x)),
        x0.copy() if snap else None, x0p.copy() if snap else None))


def sample_ddpm(model, schedule: NoiseSchedule, shape, seed: int = 0,
                config: SamplerConfig | None = None, operator=None,
                trajectory: Trajectory | None = None) -> np.ndarray:
    """Ancestral sampling from the prior; returns the normalized clean state.

    ``config.seed`` is ignored in favour of ``seed``.  If an ``operator`` and a
    ``trajectory`` are given, the data fidelity of each clean estimate is
    recorded (it does not influence the sample).
    """
    config = config or SamplerConfig()
    n = config.steps_for(schedule)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for step, t in enumerate(range(n, 0, -1)):
        x0 = _clip(x0_from_score(x, t, model.score(x, t, schedule), schedule), config)
        z = rng.standard_normal(shape)
        if trajectory is not None and operator is not None:
            _record(trajectory, config, step, t, x, x0, x0, operator.fidelity(x0), 0.0, t == 1)
        x = _reverse_update(x, x0, t, schedule, config.variant, z)
        _check_finite(x, "state", t)
    return x


def sample_ddim(model, schedule: NoiseSchedule, shape, eta: float = 0.0, steps=None,
                seed: int = 0, x_init=None) -> np.ndarray:
    """DDIM over a descending subsequence ``steps`` of schedule times.

    With ``eta == 0`` no random numbers are drawn after the initial state.
    """
    if steps is None:
        steps = np.arange(schedule.n_steps, 0, -1)
    steps = [int(s) for s in steps]
    if not steps or any(a <= b for a, b in zip(steps[:-1], steps[1:])):
        raise ParameterError("DDIM steps must be strictly decreasing")
    if steps[0] > schedule.n_steps or steps[-1] < 1:
        raise ParameterError("DDIM steps outside the schedule")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    times = steps + [0]
    for t, t_prev in zip(times[:-1], times[1:]):
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
        eps = model.eps_predict(x, t, schedule)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape)
        _check_finite(x, "state", t)
    return x


def _tau_for(config, t, grad):
    if config.tau_schedule is not None:
        return float(config.tau_schedule[t - 1])
    if config.tau_mode == "constant":
        return config.tau
    if config.tau == 0:
        return 0.0
    return config.tau / (float(np.linalg.norm(grad)) + config.stab)


def _zeta_for(config, t, fidelity):
    if config.zeta_schedule is not None:
        return float(config.zeta_schedule[t - 1])
    if config.zeta_mode == "constant":
        return config.zeta
    if config.zeta == 0:
        return 0.0
    return config.zeta / (np.sqrt(fidelity) + config.stab)


def _weighted(grad, config):
    if config.channel_weights is None:
        return grad
    return grad * np.asarray(config.channel_weights, dtype=np.float64)


def sample_dfd_dps(model, schedule: NoiseSchedule, operator, config: SamplerConfig):
    """Guided sampling with the data-fidelity step taken on the clean estimate.

    Each reverse step: score -> Tweedie estimate -> ``inner_grad_steps``
    gradient steps on ||y - f(x0)||^2 -> re-noise with the posterior-step
    coefficients.  Returns ``(operator.decode(x_0), Trajectory)``.
    """
    n = config.steps_for(schedule)
    shape = tuple(operator.shape)
    rng = np.random.default_rng(config.seed)
    traj = Trajectory()
    x = rng.standard_normal(shape)
    for step, t in enumerate(range(n, 0, -1)):
        x0 = _clip(x0_from_score(x, t, model.score(x, t, schedule), schedule), config)
        _check_finite(x0, "clean estimate", t)
        x0p = x0
        fid0 = tau = None
        for _ in range(config.inner_grad_steps):
            fid, grad = operator.fidelity_and_grad(x0p)
            _check_finite(grad, "data-fidelity gradient", t)
            if fid0 is None:
                fid0 = fid
            grad = _weighted(grad, config)
            tau = _tau_for(config, t, grad)
            x0p = x0p - tau * grad
        z = rng.standard_normal(shape)
        _record(traj, config, step, t, x, x0, x0p, fid0, tau, t == 1)
        x = _reverse_update(x, x0p, t, schedule, config.variant, z)
        _check_finite(x, "state", t)
    return operator.decode(x), traj


def sample_dps(model, schedule: NoiseSchedule, operator, config: SamplerConfig,
               trajectory: Trajectory | None = None):
    """Guided sampling with the likelihood gradient taken through the Tweedie map.

    ``x_{t-1} = reverse_step(x_t) - zeta_t * grad_{x_t} ||y - f(x0_hat(x_t))||^2``.
    Pass a ``Trajectory`` to record per-step fidelity of the clean estimate.
    """
    if type(model).tweedie_vjp is _base_tweedie_vjp():
        raise CapabilityError(f"{type(model).__name__} cannot differentiate its Tweedie estimate")
    n = config.steps_for(schedule)
    shape = tuple(operator.shape)
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal(shape)
    for step, t in enumerate(range(n, 0, -1)):
        x0 = _clip(x0_from_score(x, t, model.score(x, t, schedule), schedule), config)
        _check_finite(x0, "clean estimate", t)
        fid, g0 = operator.fidelity_and_grad(x0)
        _check_finite(g0, "data-fidelity gradient", t)
        zeta = _zeta_for(config, t, fid)
        grad = model.tweedie_vjp(x, t, _weighted(g0, config), schedule)
        _check_finite(grad, "DPS gradient", t)
        z = rng.standard_normal(shape)
        _record(trajectory, config, step, t, x, x0, x0, fid, zeta, t == 1)
        x = _reverse_update(x, x0, t, schedule, config.variant, z) - zeta * grad
        _check_finite(x, "state", t)
    return operator.decode(x)


def _base_tweedie_vjp():
    from .prior import ScoreModel
    return ScoreModel.tweedie_vjp


class MatrixOperator:
    """``y = A x`` with an explicit matrix, acting on states of a given shape."""

    def __init__(self, matrix, y, shape):
        self.A = np.asarray(matrix, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        self.shape = tuple(shape)
        if self.A.shape != (self.y.size, int(np.prod(self.shape))):
            raise ParameterError("matrix shape incompatible with y and state shape")

    def fidelity_and_grad(self, x):
        r = self.A @ np.asarray(x).reshape(-1) - self.y
        return float(r @ r), (2.0 * (self.A.T @ r)).reshape(self.shape)

    def fidelity(self, x) -> float:
        r = self.A @ np.asarray(x).reshape(-1) - self.y
        return float(r @ r)

    def decode(self, x):
        return np.asarray(x)


def log_trajectory(traj: Trajectory, out_dir, operator=None) -> list[Path]:
    """Write ``trajectory.csv`` and PNG snapshots of the recorded clean estimates."""
    from .io import write_state_preview

    if len(traj) == 0:
        raise ParameterError("trajectory is empty")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "trajectory.csv"]
        with open(written[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "fidelity", "tau", "xt_mean", "xt_std"])
            for r in traj.records:
                w.writerow([r.step, r.t, repr(r.fidelity), repr(r.tau), repr(r.xt_mean), repr(r.xt_std)])
        for r in traj.records:
            if r.x0_hat is None:
                continue
            for tag, arr in (("x0hat", r.x0_hat), ("x0prime", r.x0_prime)):
                path = out_dir / f"{tag}_step{r.step:04d}_t{r.t:04d}.png"
                write_state_preview(path, arr)
                written.append(path)
    except OSError as exc:
        raise OSError(f"writing trajectory to {out_dir}: {exc}") from exc
    return written


def gaussian_matched_steps(schedule: NoiseSchedule, prior_var: float, noise_var: float,
                           gain2: float = 1.0):
    """Step-size schedules (tau, zeta) that make both guided samplers exact for
    a scalar Gaussian prior N(mu, prior_var) observed as ``y = a x + n`` with
    ``a**2 == gain2`` and ``n ~ N(0, noise_var)``.

    ``r_t`` is the variance of x0 given x_t under the prior.  With
    ``tau_t = r_t / (2 (gain2 r_t + noise_var))`` the x0 step lands on
    E[x0 | x_t, y]; the matching DPS step adds the exact likelihood score.
    For a general linear operator ``gain2`` is an average squared gain such as
    ``||A||_F^2 / dim``, and the schedules become approximations.
    """
    if prior_var <= 0 or noise_var < 0 or gain2 <= 0:
        raise ParameterError("prior_var > 0, noise_var >= 0 and gain2 > 0 required")
    ab = schedule.alpha_bars
    r = prior_var * (1.0 - ab) / (ab * prior_var + 1.0 - ab)
    denom = gain2 * r + noise_var
    if np.any(denom <= 0):
        raise ParameterError("noise_var = 0 with a vanishing prior variance step")
    tau = r / (2.0 * denom)
    zeta = schedule.betas / (2.0 * np.sqrt(schedule.alphas) * denom)
    return tau, zeta
