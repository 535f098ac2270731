"""Discrete-time diffusion bookkeeping.

Time indices run ``t = 1..T`` and index the schedule tables; ``t = 0`` denotes
the clean state, with the convention ``alpha_bar(0) == 1``.  A reverse step at
time ``t`` maps ``x_t`` to ``x_{t-1}``, so a full reverse pass visits
``t = T, T-1, ..., 1`` and returns ``x_0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, SingularityError

VARIANTS = ("as_written", "ddpm_posterior")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas_tilde: np.ndarray
    beta_min: float
    beta_max: float

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas_tilde"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_steps(self) -> int:
        return int(self.betas.shape[0])

    def _check_t(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.n_steps:
            raise ParameterError(f"time index {t} outside [{lo}, {self.n_steps}]")
        return t

    def alpha_bar(self, t: int) -> float:
        t = self._check_t(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t, allow_zero=False) - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t, allow_zero=False) - 1])

    def sigma_tilde(self, t: int) -> float:
        return float(self.sigmas_tilde[self._check_t(t, allow_zero=False) - 1])

    def with_sigmas(self, sigmas_tilde) -> "NoiseSchedule":
        sigmas_tilde = np.asarray(sigmas_tilde, dtype=np.float64)
        if sigmas_tilde.shape != self.betas.shape or np.any(sigmas_tilde < 0):
            raise ParameterError("sigmas_tilde must be non-negative with one entry per step")
        return NoiseSchedule(self.kind, self.betas, self.alphas, self.alpha_bars,
                             sigmas_tilde, self.beta_min, self.beta_max)

    # -- serialization -------------------------------------------------

    def to_config(self) -> dict:
        return {"kind": self.kind, "n_steps": self.n_steps,
                "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        unknown = set(cfg) - {"kind", "n_steps", "beta_min", "beta_max"}
        if unknown:
            raise ParameterError(f"unknown schedule keys: {sorted(unknown)}")
        return build_schedule(cfg.get("kind", "linear"), int(cfg["n_steps"]),
                              float(cfg["beta_min"]), float(cfg["beta_max"]))

    def table(self) -> np.ndarray:
        """(T, 4) float64 columns beta, alpha, alpha_bar, sigma_tilde."""
        return np.stack([self.betas, self.alphas, self.alpha_bars, self.sigmas_tilde], axis=1)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_config(), indent=2, sort_keys=True) + "\n")

    def save_table(self, path) -> None:
        Path(path).write_bytes(self.table().astype("<f8").tobytes())


def read_schedule_table(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 32:
        from .errors import FormatError
        raise FormatError("schedule table is not a whole number of 4-column float64 rows",
                          offset=len(raw) - len(raw) % 32)
    return np.frombuffer(raw, dtype="<f8").reshape(-1, 4).astype(np.float64)


def ddpm_posterior_std(betas: np.ndarray, alpha_bars: np.ndarray) -> np.ndarray:
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    var = (1.0 - prev) / (1.0 - alpha_bars) * betas
    var[0] = 0.0
    return np.sqrt(var)


def _cosine_betas(n_steps: int, beta_min: float, beta_max: float, s: float = 0.008) -> np.ndarray:
    steps = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
    betas = 1.0 - f[1:] / f[:-1]
    return np.clip(betas, beta_min, beta_max)


def build_schedule(kind: str = "linear", n_steps: int = 200,
                   beta_min: float | None = None, beta_max: float | None = None) -> NoiseSchedule:
    """Build a noise schedule with DDPM posterior standard deviations as sigma_tilde.

    When ``beta_min``/``beta_max`` are omitted, the classic 1000-step range
    [1e-4, 0.02] is stretched by ``1000 / n_steps`` so that ``alpha_bar(T)`` is
    close to zero for short schedules as well.
    """
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    stretch = 1000.0 / n_steps
    if beta_min is None:
        beta_min = min(1e-4 * stretch, 0.5)
    if beta_max is None:
        beta_max = min(0.02 * stretch, 0.999)
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(n_steps, beta_min, beta_max)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = ddpm_posterior_std(betas, alpha_bars)
    return NoiseSchedule(kind, betas, alphas, alpha_bars, sigmas, float(beta_min), float(beta_max))


def forward_marginal_sample(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParameterError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _alpha_bar_nonzero(t, schedule):
    ab = schedule.alpha_bar(t)
    if ab <= 0.0:
        raise SingularityError(f"alpha_bar({t}) = 0; clean estimate undefined")
    return ab


def x0_from_eps(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = _alpha_bar_nonzero(t, schedule)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def x0_from_score(x_t, t: int, score, schedule: NoiseSchedule) -> np.ndarray:
    """Tweedie estimate of the clean state from the score of the noisy marginal."""
    ab = _alpha_bar_nonzero(t, schedule)
    return (np.asarray(x_t) + (1.0 - ab) * np.asarray(score)) / np.sqrt(ab)


def score_from_eps(eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    if ab >= 1.0:
        raise SingularityError("score undefined at alpha_bar = 1")
    return -np.asarray(eps_hat) / np.sqrt(1.0 - ab)


def eps_from_score(score, t: int, schedule: NoiseSchedule) -> np.ndarray:
    return -np.asarray(score) * np.sqrt(1.0 - schedule.alpha_bar(t))


def posterior_step_coefficients(t: int, schedule: NoiseSchedule,
                                variant: str = "ddpm_posterior") -> tuple[float, float, float]:
    """Coefficients of ``x_{t-1} = c_xt * x_t + c_x0 * x0_hat + sigma * z``.

    ``as_written`` uses ``sqrt(alpha_bar_t)`` on the ``x_t`` term as printed in
    the algorithm listing; ``ddpm_posterior`` uses ``sqrt(alpha_t)``, which is
    the mean of q(x_{t-1} | x_t, x_0).
    """
    t = int(t)
    if t < 1:
        raise ParameterError("no reverse step exists at t = 0")
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if t == 1:
        # alpha_bar(0) = 1: the last step returns the clean estimate exactly
        return 0.0, 1.0, 0.0
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta = schedule.beta(t)
    lead = ab_t if variant == "as_written" else schedule.alpha(t)
    c_xt = np.sqrt(lead) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    return float(c_xt), float(c_x0), schedule.sigma_tilde(t)
