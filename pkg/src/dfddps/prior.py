"""Score models: analytic Gaussian / Gaussian-mixture priors and a small trainable denoiser."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .errors import CapabilityError, FormatError, NumericalError, ParameterError, TrainingError
from .schedule import NoiseSchedule, eps_from_score, score_from_eps, x0_from_score

log = logging.getLogger(__name__)


class ScoreModel:
    """Prior interface.  Subclasses override ``score`` or ``eps_predict`` (or both)."""

    def score(self, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
        return score_from_eps(self.eps_predict(x_t, t, schedule), t, schedule)

    def eps_predict(self, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
        return eps_from_score(self.score(x_t, t, schedule), t, schedule)

    def x0_hat(self, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
        return x0_from_score(x_t, t, self.score(x_t, t, schedule), schedule)

    def tweedie_vjp(self, x_t, t: int, cotangent, schedule: NoiseSchedule) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide a Tweedie VJP")


def tweedie_vjp(model: ScoreModel, x_t, t: int, cotangent, schedule: NoiseSchedule) -> np.ndarray:
    return model.tweedie_vjp(np.asarray(x_t, dtype=np.float64), t,
                             np.asarray(cotangent, dtype=np.float64), schedule)


# -- Gaussian ------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrior(ScoreModel):
    """Independent Gaussian prior N(mean, diag(variance)) on the clean state."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), mean.shape).copy()
        if np.any(var <= 0):
            raise ParameterError("prior variance must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    def marginal(self, t, schedule):
        ab = schedule.alpha_bar(t)
        return np.sqrt(ab) * self.mean, ab * self.variance + (1.0 - ab)

    def score(self, x_t, t, schedule):
        m, v = self.marginal(t, schedule)
        return -(np.asarray(x_t) - m) / v

    def log_density(self, x_t, t, schedule) -> float:
        m, v = self.marginal(t, schedule)
        r = np.asarray(x_t) - m
        return float(-0.5 * np.sum(r * r / v + np.log(2 * np.pi * v)))

    def tweedie_vjp(self, x_t, t, cotangent, schedule):
        ab = schedule.alpha_bar(t)
        return np.asarray(cotangent) * np.sqrt(ab) * self.variance / (ab * self.variance + 1.0 - ab)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n,) + self.mean.shape)


def gaussian_score(prior: GaussianPrior, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    return prior.score(x_t, t, schedule)


# -- Gaussian mixture ----------------------------------------------------

@dataclass(frozen=True)
class GmmPrior(ScoreModel):
    """Mixture of diagonal Gaussians; ``means`` and ``variances`` are (K, *state_shape)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), means.shape).copy()
        if w.ndim != 1 or w.shape[0] != means.shape[0]:
            raise ParameterError("need one weight per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ParameterError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)

    def _components(self, x_t, t, schedule):
        ab = schedule.alpha_bar(t)
        x = np.asarray(x_t, dtype=np.float64)
        m = np.sqrt(ab) * self.means
        v = ab * self.variances + (1.0 - ab)
        r = x[None] - m
        axes = tuple(range(1, r.ndim))
        logp = np.log(self.weights) - 0.5 * np.sum(r * r / v + np.log(2 * np.pi * v), axis=axes)
        resp = np.exp(logp - logsumexp(logp))
        return resp, -r / v, v, logp

    def score(self, x_t, t, schedule):
        resp, g, _, _ = self._components(x_t, t, schedule)
        return np.tensordot(resp, g, axes=1)

    def log_density(self, x_t, t, schedule) -> float:
        return float(logsumexp(self._components(x_t, t, schedule)[3]))

    def tweedie_vjp(self, x_t, t, cotangent, schedule):
        ab = schedule.alpha_bar(t)
        c = np.asarray(cotangent, dtype=np.float64)
        resp, g, v, _ = self._components(x_t, t, schedule)
        gbar = np.tensordot(resp, g, axes=1)
        axes = tuple(range(1, g.ndim))
        gc = np.sum(g * c[None], axis=axes)
        # Hessian of log p_t applied to c (it is symmetric)
        hess_c = (-np.tensordot(resp, 1.0 / v, axes=1) * c
                  + np.tensordot(resp * gc, g, axes=1)
                  - gbar * np.sum(gbar * c))
        return (c + (1.0 - ab) * hess_c) / np.sqrt(ab)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n,) + self.means.shape[1:])
        return self.means[comp] + np.sqrt(self.variances[comp]) * noise


def gmm_score(prior: GmmPrior, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    return prior.score(x_t, t, schedule)


def gaussian_posterior_oracle(prior: GaussianPrior, linear_op, y, noise_var: float):
    """Exact posterior mean and covariance for y = A x + n, n ~ N(0, noise_var I).

    ``linear_op`` is an explicit (m, n) matrix acting on the flattened state.
    """
    A = np.asarray(linear_op, dtype=np.float64)
    mu = prior.mean.reshape(-1)
    v = prior.variance.reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if A.shape != (y.size, mu.size):
        raise ParameterError(f"operator shape {A.shape} incompatible with y {y.size} and state {mu.size}")
    if mu.size > 4096:
        raise ParameterError("oracle is limited to small dense problems")
    if np.isinf(noise_var):
        return prior.mean.copy(), np.diag(v)
    VA = v[:, None] * A.T
    S = A @ VA + noise_var * np.eye(y.size)
    try:
        gain = np.linalg.solve(S, VA.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"posterior system is singular: {exc}") from exc
    if not np.all(np.isfinite(gain)):
        raise NumericalError("posterior system is singular")
    mean = mu + gain @ (y - A @ mu)
    cov = np.diag(v) - gain @ VA.T
    return mean.reshape(prior.mean.shape), cov


# -- tiny denoiser -----------------------------------------------------

def _silu(z):
    sig = expit(z)
    return z * sig, sig


def time_features(t, n_features: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = n_features // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 0.2
    momentum: float = 0.9
    grad_clip: float = 10.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ParameterError("steps >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")


@dataclass
class TinyDenoiser(ScoreModel):
    """Fully connected eps-predictor on (patch, patch, channels) tiles.

    Images larger than one patch are tiled; on odd time steps the tiling is
    offset by half a patch (circularly) along every axis wider than one
    patch, so seams do not stay in place.
    """

    patch: int = 16
    channels: int = 4
    hidden: tuple = (256, 256)
    n_time_features: int = 32
    n_schedule_steps: int = 200
    params: list = field(default_factory=list)
    momentum_buf: list = field(default_factory=list)
    step: int = 0
    curve: list = field(default_factory=list, repr=False)
    _cache64: list | None = field(default=None, repr=False)

    @property
    def in_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def layer_shapes(self):
        """Weight/bias shapes of the MLP followed by the (T, C) skip table."""
        dims = [self.in_dim + self.n_time_features, *self.hidden, self.in_dim]
        shapes = []
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        return shapes + [(self.n_schedule_steps, self.channels)]

    @classmethod
    def initialize(cls, seed: int = 0, **kw) -> "TinyDenoiser":
        model = cls(**kw)
        rng = np.random.default_rng(seed)
        shapes = model.layer_shapes()
        n_layers = (len(shapes) - 1) // 2
        params = []
        for i in range(n_layers):
            ws, bs = shapes[2 * i], shapes[2 * i + 1]
            if i == n_layers - 1:
                w = np.zeros(ws, dtype=np.float32)  # eps_hat = 0 at init
            else:
                w = (rng.standard_normal(ws) * np.sqrt(2.0 / ws[0])).astype(np.float32)
            params += [w, np.zeros(bs, dtype=np.float32)]
        params.append(np.zeros(shapes[-1], dtype=np.float32))
        model.params = params
        model.momentum_buf = [np.zeros_like(p) for p in params]
        return model

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "TinyDenoiser":
        return TinyDenoiser(self.patch, self.channels, tuple(self.hidden), self.n_time_features,
                            self.n_schedule_steps, [p.copy() for p in self.params],
                            [m.copy() for m in self.momentum_buf], self.step)

    # -- network on flat batches -----------------------------------------

    def _weights(self, dtype):
        if dtype == np.float32:
            return self.params
        if self._cache64 is None:
            self._cache64 = [p.astype(np.float64) for p in self.params]
        return self._cache64

    def _skip(self, t, batch, dtype):
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        if np.any(t < 1) or np.any(t > self.n_schedule_steps):
            raise ParameterError(f"time index outside [1, {self.n_schedule_steps}]")
        per_channel = self._weights(dtype)[-1][t - 1]
        return np.tile(per_channel, self.patch * self.patch)

    def forward_flat(self, xb, t, dtype=np.float64):
        """eps_hat = skip(t) * x + MLP(x, t) on a (B, in_dim) batch; returns (out, cache)."""
        ps = self._weights(dtype)
        xb = xb.astype(dtype, copy=False)
        batch = xb.shape[0]
        tf = np.broadcast_to(time_features(t, self.n_time_features), (batch, self.n_time_features))
        h = np.concatenate([xb, tf.astype(dtype)], axis=1)
        cache = []
        n_layers = (len(ps) - 1) // 2
        for i in range(n_layers):
            z = h @ ps[2 * i] + ps[2 * i + 1]
            if i < n_layers - 1:
                a, sig = _silu(z)
                cache.append((h, z, sig))
                h = a
            else:
                cache.append((h, None, None))
                h = z
        skip = self._skip(t, batch, dtype)
        cache.append((xb, skip, t))
        return h + skip * xb, cache

    def backward_flat(self, gout, cache, dtype=np.float64, need_params=True):
        """Backprop ``gout`` (B, in_dim); returns (grad wrt x batch, list of param grads)."""
        ps = self._weights(dtype)
        n_layers = (len(ps) - 1) // 2
        grads = [None] * len(ps)
        xb, skip, t = cache[-1]
        if need_params:
            per_coord = (gout * xb).reshape(gout.shape[0], -1, self.channels).sum(axis=1)
            gskip = np.zeros_like(ps[-1])
            t_idx = np.broadcast_to(np.asarray(t, dtype=np.int64), (gout.shape[0],)) - 1
            np.add.at(gskip, t_idx, per_coord)
            grads[-1] = gskip
        g = gout
        for i in reversed(range(n_layers)):
            h, z, sig = cache[i]
            if z is not None:
                g = g * (sig * (1.0 + z * (1.0 - sig)))
            if need_params:
                grads[2 * i] = h.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ ps[2 * i].T
        return g[:, :self.in_dim] + gout * skip, grads

    # -- image-level interface ---------------------------------------------

    def _shift(self, t, shape):
        """Per-axis circular offset; axes holding a single tile are never shifted."""
        if int(t) % 2 == 0:
            return (0, 0)
        return tuple(self.patch // 2 if n > self.patch else 0 for n in shape[:2])

    def _to_tiles(self, x, t):
        H, W, C = x.shape
        p = self.patch
        if C != self.channels or H % p or W % p:
            raise ParameterError(f"state {x.shape} is not tileable by {p}x{p}x{self.channels} patches")
        sh, sw = self._shift(t, x.shape)
        xs = np.roll(x, (-sh, -sw), axis=(0, 1))
        tiles = xs.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4).reshape(-1, self.in_dim)
        return tiles

    def _from_tiles(self, tiles, shape, t):
        H, W, C = shape
        p = self.patch
        xs = tiles.reshape(H // p, W // p, p, p, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
        sh, sw = self._shift(t, shape)
        return np.roll(xs, (sh, sw), axis=(0, 1))

    def eps_predict(self, x_t, t, schedule=None):
        x = np.asarray(x_t, dtype=np.float64)
        out, _ = self.forward_flat(self._to_tiles(x, t), t)
        return self._from_tiles(out, x.shape, t)

    def tweedie_vjp(self, x_t, t, cotangent, schedule):
        x = np.asarray(x_t, dtype=np.float64)
        ab = schedule.alpha_bar(t)
        _, cache = self.forward_flat(self._to_tiles(x, t), t)
        # x0_hat = (x - sqrt(1 - ab) eps(x)) / sqrt(ab)
        ctiles = self._to_tiles(np.asarray(cotangent, dtype=np.float64), t)
        g_eps, _ = self.backward_flat(ctiles, cache, need_params=False)
        g = ctiles - np.sqrt(1.0 - ab) * g_eps
        return self._from_tiles(g, x.shape, t) / np.sqrt(ab)

    # -- checkpoint ---------------------------------------------------------

    def save(self, path) -> None:
        header = [
            "DFDDPS-DENOISER 1",
            f"patch {self.patch}",
            f"channels {self.channels}",
            "hidden " + " ".join(str(h) for h in self.hidden),
            f"time_features {self.n_time_features}",
            f"schedule_steps {self.n_schedule_steps}",
            f"step {self.step}",
            f"n_params {self.n_params()}",
            "dtype float32-le",
            "end_header",
        ]
        payload = b"".join(p.astype("<f4").tobytes() for p in self.params + self.momentum_buf)
        Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + payload)

    @classmethod
    def load(cls, path) -> "TinyDenoiser":
        raw = Path(path).read_bytes()
        end = raw.find(b"end_header\n")
        if not raw.startswith(b"DFDDPS-DENOISER 1\n") or end < 0:
            raise FormatError(f"{path}: not a denoiser checkpoint", offset=0)
        fields = {}
        for line in raw[:end].decode("ascii").splitlines()[1:]:
            key, _, val = line.partition(" ")
            fields[key] = val
        try:
            model = cls(patch=int(fields["patch"]), channels=int(fields["channels"]),
                        hidden=tuple(int(v) for v in fields["hidden"].split()),
                        n_time_features=int(fields["time_features"]),
                        n_schedule_steps=int(fields["schedule_steps"]), step=int(fields["step"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad checkpoint header ({exc})", offset=0) from exc
        offset = end + len(b"end_header\n")
        arrays = []
        for shape in model.layer_shapes() * 2:
            n = int(np.prod(shape))
            chunk = raw[offset:offset + 4 * n]
            if len(chunk) != 4 * n:
                raise FormatError(f"{path}: truncated payload", offset=offset)
            arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
            offset += 4 * n
        if offset != len(raw):
            raise FormatError(f"{path}: trailing bytes after payload", offset=offset)
        half = len(arrays) // 2
        model.params, model.momentum_buf = arrays[:half], arrays[half:]
        if model.n_params() != int(fields.get("n_params", -1)):
            raise FormatError(f"{path}: parameter count mismatch", offset=0)
        return model


# -- training ------------------------------------------------------------

def _batch_loss_and_grads(model, x0b, t, eps):
    """Batch mean of ||eps_hat - eps||^2 summed over coordinates.

    Gradients are taken of the per-coordinate mean (loss / in_dim) so step
    sizes do not depend on the patch size.
    """
    out, cache = model.forward_flat(x0b, t, dtype=np.float32)
    diff = out - eps
    b, d = diff.shape
    loss = float(np.sum(diff.astype(np.float64) ** 2) / b)
    _, grads = model.backward_flat((2.0 / (b * d)) * diff, cache, dtype=np.float32)
    return loss, grads


def _draw_batch(data, schedule, config, step):
    rng = np.random.default_rng([config.seed, step])
    idx = rng.integers(0, data.shape[0], size=config.batch_size)
    t = rng.integers(1, schedule.n_steps + 1, size=config.batch_size)
    eps = rng.standard_normal((config.batch_size, data.shape[1])).astype(np.float32)
    ab = schedule.alpha_bars[t - 1].astype(np.float32)[:, None]
    x_t = np.sqrt(ab) * data[idx] + np.sqrt(1.0 - ab) * eps
    return x_t, t, eps


def train_denoiser(dataset, schedule: NoiseSchedule, config: TrainConfig,
                   model: TinyDenoiser | None = None, curve_path=None, **model_kw) -> TinyDenoiser:
    """SGD with momentum on the eps-prediction loss.

    ``dataset`` is (N, patch, patch, channels) in [-1, 1].  Passing a model
    resumes from its ``step``; batches depend only on (seed, step), so a
    resumed run matches an uninterrupted one.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ParameterError("dataset must be a non-empty (N, p, p, C) array")
    if np.abs(data).max() > 1.0 + 1e-6:
        raise ParameterError("training patches must lie in [-1, 1]")
    if model is None:
        model = TinyDenoiser.initialize(config.seed, patch=data.shape[1], channels=data.shape[3],
                                        n_schedule_steps=schedule.n_steps, **model_kw)
    else:
        model = model.copy()
    if data.shape[1] != model.patch or data.shape[3] != model.channels:
        raise ParameterError("dataset patch shape does not match the model")
    if model.n_schedule_steps != schedule.n_steps:
        raise ParameterError("model was built for a schedule of a different length")
    flat = data.reshape(data.shape[0], -1)
    curve = []
    first_loss = None
    for step in range(model.step, config.steps):
        x_t, t, eps = _draw_batch(flat, schedule, config, step)
        loss, grads = _batch_loss_and_grads(model, x_t, t, eps)
        if first_loss is None:
            first_loss = loss
        if not np.isfinite(loss) or loss > 10.0 * first_loss:
            raise TrainingError(f"training diverged at step {step}: loss {loss:.4g}",
                                diagnostics={"step": step, "loss": loss, "initial_loss": first_loss})
        gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
        clip = np.float32(min(1.0, config.grad_clip / (gnorm + 1e-12)))
        lr = np.float32(config.learning_rate)
        mom = np.float32(config.momentum)
        for p, m, g in zip(model.params, model.momentum_buf, grads):
            m *= mom
            m += clip * g
            p -= lr * m
        model.step = step + 1
        model._cache64 = None
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append((step, loss))
            log.debug("step %d loss %.4f", step, loss)
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(curve)
    model.curve = curve
    return model


def evaluate_loss(model: TinyDenoiser, dataset, schedule: NoiseSchedule, seed: int = 1234,
                  n_samples: int = 512) -> float:
    """Monte-Carlo eps-prediction loss on fixed draws (comparable across models)."""
    data = np.asarray(dataset, dtype=np.float64).reshape(len(dataset), -1)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.shape[0], size=n_samples)
    t = rng.integers(1, schedule.n_steps + 1, size=n_samples)
    eps = rng.standard_normal((n_samples, data.shape[1]))
    ab = schedule.alpha_bars[t - 1][:, None]
    x_t = np.sqrt(ab) * data[idx] + np.sqrt(1.0 - ab) * eps
    out, _ = model.forward_flat(x_t, t)
    return float(np.mean(np.sum((out - eps) ** 2, axis=1)))


def extract_patches(states, patch: int, n: int, seed: int) -> np.ndarray:
    """Random (n, patch, patch, C) crops from a list of normalized (H, W, C) states."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = states[rng.integers(len(states))]
        i = rng.integers(0, s.shape[0] - patch + 1)
        j = rng.integers(0, s.shape[1] - patch + 1)
        out.append(s[i:i + patch, j:j + patch])
    return np.stack(out)
