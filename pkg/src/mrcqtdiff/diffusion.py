"""Score-based diffusion: noise schedule, preconditioning, DSM training and Heun sampling.

Noise level and diffusion time coincide (``sigma(tau) = tau``), so the
probability-flow ODE reads ``dx/dtau = -tau * s(x, tau)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ParameterError, SizeError

LAMBDA_WEIGHTINGS = ("unit_target", "inverse_c_out_sq")


@dataclass(frozen=True)
class NoiseScheduleConfig:
    sigma_max: float = 8.0
    sigma_min: float = 1e-5
    rho: float = 10.0
    num_steps: int = 51

    def __post_init__(self):
        if not (self.sigma_max > self.sigma_min > 0):
            raise ParameterError(f"need sigma_max > sigma_min > 0, got {self.sigma_max}, {self.sigma_min}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 2:
            raise ParameterError(f"num_steps must be an integer >= 2, got {self.num_steps}")
        if not self.rho > 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")


def schedule_times(cfg: NoiseScheduleConfig) -> np.ndarray:
    """Noise levels ``tau_i = (smax^(1/rho) + i/(T-1) (smin^(1/rho) - smax^(1/rho)))^rho``.

    The endpoints are assigned exactly rather than through the power round trip.
    """
    t = cfg.num_steps
    inv = 1.0 / cfg.rho
    a, b = cfg.sigma_max**inv, cfg.sigma_min**inv
    i = np.arange(t, dtype=np.float64)
    taus = (a + i / (t - 1) * (b - a)) ** cfg.rho
    taus[0], taus[-1] = cfg.sigma_max, cfg.sigma_min
    return taus


@dataclass(frozen=True)
class Preconditioner:
    """Input/output scalings that keep the network's input and target near unit variance."""

    sigma_data: float = 0.5

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ParameterError("sigma_data must be positive")

    def c_skip(self, sigma):
        s2, d2 = np.square(sigma), self.sigma_data**2
        return d2 / (s2 + d2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / np.sqrt(np.square(sigma) + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.square(sigma) + self.sigma_data**2)

    @staticmethod
    def c_noise(sigma):
        return np.log(sigma) / 4.0


def _check_sigma(sigma, batch):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (batch,))
    if np.any(~(sigma > 0)):
        raise ParameterError("sigma must be positive")
    return sigma


def precondition(F: Callable, x: np.ndarray, sigma, pre: Preconditioner) -> np.ndarray:
    """Score ``[(c_skip - 1) x + c_out F(c_in x, sigma)] / sigma^2`` for a ``(B, N)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    sigma = _check_sigma(sigma, x.shape[0])[:, None]
    f = np.asarray(F(pre.c_in(sigma) * x, sigma[:, 0]), dtype=np.float64)
    if f.shape != x.shape:
        raise SizeError(f"denoiser output {f.shape} != input {x.shape}")
    return ((pre.c_skip(sigma) - 1.0) * x + pre.c_out(sigma) * f) / np.square(sigma)


class ScoreModel:
    """Couples a denoiser network ``F(x, sigma)`` with the preconditioner.

    Array-level evaluation runs without a tape and in chunks of ``chunk``
    examples to bound activation memory.
    """

    def __init__(self, F: Callable, pre: Preconditioner, chunk: int = 8):
        self.F = F
        self.pre = pre
        self.chunk = chunk

    def _F_array(self, x, sigma):
        outs = []
        with ad.no_grad():
            for s in range(0, x.shape[0], self.chunk):
                out = self.F(x[s:s + self.chunk], sigma[s:s + self.chunk])
                outs.append(out.data if isinstance(out, Tensor) else np.asarray(out))
        return np.concatenate(outs, axis=0)

    def score(self, x, sigma) -> np.ndarray:
        return precondition(self._F_array, x, sigma, self.pre)

    def denoise(self, x, sigma) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        sigma = _check_sigma(sigma, x.shape[0])
        return x + np.square(sigma)[:, None] * self.score(x, sigma)


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaSampling:
    """Log-normal training noise levels, clipped to ``[clip_min, clip_max]``."""

    log_mean: float = -1.2
    log_std: float = 1.2
    clip_min: float = 1e-5
    clip_max: float = 8.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        s = np.exp(self.log_mean + self.log_std * rng.standard_normal(n))
        return np.clip(s, self.clip_min, self.clip_max)


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    ema_decay: float = 0.9999
    num_iterations: int = 1000
    sigma_sampling: SigmaSampling = field(default_factory=SigmaSampling)
    lambda_weighting: str = "unit_target"
    rng_seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_warmup: bool = True
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError("ema_decay must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1 or self.num_iterations < 0:
            raise ParameterError("batch_size must be >= 1 and num_iterations >= 0")
        if self.lambda_weighting not in LAMBDA_WEIGHTINGS:
            raise ParameterError(f"lambda_weighting must be one of {LAMBDA_WEIGHTINGS}")


def lambda_weight(sigma, pre: Preconditioner, kind: str = "unit_target"):
    """Loss weight ``lambda(sigma)`` applied to the squared score error.

    ``unit_target`` is ``sigma^4 / c_out^2``: the weighted score error equals
    ``|F - (x0 - c_skip x) / c_out|^2``, a unit-variance regression target.
    ``inverse_c_out_sq`` is the literal ``1 / c_out^2``.
    """
    c_out = pre.c_out(sigma)
    if kind == "unit_target":
        return np.power(sigma, 4) / np.square(c_out)
    if kind == "inverse_c_out_sq":
        return 1.0 / np.square(c_out)
    raise ParameterError(f"unknown lambda weighting {kind!r}")


def dsm_loss(F: Callable, x0, rng: np.random.Generator, pre: Preconditioner,
             sigma_sampling: SigmaSampling = SigmaSampling(), lambda_weighting: str = "unit_target",
             sigma=None, eps=None) -> Tensor:
    """``mean_b lambda(sigma_b) |s(x_tau) - (x0 - x_tau)/sigma^2|^2`` on a tape.

    ``sigma`` and ``eps`` may be supplied to fix the draw (tests); otherwise
    they come from ``rng``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise SizeError(f"dsm_loss needs a non-empty (batch, samples) array, got {x0.shape}")
    b = x0.shape[0]
    sigma = sigma_sampling.draw(rng, b) if sigma is None else _check_sigma(sigma, b)
    eps = rng.standard_normal(x0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    s = sigma[:, None]
    x_tau = x0 + s * eps
    f = F(pre.c_in(s) * x_tau, sigma)
    dtype = f.dtype
    # score error times sigma^2: c_out F + (c_skip - 1) x_tau + sigma eps
    const = (pre.c_skip(s) - 1.0) * x_tau + s * eps
    resid = f * pre.c_out(s).astype(dtype) + const.astype(dtype)
    w = lambda_weight(sigma, pre, lambda_weighting) / np.power(sigma, 4)
    per_example = ad.sum(ad.square(resid), axis=1)
    return ad.scale(ad.sum(per_example * w.astype(dtype)), 1.0 / b)


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """``ema <- decay * ema + (1 - decay) * params`` entry-wise."""
    if set(ema) != set(params):
        raise SizeError(f"EMA tree mismatch: {sorted(set(ema) ^ set(params))[:5]}")
    out = {}
    for k, p in params.items():
        e = ema[k]
        if e.shape != p.shape:
            raise SizeError(f"EMA entry {k}: {e.shape} != {p.shape}")
        out[k] = (decay * e + (1.0 - decay) * p).astype(p.dtype)
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise SizeError(f"gradient for {k}: {g.shape} != {p.shape}")
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * np.square(g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


@dataclass
class LogRecord:
    iteration: int
    loss: float
    sigma_mean: float
    grad_norm: float

    def line(self) -> str:
        return f"{self.iteration} {self.loss!r} {self.sigma_mean!r} {self.grad_norm!r}"


@dataclass
class TrainResult:
    losses: list[float]
    records: list[LogRecord]
    ema: dict
    adam: AdamState
    checkpoints: list[int]
    seconds: float


def train(net, next_batch: Callable[[np.random.Generator], np.ndarray], cfg: TrainerConfig,
          pre: Preconditioner, *, ema: dict | None = None, adam: AdamState | None = None,
          start_iteration: int = 0, on_checkpoint: Callable | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Run ``dsm_loss -> backward -> adam_step -> ema_update`` for ``cfg.num_iterations`` steps.

    ``net`` exposes ``params`` (name -> leaf tensor), ``__call__(x, sigma)`` and
    ``zero_grad``.  Data and noise draw from independent streams derived from
    ``cfg.rng_seed`` and the iteration index, so resumed runs stay reproducible.
    """
    ema = {k: v.data.copy() for k, v in net.params.items()} if ema is None else ema
    adam = AdamState() if adam is None else adam
    losses, records, checkpoints = [], [], []
    t0 = time.perf_counter()
    for it in range(start_iteration, start_iteration + cfg.num_iterations):
        data_rng, noise_rng = (np.random.default_rng([cfg.rng_seed, it, k]) for k in (0, 1))
        x0 = next_batch(data_rng)
        sigma = cfg.sigma_sampling.draw(noise_rng, x0.shape[0])
        eps = noise_rng.standard_normal(x0.shape)
        net.zero_grad()
        loss = dsm_loss(net, x0, noise_rng, pre, lambda_weighting=cfg.lambda_weighting, sigma=sigma, eps=eps)
        value = float(loss.data)
        if not math.isfinite(value):
            snapshot = {
                "iteration": it,
                "loss": value,
                "sigma": sigma.tolist(),
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in net.params.items()},
            }
            raise NumericalError(f"non-finite loss at iteration {it}", snapshot=snapshot)
        loss.backward()
        params = {k: p.data for k, p in net.params.items()}
        grads = {k: p.grad for k, p in net.params.items()}
        grad_norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()
                                  if g is not None))
        params, adam = adam_step(params, grads, adam, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
        for k, p in params.items():
            net.params[k].data = p
        n = it + 1
        decay = min(cfg.ema_decay, (1.0 + n) / (10.0 + n)) if cfg.ema_warmup else cfg.ema_decay
        ema = ema_update(ema, params, decay)
        losses.append(value)
        records.append(LogRecord(n, value, float(np.mean(sigma)), grad_norm))
        if log is not None and cfg.log_every and n % cfg.log_every == 0:
            window = losses[-cfg.log_every:]
            log(f"iter {n} loss {np.mean(window):.5g} ({time.perf_counter() - t0:.1f}s)")
        if on_checkpoint is not None and cfg.checkpoint_every and n % cfg.checkpoint_every == 0:
            on_checkpoint(n, net, ema, adam, records)
            checkpoints.append(n)
    return TrainResult(losses, records, ema, adam, checkpoints, time.perf_counter() - t0)


# -- sampling --------------------------------------------------------------------


def heun_sample(score: Callable, cfg: NoiseScheduleConfig, rng: np.random.Generator,
                num_samples: int, length: int) -> np.ndarray:
    """Integrate the probability-flow ODE from ``tau_0`` down to ``sigma_min``.

    Heun (Euler predictor, trapezoidal corrector) on every step except the
    last, which is a single Euler step into ``sigma_min``.
    ``score(x, tau)`` takes a ``(B, length)`` array and a scalar noise level.
    """
    taus = schedule_times(cfg)
    x = rng.standard_normal((num_samples, length)) * taus[0]
    last = len(taus) - 2
    for i in range(len(taus) - 1):
        t, t_next = taus[i], taus[i + 1]
        d = -t * np.asarray(score(x, t))
        x_pred = x + (t_next - t) * d
        if i < last:
            d_next = -t_next * np.asarray(score(x_pred, t_next))
            x_pred = x + (t_next - t) * 0.5 * (d + d_next)
        if not np.all(np.isfinite(x_pred)):
            raise NumericalError(f"non-finite sampler state at step {i} (tau {t:.3g} -> {t_next:.3g})",
                                 snapshot={"step": i, "tau": t})
        x = x_pred
    return x
