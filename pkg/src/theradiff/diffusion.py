"""Noise schedule, forward noising process, training loss, ancestral sampler.

Coefficient conventions: ``beta[t]`` is the per-step variance of a linear
schedule from 1e-4 to 2e-2 (inclusive); ``alpha_step[t] = 1 - beta[t]``;
``alpha_bar[t]`` is the running product of ``alpha_step`` up to and
including t. The closed-form noising map uses the cumulative coefficient:

    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps

The ancestral sampler applies, for t = T-1 .. 0,

    x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)
              + sqrt(beta_t) * z        (z = 0 at the final step, t = 0)

with the initial state and every z drawn in order from
``np.random.default_rng([seed])``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError
from .optim import Adam

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # (T,) float64
    alpha_step: np.ndarray  # 1 - beta
    alpha_bar: np.ndarray   # cumulative product of alpha_step


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"schedule needs T >= 1, got {T}")
    if kind != "linear":
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    if T == 1:
        beta = np.array([BETA_START], dtype=np.float64)
    else:
        beta = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    alpha_step = 1.0 - beta
    alpha_bar = np.cumprod(alpha_step)
    return NoiseSchedule(T=T, beta=beta, alpha_step=alpha_step, alpha_bar=alpha_bar)


def _coeffs(s: NoiseSchedule, t, dtype):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= s.T):
        raise ContractError(f"timestep out of range [0, {s.T})")
    ab = s.alpha_bar[t]
    return np.sqrt(ab).astype(dtype), np.sqrt(1.0 - ab).astype(dtype)


def forward_diffuse(x0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or a per-sample vector matching x0's batch dim.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    c_sig, c_noise = _coeffs(s, t, x0.data.dtype)
    if np.ndim(c_sig):  # per-sample t: broadcast over trailing dims
        extra = (1,) * (x0.ndim - 1)
        c_sig = c_sig.reshape((-1,) + extra)
        c_noise = c_noise.reshape((-1,) + extra)
    return ad.add(ad.mul(x0, Tensor(c_sig)), ad.mul(eps, Tensor(c_noise)))


def ddpm_loss(eps: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean squared error between true and predicted noise."""
    return ad.mse(eps, eps_pred)


def ancestral_sample(model, s: NoiseSchedule, shape, rng_seed: int, cond=None) -> np.ndarray:
    """Run the reverse process from pure noise; returns an ndarray.

    ``model`` is any callable (x_t, t, cond) -> eps prediction. All noise
    comes from ``default_rng([rng_seed])`` in a fixed order, so the result
    is a pure function of (model parameters, seed, shape, cond).
    """
    rng = np.random.default_rng([int(rng_seed)])
    dtype = np.float32
    x = rng.standard_normal(shape).astype(dtype)
    with ad.no_grad():
        for t in range(s.T - 1, -1, -1):
            eps_hat = model(Tensor(x), t, cond)
            eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            beta_t = s.beta[t]
            k_eps = dtype(beta_t / np.sqrt(1.0 - s.alpha_bar[t]))
            k_x = dtype(1.0 / np.sqrt(1.0 - beta_t))
            x = k_x * (x - k_eps * eps_hat)
            if t > 0:
                z = rng.standard_normal(shape).astype(dtype)
                x = x + dtype(np.sqrt(beta_t)) * z
    return x


def train_ddpm(model, schedule: NoiseSchedule, images: np.ndarray, steps: int,
               lr: float, seed: int, batch_size: int = 8, eval_every: int = 50):
    """Noise-prediction training on a stack of images (N, C, H, W).

    Returns (per-step training losses, eval-loss curve). The eval curve is
    computed on a frozen (x0, t, eps) batch before the first update, every
    ``eval_every`` steps, and after the last update, so curve[0] / curve[-1]
    compare identical deterministic losses.
    """
    if images.ndim != 4:
        raise ContractError("training images must be (N, C, H, W)")
    n = images.shape[0]
    rng = np.random.default_rng([int(seed), 0xDD93])
    params = model.trainable_parameters()
    opt = Adam(params, lr=lr)

    e_n = min(n, 16)
    e_idx = rng.choice(n, size=e_n, replace=False)
    e_x0 = images[e_idx]
    e_t = rng.integers(0, schedule.T, size=e_n)
    e_eps = rng.standard_normal(e_x0.shape).astype(images.dtype)

    def eval_loss() -> float:
        with ad.no_grad():
            x_t = forward_diffuse(Tensor(e_x0), e_t, Tensor(e_eps), schedule)
            pred = model(x_t, e_t, None)
            return float(ddpm_loss(Tensor(e_eps), pred).data)

    train_curve = []
    eval_curve = [eval_loss()]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        x0 = images[idx]
        t = rng.integers(0, schedule.T, size=batch_size)
        eps = rng.standard_normal(x0.shape).astype(images.dtype)
        x_t = forward_diffuse(Tensor(x0), t, Tensor(eps), schedule)
        pred = model(x_t, t, None)
        loss = ddpm_loss(Tensor(eps), pred)
        model.zero_grad()
        ad.backprop(loss)
        opt.step(ad.collect_grads(params))
        train_curve.append(float(loss.data))
        if (step + 1) % eval_every == 0 and step + 1 < steps:
            eval_curve.append(eval_loss())
    eval_curve.append(eval_loss())
    return np.asarray(train_curve), np.asarray(eval_curve)
