"""Rectified-flow paths, the flow-matching loss, and the guided Euler sampler.

Convention: t = 0 is data and t = 1 is noise, so ``x_t = (1 - t) x1 + t x0``
and the regression target is the constant velocity ``x0 - x1``. Sampling
integrates from t = 1 down to t = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyBatch
from .numkit import Rng, gaussian, logit_normal_t
from .vectorfield import (
    ModelParameters,
    adamw_step,
    forward_and_vjp,
    forward_batch,
    init_optimizer,
)

log = logging.getLogger(__name__)


@dataclass
class FlowSample:
    x1: np.ndarray
    x0: np.ndarray
    t: float
    xt: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 4.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")


def interpolate(x1, x0, t):
    """Batched path point and target velocity. ``t`` broadcasts against rows."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None] if x1.ndim == t.ndim + 1 else t
    return (1.0 - tt) * x1 + tt * x0, x0 - x1


def make_flow_sample(x1, rng: Rng, t: float) -> FlowSample:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = gaussian(rng, x1.shape[0])
    xt, vt = interpolate(x1, x0, t)
    return FlowSample(x1, x0, float(t), xt, vt)


def sample_timesteps(rng: Rng, n: int, schedule: str = "logit_normal") -> np.ndarray:
    if schedule == "logit_normal":
        return logit_normal_t(rng, n)
    if schedule == "uniform":
        return rng.uniform(n)
    raise ValueError(f"unknown timestep schedule {schedule!r}")


def fm_loss_arrays(params: ModelParameters, xt, vt, t, c):
    """Mean squared velocity error over a batch and its parameter gradient."""
    xt = np.atleast_2d(xt)
    if xt.shape[0] == 0:
        raise EmptyBatch("flow-matching batch is empty")
    pred, vjp = forward_and_vjp(params, xt, t, c)
    resid = pred - vt
    n = xt.shape[0]
    loss = float(np.sum(resid**2) / n)
    return loss, vjp(2.0 * resid / n)


def fm_loss(params: ModelParameters, batch: list[tuple[FlowSample, int | None]]):
    """L_FM = mean_b ||u(x_t, t, c) - v_t||^2 over ``(FlowSample, condition)`` pairs."""
    if not batch:
        raise EmptyBatch("flow-matching batch is empty")
    xt = np.stack([s.xt for s, _ in batch])
    vt = np.stack([s.vt for s, _ in batch])
    t = np.array([s.t for s, _ in batch])
    cond = np.array([params.config.null_condition if c is None else c for _, c in batch])
    return fm_loss_arrays(params, xt, vt, t, cond)


def cfg_velocity_batch(params: ModelParameters, x, t, c, w: float) -> np.ndarray:
    """u_null + w (u_cond - u_null); w = 1 and w = 0 return the exact branch."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if w == 1.0:
        return forward_batch(params, x, t, c)
    null = np.full(n, params.config.null_condition)
    if w == 0.0:
        return forward_batch(params, x, t, null)
    both = forward_batch(params, np.concatenate([x, x]), t, np.concatenate([c, null]))
    u_cond, u_null = both[:n], both[n:]
    return u_null + w * (u_cond - u_null)


def cfg_velocity(params: ModelParameters, x, t: float, c: int, w: float) -> np.ndarray:
    return cfg_velocity_batch(params, np.asarray(x)[None, :], t, [c], w)[0]


def euler_integrate(velocity: Callable[[np.ndarray, float], np.ndarray], x0, steps: int) -> np.ndarray:
    """Integrate dx/dt = velocity(x, t) from t = 1 to t = 0 on a uniform grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    for k in range(steps):
        t_k = 1.0 - k / steps
        t_next = 1.0 - (k + 1) / steps
        x = x + (t_next - t_k) * velocity(x, t_k)
    return x


def point_mass_velocity(target) -> Callable[[np.ndarray, float], np.ndarray]:
    """Exact velocity field of a flow whose data distribution is the single point ``target``.

    Every path is straight, ``x_t = (1 - t) target + t x0``, so ``u = (x - target) / t``
    and Euler integration lands on ``target`` for any number of steps.
    """
    target = np.asarray(target, dtype=np.float64)
    return lambda x, t: (x - target) / t


def draw_noise(rng: Rng, n: int, dim: int) -> np.ndarray:
    """One ``gaussian`` call per row, so the first rows of a longer draw match a shorter one."""
    return np.stack([gaussian(rng, dim) for _ in range(n)]) if n else np.zeros((0, dim))


def euler_sample_from_noise(params: ModelParameters, conditions, x0, cfg: SamplerConfig) -> np.ndarray:
    conditions = np.asarray(conditions, dtype=np.int64)
    return euler_integrate(
        lambda x, t: cfg_velocity_batch(params, x, t, conditions, cfg.cfg_scale), x0, cfg.steps
    )


def euler_sample_batch(params: ModelParameters, conditions, cfg: SamplerConfig, rng: Rng) -> np.ndarray:
    conditions = np.atleast_1d(np.asarray(conditions, dtype=np.int64))
    x0 = draw_noise(rng, conditions.shape[0], params.config.data_dim)
    return euler_sample_from_noise(params, conditions, x0, cfg)


def euler_sample(params: ModelParameters, c: int, cfg: SamplerConfig, rng: Rng) -> np.ndarray:
    return euler_sample_batch(params, [c], cfg, rng)[0]


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    num_train: int = 8192
    batch_size: int = 128
    lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    cond_dropout: float = 0.1
    t_schedule: str = "logit_normal"

    def __post_init__(self):
        if self.epochs < 1 or self.num_train < 1 or self.batch_size < 1:
            raise ValueError("epochs, num_train and batch_size must be >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")


def pretrain(params: ModelParameters, task, cfg: PretrainConfig, rng: Rng) -> tuple[ModelParameters, list[float]]:
    """Train ``params`` in place with L_FM on a fixed draw from ``task``.

    Returns the parameters and the mean training loss of each epoch.
    """
    from .synthdata import draw_batch

    data_rng = rng.child("data")
    conds = data_rng.integers(task.num_conditions, size=cfg.num_train)
    x1_all = draw_batch(task, conds, data_rng)
    opt = init_optimizer(params, lr=cfg.lr, warmup_steps=cfg.warmup_steps, weight_decay=cfg.weight_decay)
    null = params.config.null_condition
    epoch_losses = []
    for epoch in range(cfg.epochs):
        erng = rng.child(f"epoch_{epoch}")
        order = erng.permutation(cfg.num_train)
        total = 0.0
        for start in range(0, cfg.num_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            n = idx.shape[0]
            x1 = x1_all[idx]
            c = np.where(erng.uniform(n) < cfg.cond_dropout, null, conds[idx])
            t = sample_timesteps(erng, n, cfg.t_schedule)
            x0 = erng.normal((n, params.config.data_dim))
            xt, vt = interpolate(x1, x0, t)
            loss, grads = fm_loss_arrays(params, xt, vt, t, c)
            adamw_step(opt, params, grads)
            total += loss * n
        epoch_losses.append(total / cfg.num_train)
        log.debug("pretrain epoch %d loss %.5f", epoch + 1, epoch_losses[-1])
    return params, epoch_losses
