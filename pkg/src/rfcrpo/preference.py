"""DPO-FM and CRPO preference losses against a frozen reference velocity field.

For a pair (winner, loser) at timestep t, each side gets its own noise draw
and a squared velocity-regression error under the trained and reference
parameters. With the bracket

    B = (Lw - Ll) - (Lw_ref - Ll_ref)

the DPO-FM loss is ``-log sigmoid(-beta * B) = softplus(beta * B)``. CRPO adds
the plain flow-matching loss of the winners on the same draws.

The diffusion form of the objective (noise-prediction errors in place of
velocity errors) differs only in what the four terms regress; it is not
implemented separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import EmptyBatch
from .flow import interpolate, sample_timesteps
from .numkit import Rng
from .vectorfield import ModelParameters, forward_and_vjp, forward_batch

LOSS_KINDS = ("crpo", "dpo_fm")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    loss_kind: str = "crpo"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class PreferenceBatchItem:
    condition: int
    winner: np.ndarray
    loser: np.ndarray
    noise_w: np.ndarray
    noise_l: np.ndarray
    t: float


@dataclass
class PreferenceBatch:
    """Column layout of a list of ``PreferenceBatchItem``."""

    conditions: np.ndarray
    winners: np.ndarray
    losers: np.ndarray
    noise_w: np.ndarray
    noise_l: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return self.conditions.shape[0]

    @classmethod
    def from_items(cls, items: Sequence[PreferenceBatchItem]) -> "PreferenceBatch":
        if not items:
            raise EmptyBatch("preference batch is empty")
        return cls(
            np.array([it.condition for it in items], dtype=np.int64),
            np.stack([it.winner for it in items]),
            np.stack([it.loser for it in items]),
            np.stack([it.noise_w for it in items]),
            np.stack([it.noise_l for it in items]),
            np.array([it.t for it in items], dtype=np.float64),
        )

    def items(self) -> list[PreferenceBatchItem]:
        return [
            PreferenceBatchItem(int(c), w, l, nw, nl, float(t))
            for c, w, l, nw, nl, t in zip(self.conditions, self.winners, self.losers, self.noise_w, self.noise_l, self.t)
        ]


def draw_preference_batch(conditions, winners, losers, rng: Rng, schedule: str = "logit_normal") -> PreferenceBatch:
    """Attach one shared timestep and independent winner/loser noise to each pair.

    Draw order: timesteps, then winner noise, then loser noise.
    """
    conditions = np.asarray(conditions, dtype=np.int64)
    winners = np.asarray(winners, dtype=np.float64)
    losers = np.asarray(losers, dtype=np.float64)
    n = conditions.shape[0]
    if n == 0:
        raise EmptyBatch("preference batch is empty")
    t = sample_timesteps(rng, n, schedule)
    noise_w = rng.normal(winners.shape)
    noise_l = rng.normal(losers.shape)
    return PreferenceBatch(conditions, winners, losers, noise_w, noise_l, t)


@dataclass
class PreferenceDiagnostics:
    win_loss: float
    lose_loss: float
    ref_win_loss: float
    ref_lose_loss: float
    margin: float  # mean (lose - win) under the trained parameters
    bracket: float  # mean B
    dpo_loss: float
    fm_loss: float
    accuracy: float  # fraction of items with B < 0


def dpo_objective(lw, ll, lw_ref, ll_ref, beta: float) -> np.ndarray:
    """Per-item ``-log sigmoid(-beta [(lw - ll) - (lw_ref - ll_ref)])``."""
    bracket = (np.asarray(lw) - ll) - (np.asarray(lw_ref) - ll_ref)
    return np.logaddexp(0.0, beta * bracket)


def _as_batch(batch) -> PreferenceBatch:
    if isinstance(batch, PreferenceBatch):
        if len(batch) == 0:
            raise EmptyBatch("preference batch is empty")
        return batch
    return PreferenceBatch.from_items(batch)


def _stacked_inputs(b: PreferenceBatch):
    xt_w, vt_w = interpolate(b.winners, b.noise_w, b.t)
    xt_l, vt_l = interpolate(b.losers, b.noise_l, b.t)
    x = np.concatenate([xt_w, xt_l])
    v = np.concatenate([vt_w, vt_l])
    t = np.concatenate([b.t, b.t])
    c = np.concatenate([b.conditions, b.conditions])
    return x, v, t, c


def preference_loss(params: ModelParameters, ref_params: ModelParameters, batch, cfg: DpoConfig):
    """Loss, gradient and diagnostics for ``cfg.loss_kind``."""
    b = _as_batch(batch)
    n = len(b)
    x, v, t, c = _stacked_inputs(b)
    pred, vjp = forward_and_vjp(params, x, t, c)
    pred_ref = forward_batch(ref_params, x, t, c)
    resid = pred - v
    per = np.sum(resid**2, axis=1)
    per_ref = np.sum((pred_ref - v) ** 2, axis=1)
    lw, ll = per[:n], per[n:]
    lw_ref, ll_ref = per_ref[:n], per_ref[n:]
    bracket = (lw - ll) - (lw_ref - ll_ref)
    dpo = float(np.mean(np.logaddexp(0.0, cfg.beta * bracket)))
    # d softplus(beta B) / dB = beta sigmoid(beta B)
    coef = cfg.beta * expit(cfg.beta * bracket) / n
    scale = np.concatenate([coef, -coef])
    fm = float(np.mean(lw))
    loss = dpo
    if cfg.loss_kind == "crpo":
        scale[:n] += 1.0 / n
        loss = dpo + fm
    grads = vjp(2.0 * resid * scale[:, None])
    diag = PreferenceDiagnostics(
        win_loss=fm,
        lose_loss=float(np.mean(ll)),
        ref_win_loss=float(np.mean(lw_ref)),
        ref_lose_loss=float(np.mean(ll_ref)),
        margin=float(np.mean(ll - lw)),
        bracket=float(np.mean(bracket)),
        dpo_loss=dpo,
        fm_loss=fm,
        accuracy=float(np.mean(bracket < 0)),
    )
    return loss, grads, diag


def dpo_fm_loss(params: ModelParameters, ref_params: ModelParameters, batch, cfg: DpoConfig | None = None):
    beta = cfg.beta if cfg is not None else 1.0
    return preference_loss(params, ref_params, batch, DpoConfig(beta, "dpo_fm"))


def crpo_loss(params: ModelParameters, ref_params: ModelParameters, batch, cfg: DpoConfig | None = None):
    beta = cfg.beta if cfg is not None else 1.0
    return preference_loss(params, ref_params, batch, DpoConfig(beta, "crpo"))


def pair_losses(params: ModelParameters, batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-item winning and losing velocity errors (no reference, no sigmoid)."""
    b = _as_batch(batch)
    n = len(b)
    x, v, t, c = _stacked_inputs(b)
    per = np.sum((forward_batch(params, x, t, c) - v) ** 2, axis=1)
    return per[:n], per[n:]


def loss_trajectory(params: ModelParameters, pairs, rng: Rng, schedule: str = "logit_normal") -> tuple[float, float]:
    """Mean winning and losing loss of ``params`` over a whole preference dataset.

    ``pairs`` is any sequence of objects with ``condition``, ``winner`` and
    ``loser``; pass a freshly seeded ``rng`` to compare checkpoints on
    identical noise and timesteps.
    """
    if len(pairs) == 0:
        raise EmptyBatch("preference dataset is empty")
    b = draw_preference_batch(
        [p.condition for p in pairs], [p.winner for p in pairs], [p.loser for p in pairs], rng, schedule
    )
    lw, ll = pair_losses(params, b)
    return float(np.mean(lw)), float(np.mean(ll))
