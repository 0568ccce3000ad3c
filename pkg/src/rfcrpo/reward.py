"""Proxy reward models, candidate ranking, and best-of-N selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, TooFewCandidates
from .flow import SamplerConfig, draw_noise, euler_sample_from_noise
from .numkit import Rng
from .vectorfield import ModelParameters

REWARD_KINDS = ("cosine_embed", "neg_distance")


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Scores how well a sample matches its condition.

    ``cosine_embed`` compares the sample direction with a unit anchor per
    condition, a miniature of an embedding-cosine reward; ``neg_distance`` is
    minus the Euclidean distance to a per-condition mean.
    """

    kind: str
    anchors: np.ndarray

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"reward kind must be one of {REWARD_KINDS}")
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if self.kind == "cosine_embed":
            norms = np.linalg.norm(anchors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise ValueError("cosine anchors must have unit norm")
        object.__setattr__(self, "anchors", anchors)

    @property
    def num_conditions(self) -> int:
        return self.anchors.shape[0]


def cosine_reward(task) -> RewardModel:
    mu = task.condition_means()
    norms = np.linalg.norm(mu, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine anchors need every condition mean to be non-zero")
    return RewardModel("cosine_embed", mu / norms)


def distance_reward(task) -> RewardModel:
    return RewardModel("neg_distance", task.condition_means())


def score_batch(model: RewardModel, conditions, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (x.shape[0],))
    if x.shape[1] != model.anchors.shape[1]:
        raise ShapeMismatch(f"sample dim {x.shape[1]} != anchor dim {model.anchors.shape[1]}")
    anchors = model.anchors[conditions]
    if model.kind == "neg_distance":
        return -np.linalg.norm(x - anchors, axis=1)
    norms = np.linalg.norm(x, axis=1)
    dots = np.sum(x * anchors, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(dots / norms, -1.0, 1.0)
    # a zero sample carries no direction: score it as the worst possible output
    return np.where(norms > 0, cos, -1.0)


def score(model: RewardModel, c: int, x) -> float:
    return float(score_batch(model, [c], np.asarray(x)[None, :])[0])


@dataclass
class RankedCandidates:
    condition: int
    candidates: np.ndarray
    rewards: np.ndarray
    winner_index: int
    loser_index: int
    degenerate: bool = field(default=False)


def select_pair(rewards) -> tuple[int, int, bool]:
    """(argmax, argmin, all-tied); ties go to the lowest index."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise TooFewCandidates(f"need at least 2 candidates, got {rewards.shape[0]}")
    hi = int(np.argmax(rewards))
    lo = int(np.argmin(rewards))
    return hi, lo, bool(rewards[hi] == rewards[lo])


def rank_candidates(model: RewardModel, c: int, candidates) -> RankedCandidates:
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] < 2:
        raise TooFewCandidates(f"need at least 2 candidates, got {candidates.shape[0]}")
    rewards = score_batch(model, c, candidates)
    hi, lo, tied = select_pair(rewards)
    return RankedCandidates(int(c), candidates, rewards, hi, lo, tied)


def best_of_n(model: RewardModel, params: ModelParameters, c: int, n: int, sampler: SamplerConfig, rng: Rng):
    """Sample ``n`` candidates for condition ``c`` and keep the highest-reward one.

    Returns ``(sample, reward, all_rewards)``. Candidate ``j`` depends only on
    the ``j``-th noise draw of ``rng``, so smaller ``n`` on the same stream
    sees a prefix of the same candidates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = draw_noise(rng, n, params.config.data_dim)
    samples = euler_sample_from_noise(params, np.full(n, c), x0, sampler)
    rewards = score_batch(model, c, samples)
    best = int(np.argmax(rewards))
    return samples[best], float(rewards[best]), rewards


def prefix_best(rewards, ns) -> dict[int, float]:
    """Best-of-n reward for each n, read off one candidate sequence."""
    running = np.maximum.accumulate(np.asarray(rewards, dtype=np.float64))
    return {int(n): float(running[n - 1]) for n in ns}
