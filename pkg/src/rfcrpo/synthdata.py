"""Synthetic conditional Gaussian-mixture tasks, prompt banks and JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import BadCondition
from .numkit import Rng


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """Per-condition Gaussian mixtures.

    means: (K, C, d), covs: (K, C, d, d), weights: (K, C), prior: (K,).
    Conditions with fewer components pad with zero-weight entries.
    """

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    prior: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        prior = np.asarray(self.prior, dtype=np.float64)
        k, c, d = means.shape
        if covs.shape != (k, c, d, d) or weights.shape != (k, c) or prior.shape != (k,):
            raise ValueError("inconsistent task array shapes")
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("mixture weights must be non-negative and sum to 1 per condition")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must be non-negative and sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, -1, -2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        chol = np.linalg.cholesky(covs)  # raises LinAlgError unless positive definite
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_cumw", np.cumsum(weights, axis=1))

    @property
    def num_conditions(self) -> int:
        return self.means.shape[0]

    @property
    def data_dim(self) -> int:
        return self.means.shape[2]

    def condition_means(self) -> np.ndarray:
        """Mixture mean of each condition, shape (K, d)."""
        return np.einsum("kc,kcd->kd", self.weights, self.means)

    def condition_covs(self) -> np.ndarray:
        """Mixture covariance of each condition, shape (K, d, d)."""
        mu = self.condition_means()
        dev = self.means - mu[:, None, :]
        second = self.covs + dev[..., :, None] * dev[..., None, :]
        return np.einsum("kc,kcij->kij", self.weights, second)


def rings_task(num_conditions: int = 4, radius: float = 3.0, variance: float = 0.25) -> SyntheticTask:
    """One isotropic Gaussian per condition, centred on a circle at angle 2 pi c / K."""
    angles = 2.0 * np.pi * np.arange(num_conditions) / num_conditions
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)[:, None, :]
    covs = np.broadcast_to(variance * np.eye(2), (num_conditions, 1, 2, 2)).copy()
    weights = np.ones((num_conditions, 1))
    prior = np.full(num_conditions, 1.0 / num_conditions)
    return SyntheticTask(means, covs, weights, prior, name=f"rings-{num_conditions}")


def get_task(name: str) -> SyntheticTask:
    if name.startswith("rings-"):
        return rings_task(int(name.split("-", 1)[1]))
    raise ValueError(f"unknown task {name!r}")


def _check_condition(task: SyntheticTask, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= task.num_conditions):
        raise BadCondition(f"condition outside [0, {task.num_conditions})")
    return c


def draw_batch(task: SyntheticTask, conditions, rng: Rng) -> np.ndarray:
    """One mixture draw per entry of ``conditions``.

    Draw order: all component-selection uniforms first, then all normals.
    """
    c = _check_condition(task, np.atleast_1d(conditions))
    n = c.shape[0]
    u = rng.uniform(n)
    comp = np.minimum((u[:, None] >= task._cumw[c]).sum(axis=1), task.weights.shape[1] - 1)
    z = rng.normal((n, task.data_dim))
    return task.means[c, comp] + np.einsum("nij,nj->ni", task._chol[c, comp], z)


def draw_data(task: SyntheticTask, c: int, rng: Rng) -> np.ndarray:
    return draw_batch(task, [c], rng)[0]


def log_joint(task: SyntheticTask, x) -> np.ndarray:
    """log p(x, c) for every condition, shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = task.data_dim
    dev = x[:, None, None, :] - task.means[None]  # (n, K, C, d)
    sol = np.linalg.solve(task._chol[None], dev[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(task._chol, axis1=-2, axis2=-1)).sum(axis=-1)
    comp_logpdf = -0.5 * (np.sum(sol**2, axis=-1) + logdet + d * np.log(2.0 * np.pi))
    with np.errstate(divide="ignore"):
        logw = np.log(task.weights)
    return np.log(task.prior) + logsumexp(comp_logpdf + logw, axis=-1)


def posterior_batch(task: SyntheticTask, x) -> np.ndarray:
    lj = log_joint(task, x)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return post / post.sum(axis=1, keepdims=True)


def posterior(task: SyntheticTask, x) -> np.ndarray:
    return posterior_batch(task, np.asarray(x, dtype=np.float64)[None, :])[0]


@dataclass(frozen=True)
class PromptBank:
    conditions: tuple[int, ...]

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("prompt bank must be non-empty")

    def __len__(self) -> int:
        return len(self.conditions)

    def validate(self, task: SyntheticTask) -> None:
        _check_condition(task, list(self.conditions))


def make_prompt_bank(num_conditions: int, size: int) -> PromptBank:
    """Balanced bank: entry i holds condition i mod K."""
    return PromptBank(tuple(i % num_conditions for i in range(size)))


def sample_prompts(bank: PromptBank, m: int, rng: Rng, replace: bool = True) -> np.ndarray:
    if m < 1:
        raise ValueError("m must be >= 1")
    pool = np.asarray(bank.conditions, dtype=np.int64)
    if replace:
        return pool[rng.integers(len(pool), size=m)]
    if m > len(pool):
        raise ValueError(f"cannot draw {m} prompts without replacement from {len(pool)}")
    return pool[rng.permutation(len(pool))[:m]]


# ------------------------------------------------------------------ JSONL


def _floats(xs) -> str:
    return "[" + ", ".join(f"{float(v):.17g}" for v in xs) + "]"


def write_samples_jsonl(path, conditions, samples) -> None:
    lines = [f'{{"c": {int(c)}, "x": {_floats(x)}}}' for c, x in zip(conditions, samples)]
    _write_lines(path, lines)


def read_samples_jsonl(path) -> tuple[np.ndarray, np.ndarray]:
    recs = [json.loads(line) for line in Path(path).read_text("utf-8").splitlines() if line.strip()]
    return np.array([r["c"] for r in recs], dtype=np.int64), np.array([r["x"] for r in recs], dtype=np.float64)


def pair_record(c, xw, xl, rw, rl, iteration) -> str:
    return (
        f'{{"c": {int(c)}, "xw": {_floats(xw)}, "xl": {_floats(xl)}, '
        f'"rw": {float(rw):.17g}, "rl": {float(rl):.17g}, "iter": {int(iteration)}}}'
    )


def _write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_pairs_jsonl(path, records) -> None:
    """``records`` are objects with condition, winner, loser, winner_reward, loser_reward, iteration."""
    _write_lines(
        path,
        [pair_record(r.condition, r.winner, r.loser, r.winner_reward, r.loser_reward, r.iteration) for r in records],
    )


def read_pairs_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text("utf-8").splitlines() if line.strip()]
