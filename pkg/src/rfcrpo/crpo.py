"""Iterative CRPO alignment: generate, rank, pair, optimise, refresh the reference.

Each iteration k turns the current policy into a preference dataset (sample
prompts from the bank, draw N candidates per prompt with the guided sampler,
keep the best and worst by reward) and fine-tunes a copy of the policy
against a frozen reference equal to the policy at the start of the iteration.
ONLINE mode regenerates the dataset every iteration; OFFLINE mode builds it
once from the base policy and reuses it.

Random streams are named children of one run seed:

    align.iter_<k>.gen     prompt sampling; candidate noise per prompt child <i>
    align.iter_<k>.train   minibatch order, timesteps, path noise
    eval                   evaluation samples and reference set (fixed per run)
    eval.loss              winning/losing loss trajectory draws
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EmptyDataset
from .flow import SamplerConfig, draw_noise, euler_sample_from_noise
from .metrics import MetricsReport, frechet_proxy, is_proxy, kl_label_proxy
from .numkit import Rng
from .preference import DpoConfig, draw_preference_batch, loss_trajectory, preference_loss
from .reward import RewardModel, score_batch, select_pair
from .synthdata import PromptBank, SyntheticTask, draw_batch, sample_prompts, write_pairs_jsonl
from .vectorfield import ModelParameters, adamw_step, clone_frozen, init_optimizer, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("online", "offline")
TRAJECTORY_COLUMNS = ["iter", "mean_reward", "fd_proxy", "kl_proxy", "is_proxy", "win_loss", "lose_loss", "margin"]


@dataclass(frozen=True)
class AlignConfig:
    iterations: int = 5
    prompts_per_iter: int = 64
    candidates_per_prompt: int = 5
    epochs_per_iter: int = 8
    batch_size: int = 16
    loss_kind: str = "crpo"
    mode: str = "online"
    beta: float = 1.0
    lr: float = 3e-4
    warmup: int = 10
    weight_decay: float = 0.0
    prompts_with_replacement: bool = True
    t_schedule: str = "logit_normal"

    def __post_init__(self):
        counts = (self.iterations, self.prompts_per_iter, self.candidates_per_prompt, self.epochs_per_iter, self.batch_size)
        if any(c < 1 for c in counts):
            raise ValueError("all AlignConfig counts must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lr < 0 or self.warmup < 0:
            raise ValueError("lr and warmup must be non-negative")
        DpoConfig(self.beta, self.loss_kind)

    @property
    def dpo(self) -> DpoConfig:
        return DpoConfig(self.beta, self.loss_kind)


@dataclass(frozen=True)
class EvalConfig:
    num_samples: int = 2000
    num_reference: int = 2000


@dataclass
class PreferencePair:
    condition: int
    winner: np.ndarray
    loser: np.ndarray
    winner_reward: float
    loser_reward: float
    iteration: int


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    prompts: np.ndarray
    rewards: np.ndarray  # (m, N) reward of every candidate
    num_degenerate: int
    iteration: int

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class IterationRecord:
    iteration: int
    metrics: MetricsReport
    win_loss: float
    lose_loss: float
    num_pairs: int
    epoch_losses: list[float] = field(default_factory=list)
    first_loss: float = float("nan")
    first_dpo_loss: float = float("nan")
    dataset_path: str | None = None
    checkpoint_path: str | None = None

    @property
    def margin(self) -> float:
        return self.lose_loss - self.win_loss

    def row(self) -> dict:
        m = self.metrics
        return {
            "iter": self.iteration,
            "mean_reward": m.mean_reward,
            "fd_proxy": m.fd_proxy,
            "kl_proxy": m.kl_proxy,
            "is_proxy": m.is_proxy,
            "win_loss": self.win_loss,
            "lose_loss": self.lose_loss,
            "margin": self.margin,
        }


CandidateFn = Callable[[ModelParameters, np.ndarray, int, Rng], np.ndarray]


def generate_candidates(params: ModelParameters, prompts, n: int, sampler: SamplerConfig, rng: Rng) -> np.ndarray:
    """(m, n, d) candidates; prompt i draws its noise from ``rng.child(i)``.

    All prompts integrate in one batch; rows are independent of batch
    composition, so this equals generating prompt by prompt.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    m, d = prompts.shape[0], params.config.data_dim
    x0 = np.concatenate([draw_noise(rng.child(i), n, d) for i in range(m)]) if m else np.zeros((0, d))
    out = euler_sample_from_noise(params, np.repeat(prompts, n), x0, sampler)
    return out.reshape(m, n, d)


def generate_preference_dataset(
    params: ModelParameters,
    task: SyntheticTask,
    bank: PromptBank,
    reward: RewardModel,
    cfg: AlignConfig,
    sampler: SamplerConfig,
    rng: Rng,
    iteration: int = 1,
    candidate_fn: CandidateFn | None = None,
) -> PreferenceDataset:
    """Sample M_k, generate N candidates each, keep (best, worst) per prompt.

    Prompts whose candidates all tie produce no pair; they are counted in
    ``num_degenerate``.
    """
    if cfg.candidates_per_prompt < 2:
        raise ValueError("need at least 2 candidates per prompt to form pairs")
    prompts = sample_prompts(bank, cfg.prompts_per_iter, rng.child("prompts"), cfg.prompts_with_replacement)
    if candidate_fn is None:
        cands = generate_candidates(params, prompts, cfg.candidates_per_prompt, sampler, rng.child("candidates"))
    else:
        cands = candidate_fn(params, prompts, cfg.candidates_per_prompt, rng.child("candidates"))
    m, n, d = cands.shape
    rewards = score_batch(reward, np.repeat(prompts, n), cands.reshape(m * n, d)).reshape(m, n)
    pairs, degenerate = [], 0
    for i in range(m):
        hi, lo, tied = select_pair(rewards[i])
        if tied:
            degenerate += 1
            continue
        pairs.append(PreferencePair(int(prompts[i]), cands[i, hi].copy(), cands[i, lo].copy(), float(rewards[i, hi]), float(rewards[i, lo]), iteration))
    return PreferenceDataset(pairs, prompts, rewards, degenerate, iteration)


@dataclass
class AlignStats:
    epoch_losses: list[float]
    first_loss: float
    first_dpo_loss: float
    steps: int


def align_iteration(params: ModelParameters, dataset: PreferenceDataset, cfg: AlignConfig, rng: Rng):
    """Fine-tune a copy of ``params`` on ``dataset`` against a frozen copy of ``params``.

    Returns ``(new_params, AlignStats)``; the last epoch's parameters are kept.
    """
    pairs = dataset.pairs if isinstance(dataset, PreferenceDataset) else list(dataset)
    if not pairs:
        raise EmptyDataset("preference dataset has no pairs")
    ref = clone_frozen(params)
    theta = clone_frozen(params)
    opt = init_optimizer(theta, lr=cfg.lr, warmup_steps=cfg.warmup, weight_decay=cfg.weight_decay)
    dpo = cfg.dpo
    conds = np.array([p.condition for p in pairs], dtype=np.int64)
    winners = np.stack([p.winner for p in pairs])
    losers = np.stack([p.loser for p in pairs])
    epoch_losses = []
    first_loss = first_dpo = float("nan")
    for epoch in range(cfg.epochs_per_iter):
        erng = rng.child(f"epoch_{epoch}")
        order = erng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = draw_preference_batch(conds[idx], winners[idx], losers[idx], erng, cfg.t_schedule)
            loss, grads, diag = preference_loss(theta, ref, batch, dpo)
            if opt.step == 0:
                first_loss, first_dpo = loss, diag.dpo_loss
            adamw_step(opt, theta, grads)
            total += loss * len(idx)
        epoch_losses.append(total / len(pairs))
    return theta, AlignStats(epoch_losses, first_loss, first_dpo, opt.step)


def evaluate_policy(
    params: ModelParameters,
    task: SyntheticTask,
    reward: RewardModel,
    sampler: SamplerConfig,
    eval_cfg: EvalConfig,
    rng: Rng,
    return_samples: bool = False,
):
    """MetricsReport on a balanced condition list, using fixed streams from ``rng``.

    Calling this with the same ``rng`` seed on different checkpoints reuses
    the same noise and reference set, so metric differences reflect the model.
    """
    k = task.num_conditions
    conds = np.arange(eval_cfg.num_samples) % k
    x0 = draw_noise(rng.child("noise"), eval_cfg.num_samples, params.config.data_dim)
    gen = euler_sample_from_noise(params, conds, x0, sampler)
    ref_conds = np.arange(eval_cfg.num_reference) % k
    ref = draw_batch(task, ref_conds, rng.child("reference"))
    report = MetricsReport(
        mean_reward=float(np.mean(score_batch(reward, conds, gen))),
        fd_proxy=frechet_proxy(gen, ref),
        kl_proxy=kl_label_proxy(task, gen, ref, conds, ref_conds),
        is_proxy=is_proxy(task, gen),
        num_generated=eval_cfg.num_samples,
        num_reference=eval_cfg.num_reference,
    )
    return (report, gen, conds) if return_samples else report


def run_alignment(
    params0: ModelParameters,
    task: SyntheticTask,
    bank: PromptBank,
    reward: RewardModel,
    cfg: AlignConfig,
    sampler: SamplerConfig,
    seed: int,
    eval_cfg: EvalConfig | None = None,
    out_dir=None,
    eval_reward: RewardModel | None = None,
) -> list[IterationRecord]:
    """Run ``cfg.iterations`` CRPO iterations from ``params0``.

    ``eval_reward`` defaults to ``reward``; pass a different model to keep the
    ranking and evaluation scorers distinct. With ``out_dir`` set, writes
    ``iter_k/{pairs.jsonl,model.rfck,metrics.json}`` and ``trajectory.csv``.
    """
    eval_cfg = eval_cfg or EvalConfig()
    eval_reward = eval_reward or reward
    root = Rng(seed)
    out = Path(out_dir) if out_dir is not None else None
    policy = params0
    dataset = None
    records = []
    for k in range(1, cfg.iterations + 1):
        if dataset is None or cfg.mode == "online":
            dataset = generate_preference_dataset(
                policy, task, bank, reward, cfg, sampler, root.child(f"align.iter_{k}.gen"), iteration=k
            )
            log.info("iteration %d: %d pairs (%d degenerate prompts)", k, len(dataset), dataset.num_degenerate)
        policy, stats = align_iteration(policy, dataset, cfg, root.child(f"align.iter_{k}.train"))
        metrics = evaluate_policy(policy, task, eval_reward, sampler, eval_cfg, root.child("eval"))
        win, lose = loss_trajectory(policy, dataset.pairs, root.child("eval.loss"), cfg.t_schedule)
        rec = IterationRecord(k, metrics, win, lose, len(dataset), stats.epoch_losses, stats.first_loss, stats.first_dpo_loss)
        if out is not None:
            it_dir = out / f"iter_{k}"
            rec.dataset_path = str(it_dir / "pairs.jsonl")
            rec.checkpoint_path = str(it_dir / "model.rfck")
            write_pairs_jsonl(rec.dataset_path, dataset.pairs)
            save_checkpoint(rec.checkpoint_path, policy, step=stats.steps)
            write_json(it_dir / "metrics.json", iteration_json(rec))
        log.info("iteration %d: reward %.5f fd %.4f kl %.5f", k, metrics.mean_reward, metrics.fd_proxy, metrics.kl_proxy)
        records.append(rec)
    if out is not None:
        write_trajectory(out / "trajectory.csv", records)
    return records


def iteration_json(rec: IterationRecord) -> dict:
    return {
        "iteration": rec.iteration,
        "metrics": rec.metrics.to_dict(),
        "win_loss": rec.win_loss,
        "lose_loss": rec.lose_loss,
        "margin": rec.margin,
        "num_pairs": rec.num_pairs,
        "epoch_losses": rec.epoch_losses,
        "first_loss": rec.first_loss,
        "first_dpo_loss": rec.first_dpo_loss,
    }


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_trajectory(path, records: list[IterationRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for rec in records:
            row = rec.row()
            writer.writerow([row["iter"]] + [repr(float(row[c])) for c in TRAJECTORY_COLUMNS[1:]])


def config_dict(cfg) -> dict:
    return asdict(cfg)
