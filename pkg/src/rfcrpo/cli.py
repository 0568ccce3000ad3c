"""Command-line entry point: pretrain, align, sample, eval, subjective, check-euler.

Settings come from a JSON run config (``--config``), then the ``RFCRPO_OUT``
environment variable for the output root, then command-line flags. Every
random draw descends from the run seed through named child streams:

    pretrain.init, pretrain.train   base-model initialisation and training
    align.iter_<k>.gen / .train     alignment (see ``rfcrpo.crpo``)
    eval                            metrics, sampling sweeps, best-of-N
    sample                          the ``sample`` command
    check-euler                     the analytic sampler harness

Failures exit non-zero with one line ``rfcrpo: error: <Kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .crpo import AlignConfig, EvalConfig, generate_candidates, run_alignment, write_json
from .errors import RfcrpoError
from .flow import PretrainConfig, SamplerConfig, euler_integrate, euler_sample_batch, point_mass_velocity, pretrain
from .metrics import MetricsReport, frechet_proxy, is_proxy, kl_label_proxy, read_score_csv, subjective_report
from .numkit import Rng
from .reward import RewardModel, cosine_reward, distance_reward, score_batch
from .synthdata import SyntheticTask, draw_batch, get_task, make_prompt_bank, write_samples_jsonl
from .vectorfield import ModelConfig, ModelParameters, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("rfcrpo")

OUT_ENV = "RFCRPO_OUT"
EULER_TOLERANCE = 1e-9
EVAL_COLUMNS = ["steps", "cfg", "bon", "mean_reward", "fd_proxy", "kl_proxy", "is_proxy", "num_generated", "num_reference"]


@dataclass(frozen=True)
class ModelSettings:
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 8
    time_features: int = 8
    activation: str = "silu"


@dataclass(frozen=True)
class EvalSettings:
    num_samples: int = 2000
    num_reference: int = 2000
    steps: tuple[int, ...] = (50,)
    cfg: tuple[float, ...] = (1.5,)
    bon: tuple[int, ...] = (1,)

    def __post_init__(self):
        if self.num_samples < 1 or self.num_reference < 1:
            raise ValueError("eval sample counts must be >= 1")
        if not self.steps or not self.cfg or not self.bon:
            raise ValueError("eval sweep lists must be non-empty")
        if min(self.steps) < 1 or min(self.bon) < 1 or min(self.cfg) < 0:
            raise ValueError("eval steps and bon must be >= 1 and cfg >= 0")


@dataclass(frozen=True)
class RunConfig:
    task: str = "rings-4"
    model: ModelSettings = field(default_factory=ModelSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=50, cfg_scale=1.5))
    eval: EvalSettings = field(default_factory=EvalSettings)
    reward: str = "cosine_embed"
    eval_reward: str = "cosine_embed"
    bank_size: int = 256
    seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "model": ModelSettings,
            "pretrain": PretrainConfig,
            "align": AlignConfig,
            "sampler": SamplerConfig,
            "eval": EvalSettings,
        }
        _reject_unknown(cls, d, "run config")
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be an object")
                _reject_unknown(sections[key], value, key)
                value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _reject_unknown(cls, d: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ValueError(f"unknown keys in {where}: {', '.join(extra)}")


def load_run_config(path=None, env=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    env = os.environ if env is None else env
    if env.get(OUT_ENV):
        cfg = replace(cfg, out_dir=env[OUT_ENV])
    return cfg


# ------------------------------------------------------------ building blocks


def model_config(cfg: RunConfig, task: SyntheticTask) -> ModelConfig:
    return ModelConfig(task.data_dim, task.num_conditions, **asdict(cfg.model))


def reward_model(kind: str, task: SyntheticTask) -> RewardModel:
    if kind == "cosine_embed":
        return cosine_reward(task)
    if kind == "neg_distance":
        return distance_reward(task)
    raise ValueError(f"unknown reward kind {kind!r}")


def untrained_model(cfg: RunConfig, task: SyntheticTask | None = None) -> ModelParameters:
    task = task or get_task(cfg.task)
    return init_params(model_config(cfg, task), Rng(cfg.seed).child("pretrain").child("init"))


def train_base_model(cfg: RunConfig, task: SyntheticTask | None = None) -> tuple[ModelParameters, list[float]]:
    """Initialise and pretrain the base model from the run seed."""
    task = task or get_task(cfg.task)
    params = untrained_model(cfg, task)
    return pretrain(params, task, cfg.pretrain, Rng(cfg.seed).child("pretrain").child("train"))


def eval_config(cfg: RunConfig) -> EvalConfig:
    return EvalConfig(cfg.eval.num_samples, cfg.eval.num_reference)


def evaluate_best_of_n(
    params: ModelParameters,
    task: SyntheticTask,
    reward: RewardModel,
    sampler: SamplerConfig,
    bon: list[int],
    num_prompts: int,
    num_reference: int,
    rng: Rng,
) -> dict[int, MetricsReport]:
    """MetricsReport of the best-of-n sample per prompt, for every n in ``bon``.

    Prompt ``i`` draws its candidates from ``rng.child("noise").child(i)``, so
    best-of-n for a smaller n is chosen from a prefix of the same candidates.
    """
    k = task.num_conditions
    conds = np.arange(num_prompts) % k
    ref_conds = np.arange(num_reference) % k
    ref = draw_batch(task, ref_conds, rng.child("reference"))
    n_max = max(bon)
    cands = generate_candidates(params, conds, n_max, sampler, rng.child("noise"))
    rewards = score_batch(reward, np.repeat(conds, n_max), cands.reshape(-1, task.data_dim)).reshape(num_prompts, n_max)
    out = {}
    for n in sorted(set(bon)):
        best = np.argmax(rewards[:, :n], axis=1)
        gen = cands[np.arange(num_prompts), best]
        out[n] = MetricsReport(
            mean_reward=float(np.mean(rewards[np.arange(num_prompts), best])),
            fd_proxy=frechet_proxy(gen, ref),
            kl_proxy=kl_label_proxy(task, gen, ref, conds, ref_conds),
            is_proxy=is_proxy(task, gen),
            num_generated=num_prompts,
            num_reference=num_reference,
        )
    return out


def euler_exactness(steps_list, dim: int, rng: Rng) -> dict[int, float]:
    """Max abs error of Euler sampling under the single-point velocity field."""
    target = rng.normal(dim)
    x0 = rng.normal(dim)
    velocity = point_mass_velocity(target)
    return {int(s): float(np.max(np.abs(euler_integrate(velocity, x0, int(s)) - target))) for s in steps_list}


def _write_rows(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ------------------------------------------------------------------ commands


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    task = get_task(cfg.task)
    params, losses = train_base_model(cfg, task)
    ckpt = out / "base.rfck"
    save_checkpoint(ckpt, params, step=cfg.pretrain.epochs)
    _write_rows(out / "pretrain_loss.csv", ["epoch", "loss"], [[i + 1, _fmt(v)] for i, v in enumerate(losses)])
    write_json(out / "pretrain_config.json", cfg.to_dict())
    print(ckpt)
    return 0


def _load(path) -> ModelParameters:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, _, _ = load_checkpoint(path)
    return params


def _checked_task(cfg: RunConfig, params: ModelParameters) -> SyntheticTask:
    task = get_task(cfg.task)
    if (params.config.data_dim, params.config.num_conditions) != (task.data_dim, task.num_conditions):
        raise ValueError(f"checkpoint does not match task {cfg.task}")
    return task


def cmd_align(cfg: RunConfig, args) -> int:
    params = _load(args.checkpoint or Path(cfg.out_dir) / "base.rfck")
    task = _checked_task(cfg, params)
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.out_dir) / f"align_{cfg.align.mode}_{cfg.align.loss_kind}"
    run_alignment(
        params,
        task,
        make_prompt_bank(task.num_conditions, cfg.bank_size),
        reward_model(cfg.reward, task),
        cfg.align,
        cfg.sampler,
        cfg.seed,
        eval_config(cfg),
        out_dir=run_dir,
        eval_reward=reward_model(cfg.eval_reward, task),
    )
    write_json(run_dir / "config.json", cfg.to_dict())
    print(run_dir / "trajectory.csv")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    params = _load(args.checkpoint or Path(cfg.out_dir) / "base.rfck")
    task = _checked_task(cfg, params)
    if args.condition is None:
        conds = np.arange(args.n) % task.num_conditions
    else:
        conds = np.full(args.n, args.condition)
    samples = euler_sample_batch(params, conds, cfg.sampler, Rng(cfg.seed).child("sample"))
    path = Path(args.output) if args.output else Path(cfg.out_dir) / "samples.jsonl"
    write_samples_jsonl(path, conds, samples)
    print(path)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    params = _load(args.checkpoint or Path(cfg.out_dir) / "base.rfck")
    task = _checked_task(cfg, params)
    reward = reward_model(cfg.eval_reward, task)
    rows, timing = [], []
    for steps in cfg.eval.steps:
        for w in cfg.eval.cfg:
            sampler = SamplerConfig(steps=steps, cfg_scale=w)
            start = time.perf_counter()
            reports = evaluate_best_of_n(
                params, task, reward, sampler, list(cfg.eval.bon), cfg.eval.num_samples, cfg.eval.num_reference,
                Rng(cfg.seed).child("eval"),
            )
            elapsed = time.perf_counter() - start
            timing.append([steps, _fmt(float(w)), max(cfg.eval.bon), f"{elapsed:.6f}"])
            for n in cfg.eval.bon:
                m = reports[n].to_dict()
                rows.append([steps, _fmt(float(w)), n] + [_fmt(m[c]) for c in EVAL_COLUMNS[3:]])
    out = Path(args.output_dir) if args.output_dir else Path(cfg.out_dir) / "eval"
    _write_rows(out / "eval.csv", EVAL_COLUMNS, rows)
    # wall-clock lives in its own file so eval.csv stays byte-identical across runs
    _write_rows(out / "timing.csv", ["steps", "cfg", "max_bon", "seconds"], timing)
    print(out / "eval.csv")
    return 0


def cmd_subjective(cfg: RunConfig, args) -> int:
    table = read_score_csv(args.scores)
    report = subjective_report(table, args.k_factor, args.initial, cfg.seed, args.rounds)
    path = Path(args.output) if args.output else Path(cfg.out_dir) / "leaderboard.json"
    write_json(path, report)
    print(path)
    return 0


def cmd_check_euler(cfg: RunConfig, args) -> int:
    errors = euler_exactness(args.steps, args.dim, Rng(cfg.seed).child("check-euler"))
    ok = all(e <= EULER_TOLERANCE for e in errors.values())
    print(json.dumps({"max_abs_error": {str(k): v for k, v in errors.items()}, "tolerance": EULER_TOLERANCE, "ok": ok}, sort_keys=True))
    if not ok:
        raise RfcrpoError(f"Euler sampler missed the target by {max(errors.values()):.3e}")
    return 0


# -------------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _list_of(parse):
    def parse_list(text: str):
        items = [s for s in text.split(",") if s.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return [parse(s.strip()) for s in items]

    return parse_list


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"rfcrpo: error: UsageError: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", help=f"output root (overrides ${OUT_ENV} and the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rfcrpo", description="Rectified-flow pretraining and CRPO alignment on synthetic tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", parents=[common], help="train the base model with flow matching")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=_non_negative_float)
    p.add_argument("--batch-size", type=_positive_int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("align", parents=[common], help="run iterative preference alignment")
    p.add_argument("--checkpoint", help="base checkpoint (default <out>/base.rfck)")
    p.add_argument("--mode", choices=["online", "offline"])
    p.add_argument("--loss", choices=["crpo", "dpo-fm"])
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--lr", type=_non_negative_float)
    p.add_argument("--beta", type=float)
    p.add_argument("--cfg", type=_non_negative_float, help="guidance scale for generation and evaluation")
    p.add_argument("--run-dir", help="output directory (default <out>/align_<mode>_<loss>)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--condition", type=int, help="single condition (default: cycle through all)")
    p.add_argument("--n", type=_positive_int, default=16)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--cfg", type=_non_negative_float)
    p.add_argument("--output", help="JSONL path (default <out>/samples.jsonl)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="metrics over a steps x cfg x best-of-N sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=_list_of(_positive_int))
    p.add_argument("--cfg", type=_list_of(_non_negative_float))
    p.add_argument("--bon", type=_list_of(_positive_int))
    p.add_argument("--num-samples", type=_positive_int)
    p.add_argument("--output-dir", help="default <out>/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("subjective", parents=[common], help="leaderboard from an annotator score CSV")
    p.add_argument("scores", help="CSV with header annotator,model,prompt,score")
    p.add_argument("--k-factor", type=float, default=32.0)
    p.add_argument("--initial", type=float, default=1500.0)
    p.add_argument("--rounds", type=_positive_int, default=10)
    p.add_argument("--output", help="JSON path (default <out>/leaderboard.json)")
    p.set_defaults(func=cmd_subjective)

    p = sub.add_parser("check-euler", parents=[common], help="Euler exactness on the analytic single-point field")
    p.add_argument("--steps", type=_list_of(_positive_int), default=[1, 2, 10, 50])
    p.add_argument("--dim", type=_positive_int, default=2)
    p.set_defaults(func=cmd_check_euler)
    return parser


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold command-line flags into ``cfg``; flags win over file and environment."""
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    cmd = args.command
    if cmd == "pretrain":
        pre = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr), ("batch_size", args.batch_size)) if v is not None}
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, **pre))
    elif cmd == "align":
        loss = None if args.loss is None else args.loss.replace("-", "_")
        al = {k: v for k, v in (("mode", args.mode), ("loss_kind", loss), ("iterations", args.iterations), ("lr", args.lr), ("beta", args.beta)) if v is not None}
        cfg = replace(cfg, align=replace(cfg.align, **al))
        if args.cfg is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, cfg_scale=args.cfg))
    elif cmd == "sample":
        sm = {k: v for k, v in (("steps", args.steps), ("cfg_scale", args.cfg)) if v is not None}
        cfg = replace(cfg, sampler=replace(cfg.sampler, **sm))
    elif cmd == "eval":
        ev = {k: tuple(v) for k, v in (("steps", args.steps), ("cfg", args.cfg), ("bon", args.bon)) if v is not None}
        if args.num_samples is not None:
            ev["num_samples"] = args.num_samples
        cfg = replace(cfg, eval=replace(cfg.eval, **ev))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        return args.func(cfg, args)
    except (RfcrpoError, ValueError, OSError, KeyError) as exc:
        reason = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"rfcrpo: error: {exc.__class__.__name__}: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
