"""Objective metric proxies and subjective-evaluation statistics.

Objective proxies work on raw samples of a ``SyntheticTask``: a Frechet
(2-Wasserstein Gaussian) distance, a label KL built from the task's exact
posteriors, and an inception-score analogue over the same posteriors.

Subjective statistics work on a ``ScoreTable`` of 0-100 ratings: per-annotator
z-scores, mean/mode ranks, and Elo ratings from pairwise comparisons.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import MissingCell, NoComparisons, ScoreParseError, TooFewSamples, ZeroVariance
from .numkit import Rng, matrix_sqrt_psd
from .synthdata import SyntheticTask, posterior_batch

KL_SMOOTHING = 1e-8


@dataclass
class MetricsReport:
    mean_reward: float
    fd_proxy: float
    kl_proxy: float
    is_proxy: float
    num_generated: int
    num_reference: int

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- objective


def frechet_from_stats(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    root1 = matrix_sqrt_psd(cov1)
    inner = root1 @ cov2 @ root1
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))


def _fit_gaussian(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 1:
        raise TooFewSamples(f"need at least {d + 1} samples in {d} dimensions, got {n}")
    mu = x.mean(axis=0)
    dev = x - mu
    return mu, dev.T @ dev / (n - 1)


def frechet_proxy(gen, ref) -> float:
    mu1, cov1 = _fit_gaussian(gen)
    mu2, cov2 = _fit_gaussian(ref)
    return max(frechet_from_stats(mu1, cov1, mu2, cov2), 0.0)


def kl_from_distributions(p, q, eps: float = KL_SMOOTHING) -> float:
    """KL(p || q) with ``eps`` added to q before renormalising."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64) + eps
    q = q / q.sum()
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / q[mask])), 0.0))


def kl_label_proxy(task: SyntheticTask, gen, ref, gen_conditions=None, ref_conditions=None) -> float:
    """KL(mean posterior over ref || mean posterior over gen).

    Given condition labels for both sets, the KL is taken within each
    condition and averaged over conditions, which compares label
    distributions prompt by prompt instead of only their pooled marginals.
    """
    post_ref = posterior_batch(task, ref)
    post_gen = posterior_batch(task, gen)
    if gen_conditions is None and ref_conditions is None:
        return kl_from_distributions(post_ref.mean(axis=0), post_gen.mean(axis=0))
    if gen_conditions is None or ref_conditions is None:
        raise ValueError("pass condition labels for both sets or for neither")
    gen_conditions = np.asarray(gen_conditions)
    ref_conditions = np.asarray(ref_conditions)
    values = []
    for c in np.unique(ref_conditions):
        g = gen_conditions == c
        if not g.any():
            raise TooFewSamples(f"no generated samples for condition {c}")
        values.append(kl_from_distributions(post_ref[ref_conditions == c].mean(axis=0), post_gen[g].mean(axis=0)))
    return float(np.mean(values))


def is_from_posteriors(post) -> float:
    post = np.asarray(post, dtype=np.float64)
    marginal = post.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(post > 0, post * (np.log(post) - np.log(marginal)), 0.0)
    return float(math.exp(np.sum(terms) / post.shape[0]))


def is_proxy(task: SyntheticTask, gen) -> float:
    """exp(mean_x KL(p(c|x) || mean_x p(c|x)))."""
    return is_from_posteriors(posterior_batch(task, gen))


# ------------------------------------------------------------ subjective


@dataclass(frozen=True)
class ScoreEntry:
    annotator: str
    model: str
    prompt: str
    score: float


@dataclass
class ScoreTable:
    entries: list[ScoreEntry] = field(default_factory=list)

    def models(self) -> list[str]:
        return sorted({e.model for e in self.entries})

    def annotators(self) -> list[str]:
        return sorted({e.annotator for e in self.entries})

    def cells(self) -> dict[tuple[str, str], dict[str, float]]:
        out: dict[tuple[str, str], dict[str, float]] = defaultdict(dict)
        for e in self.entries:
            out[(e.annotator, e.prompt)][e.model] = e.score
        return dict(out)


def read_score_csv(path) -> ScoreTable:
    """Parse ``annotator,model,prompt,score``; raw scores must lie in [0, 100]."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ScoreParseError(1, "empty file")
    header = [h.strip() for h in rows[0]]
    if header != ["annotator", "model", "prompt", "score"]:
        raise ScoreParseError(1, f"expected header annotator,model,prompt,score, got {','.join(header)}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise ScoreParseError(lineno, f"expected 4 fields, got {len(row)}")
        try:
            value = float(row[3])
        except ValueError:
            raise ScoreParseError(lineno, f"score {row[3]!r} is not a number") from None
        if not 0.0 <= value <= 100.0:
            raise ScoreParseError(lineno, f"score {value} outside [0, 100]")
        entries.append(ScoreEntry(row[0].strip(), row[1].strip(), row[2].strip(), value))
    if not entries:
        raise ScoreParseError(2, "no score rows")
    return ScoreTable(entries)


def zscore_normalize(table: ScoreTable) -> ScoreTable:
    """z_ij = (s_ij - mean_i) / std_i per annotator, with the n-1 standard deviation."""
    by_annotator: dict[str, list[float]] = defaultdict(list)
    for e in table.entries:
        by_annotator[e.annotator].append(e.score)
    stats = {}
    for annotator, scores in by_annotator.items():
        if len(scores) < 2:
            raise ZeroVariance(f"annotator {annotator!r} has fewer than 2 scores")
        arr = np.array(scores)
        sd = float(np.std(arr, ddof=1))
        if sd == 0.0:
            raise ZeroVariance(f"annotator {annotator!r} gave identical scores")
        stats[annotator] = (float(np.mean(arr)), sd)
    return ScoreTable(
        [
            ScoreEntry(e.annotator, e.model, e.prompt, (e.score - stats[e.annotator][0]) / stats[e.annotator][1])
            for e in table.entries
        ]
    )


def mean_scores(table: ScoreTable) -> dict[str, float]:
    acc: dict[str, list[float]] = defaultdict(list)
    for e in table.entries:
        acc[e.model].append(e.score)
    return {m: float(np.mean(v)) for m, v in sorted(acc.items())}


@dataclass
class RankStats:
    mean_rank: float
    mode_rank: int


def cell_ranks(table: ScoreTable) -> dict[tuple[str, str], dict[str, float]]:
    """Rank 1 = highest score in each (annotator, prompt) cell; ties share the average rank."""
    models = table.models()
    out = {}
    for key, scores in sorted(table.cells().items()):
        missing = [m for m in models if m not in scores]
        if missing:
            raise MissingCell(f"cell {key} has no score for {missing}")
        ranks = rankdata([-scores[m] for m in models], method="average")
        out[key] = dict(zip(models, (float(r) for r in ranks)))
    return out


def rank_stats(table: ScoreTable) -> dict[str, RankStats]:
    ranks = cell_ranks(table)
    result = {}
    for m in table.models():
        values = [cell[m] for cell in ranks.values()]
        counts = Counter(int(math.floor(v)) for v in values)
        top = max(counts.values())
        result[m] = RankStats(float(np.mean(values)), min(r for r, k in counts.items() if k == top))
    return result


def pairwise_comparisons(table: ScoreTable) -> list[tuple[str, str, float]]:
    """``(a, b, s_a)`` with s_a = 1 if a scored higher, 0.5 on a tie, 0 otherwise."""
    comps = []
    for _, scores in sorted(table.cells().items()):
        for a, b in combinations(sorted(scores), 2):
            sa, sb = scores[a], scores[b]
            comps.append((a, b, 1.0 if sa > sb else 0.0 if sa < sb else 0.5))
    return comps


# rating deltas are rounded to this grid so sums of ratings stay exact in binary64
_ELO_GRID = 2.0**-20


def elo_pass(comparisons, models, order, k_factor: float, initial: float) -> dict[str, float]:
    ratings = {m: float(initial) for m in models}
    for i in order:
        a, b, sa = comparisons[i]
        expected = 1.0 / (1.0 + 10.0 ** ((ratings[b] - ratings[a]) / 400.0))
        delta = round(k_factor * (sa - expected) / _ELO_GRID) * _ELO_GRID
        ratings[a] += delta
        ratings[b] -= delta
    return ratings


def elo_scores(
    table: ScoreTable,
    k_factor: float = 32.0,
    initial: float = 1500.0,
    seed: int = 0,
    rounds: int = 1,
) -> dict[str, float]:
    """Elo ratings from every within-cell model pair, in seed-shuffled order.

    With ``rounds > 1`` the ratings are averaged over that many independent
    shuffles. Each pass conserves the rating total exactly.
    """
    comps = pairwise_comparisons(table)
    if not comps:
        raise NoComparisons("score table yields no pairwise comparisons")
    models = table.models()
    rng = Rng(seed)
    passes = [elo_pass(comps, models, rng.permutation(len(comps)), k_factor, initial) for _ in range(rounds)]
    return {m: float(np.mean([p[m] for p in passes])) for m in models}


def subjective_report(table: ScoreTable, k_factor: float = 32.0, initial: float = 1500.0, seed: int = 0, rounds: int = 10) -> dict:
    z = zscore_normalize(table)
    zmeans = mean_scores(z)
    ranks = rank_stats(table)
    elo = elo_scores(z, k_factor, initial, seed, rounds)
    return {
        "models": {
            m: {
                "z_mean": zmeans[m],
                "rank_mean": ranks[m].mean_rank,
                "rank_mode": ranks[m].mode_rank,
                "elo": elo[m],
            }
            for m in table.models()
        },
        "elo_settings": {"k_factor": k_factor, "initial": initial, "seed": seed, "rounds": rounds},
        "num_scores": len(table.entries),
    }
