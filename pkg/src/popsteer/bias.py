"""Popularity-neuron analysis and steering.

Per-neuron activation statistics are gathered on popular-only and
unpopular-only synthetic profiles and contrasted with Cohen's d. Steering
then boosts neurons with d < 0 and suppresses neurons with d > 0 by
``w_j * sigma_j``, where ``w_j`` is ``alpha`` times the min-max normalised
``|d_j|`` and ``sigma_j`` is the pooled standard deviation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from popsteer import sae as sae_mod
from popsteer.artifacts import read_table, write_table
from popsteer.backbone import BackboneModel, embed_histories
from popsteer.data import InteractionLog, SplitBundle
from popsteer.errors import ConfigError, DataError

log = logging.getLogger(__name__)

BOOST, SUPPRESS = "boost", "suppress"
CHUNK = 256


def chunked_map(fn: Callable, n: int, threads: int = 1, chunk: int = CHUNK) -> list:
    """Apply ``fn(lo, hi)`` over fixed-size chunks of ``range(n)``, results in chunk order.

    Chunk boundaries do not depend on ``threads``, so outputs are identical for
    any thread count.
    """
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


class RunningMoments:
    """Per-column count / mean / sum of squared deviations, mergeable (Chan et al.)."""

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    @classmethod
    def from_batch(cls, A: np.ndarray) -> "RunningMoments":
        out = cls(A.shape[1])
        if A.shape[0]:
            out.count = A.shape[0]
            out.mean = A.mean(axis=0)
            out.m2 = ((A - out.mean) ** 2).sum(axis=0)
        return out

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        out = RunningMoments(len(self.mean))
        n = self.count + other.count
        if n == 0:
            return out
        delta = other.mean - self.mean
        out.count = n
        out.mean = self.mean + delta * (other.count / n)
        out.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return out

    @property
    def std(self) -> np.ndarray:
        """Population standard deviation (divisor n)."""
        if self.count == 0:
            raise DataError("no samples")
        return np.sqrt(self.m2 / self.count)


def cohens_d(mu_pop, sigma_pop, mu_unpop, sigma_unpop) -> tuple[np.ndarray, np.ndarray]:
    """Cohen's d per neuron and the pooled sd; d = 0 where the pooled sd is 0."""
    mu_pop, mu_unpop = np.asarray(mu_pop, dtype=float), np.asarray(mu_unpop, dtype=float)
    pooled = np.sqrt((np.asarray(sigma_pop, dtype=float) ** 2 + np.asarray(sigma_unpop, dtype=float) ** 2) / 2.0)
    safe = np.where(pooled > 0, pooled, 1.0)
    d = np.where(pooled > 0, (mu_pop - mu_unpop) / safe, 0.0)
    return d, pooled


@dataclass(frozen=True)
class NeuronStats:
    mu_pop: np.ndarray
    sigma_pop: np.ndarray
    mu_unpop: np.ndarray
    sigma_unpop: np.ndarray
    cohens_d: np.ndarray
    sigma_pooled: np.ndarray
    n_pop: int
    n_unpop: int

    @property
    def n(self) -> int:
        return len(self.cohens_d)

    @property
    def degenerate(self) -> np.ndarray:
        return self.sigma_pooled == 0

    @classmethod
    def from_moments(cls, pop: RunningMoments, unpop: RunningMoments) -> "NeuronStats":
        d, pooled = cohens_d(pop.mean, pop.std, unpop.mean, unpop.std)
        return cls(pop.mean, pop.std, unpop.mean, unpop.std, d, pooled, pop.count, unpop.count)

    @classmethod
    def from_samples(cls, pop: np.ndarray, unpop: np.ndarray) -> "NeuronStats":
        return cls.from_moments(RunningMoments.from_batch(np.atleast_2d(pop)),
                                RunningMoments.from_batch(np.atleast_2d(unpop)))


STAGES = ("post_mask", "pre_mask")


def stage_activations(sae: sae_mod.SaeModel, X: np.ndarray, stage: str = "post_mask") -> np.ndarray:
    """Activations used for statistics: after the top-K mask, or ReLU before it."""
    if stage == "post_mask":
        return sae_mod.encode_dense(sae, X)
    if stage == "pre_mask":
        return np.maximum(sae_mod.pre_activations(sae, X), 0.0)
    raise ConfigError(f"activation stage must be one of {STAGES}, got {stage!r}")


def _population_moments(sae, backbone, profiles: InteractionLog, threads: int, stage: str) -> RunningMoments:
    seqs = profiles.sequences()
    users = [u for u, s in enumerate(seqs) if len(s)]
    if not users:
        raise DataError("empty synthetic population")

    def work(lo, hi):
        X = embed_histories(backbone, [seqs[u] for u in users[lo:hi]])
        return RunningMoments.from_batch(stage_activations(sae, X, stage))

    total = RunningMoments(sae.n)
    for part in chunked_map(work, len(users), threads):
        total = total.merge(part)
    return total


def collect_activation_stats(
    sae: sae_mod.SaeModel,
    backbone: BackboneModel,
    profiles_pop: InteractionLog,
    profiles_unpop: InteractionLog,
    threads: int = 1,
    stage: str = "post_mask",
) -> NeuronStats:
    """Per-neuron activation statistics under both synthetic populations.

    ``stage='post_mask'`` counts masked-out neurons as 0; ``'pre_mask'`` uses
    the ReLU activations before top-K selection.
    """
    if stage not in STAGES:
        raise ConfigError(f"activation stage must be one of {STAGES}, got {stage!r}")
    pop_users = np.unique(profiles_pop.users)
    if not np.array_equal(pop_users, np.unique(profiles_unpop.users)):
        raise DataError("popular and unpopular synthetic logs cover different users")
    return NeuronStats.from_moments(
        _population_moments(sae, backbone, profiles_pop, threads, stage),
        _population_moments(sae, backbone, profiles_unpop, threads, stage),
    )


# -------------------------------------------------------------------- steering


def rank_by_effect(stats: NeuronStats) -> np.ndarray:
    """Non-degenerate neurons with d != 0, by |d| descending then id ascending."""
    eligible = np.nonzero(stats.cohens_d != 0)[0]
    order = np.lexsort((eligible, -np.abs(stats.cohens_d[eligible])))
    return eligible[order]


def select_neurons(stats: NeuronStats, n_select: int) -> np.ndarray:
    if not 0 <= n_select <= stats.n:
        raise ConfigError(f"n_select={n_select} outside [0, {stats.n}]")
    ranked = rank_by_effect(stats)
    if n_select > len(ranked):
        log.info("only %d of %d requested neurons have a non-zero effect size", len(ranked), n_select)
    return ranked[:n_select]


@dataclass(frozen=True)
class SteeringPlan:
    n: int
    neurons: np.ndarray
    weights: np.ndarray
    directions: tuple[str, ...]
    sigmas: np.ndarray

    def offsets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(boost ids, boost amounts, suppress ids, suppress amounts)."""
        boost = np.array([d == BOOST for d in self.directions], dtype=bool)
        step = self.weights * self.sigmas
        return self.neurons[boost], step[boost], self.neurons[~boost], step[~boost]


def build_steering_plan(stats: NeuronStats, alpha: float, n_select: int) -> SteeringPlan:
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    absd = np.abs(stats.cohens_d)
    lo, hi = absd.min(), absd.max()
    if hi <= lo:
        raise DataError("all |d| equal: steering weight normalization undefined")
    chosen = select_neurons(stats, n_select)
    weights = alpha * (absd[chosen] - lo) / (hi - lo)
    directions = tuple(BOOST if d < 0 else SUPPRESS for d in stats.cohens_d[chosen])
    return SteeringPlan(stats.n, chosen, weights, directions, stats.sigma_pooled[chosen])


def _dense(a) -> np.ndarray:
    if isinstance(a, sae_mod.SparseActivation):
        return a.to_dense()
    return np.array(a, dtype=np.float64)


def steer(a, plan: SteeringPlan) -> np.ndarray:
    """Apply the plan to one activation vector or a (B, N) batch; returns dense values.

    Boosted neurons gain ``w * sigma`` (even if the top-K mask had zeroed them);
    suppressed neurons lose ``w * sigma`` and are clamped at zero.
    """
    A = _dense(a)
    if A.shape[-1] != plan.n:
        raise DataError(f"activation width {A.shape[-1]} does not match plan width {plan.n}")
    b_ids, b_amt, s_ids, s_amt = plan.offsets()
    A[..., b_ids] += b_amt
    A[..., s_ids] = np.maximum(A[..., s_ids] - s_amt, 0.0)
    return A


def steered_user_embedding(sae: sae_mod.SaeModel, plan: SteeringPlan, x: np.ndarray) -> np.ndarray:
    A = steer(sae_mod.encode_dense(sae, x), plan)
    out = sae_mod.decode_dense(sae, A)
    return out[0] if np.ndim(x) == 1 else out


def noise_ablation(a, n_select: int, xi: float, seed, stats: NeuronStats, selection: str = "top") -> np.ndarray:
    """Add N(0, xi^2) to the selected neurons' activations, clamp at zero."""
    if xi < 0:
        raise ConfigError("xi must be >= 0")
    A = _dense(a)
    ids = noise_neurons(stats, n_select, selection, seed)
    if xi == 0 or len(ids) == 0:
        return A
    rng = np.random.default_rng(seed)
    A[..., ids] = np.maximum(A[..., ids] + rng.normal(0.0, xi, size=A[..., ids].shape), 0.0)
    return A


def noise_neurons(stats: NeuronStats, n_select: int, selection: str = "top", seed=0) -> np.ndarray:
    if selection == "top":
        return select_neurons(stats, n_select)
    if selection == "random":
        if not 0 <= n_select <= stats.n:
            raise ConfigError(f"n_select={n_select} outside [0, {stats.n}]")
        return np.sort(np.random.default_rng(seed).choice(stats.n, size=n_select, replace=False))
    raise ConfigError(f"unknown noise selection {selection!r}")


# ------------------------------------------------------ activation transforms
# Batch transforms take (A: (B, N) post-mask activations, users: (B,) ids) and
# return modified activations; evaluation decodes and scores the result.


def steering_transform(plan: SteeringPlan):
    return lambda A, users: steer(A, plan)


def noise_transform(stats: NeuronStats, n_select: int, xi: float, seed: int, selection: str = "top"):
    ids = noise_neurons(stats, n_select, selection, seed)

    def apply(A, users):
        A = np.array(A, dtype=np.float64)
        if xi == 0 or len(ids) == 0:
            return A
        for row, u in enumerate(np.asarray(users).tolist()):
            rng = np.random.default_rng([seed, u])
            A[row, ids] = np.maximum(A[row, ids] + rng.normal(0.0, xi, size=len(ids)), 0.0)
        return A

    return apply


def deactivation_transform(neurons: np.ndarray):
    def apply(A, users):
        A = np.array(A, dtype=np.float64)
        A[:, neurons] = 0.0
        return A

    return apply


def qualifying_neurons(stats: NeuronStats, threshold: float, side: str) -> np.ndarray:
    d = stats.cohens_d
    if side == "popular":
        ids = np.nonzero(d > threshold)[0]
    elif side == "unpopular":
        ids = np.nonzero(d < -threshold)[0]
    else:
        raise ConfigError(f"side must be 'popular' or 'unpopular', got {side!r}")
    return ids[np.lexsort((ids, -np.abs(d[ids])))]


def deactivation_study(
    sae: sae_mod.SaeModel,
    backbone: BackboneModel,
    stats: NeuronStats,
    split: SplitBundle,
    threshold: float,
    kprime_grid: Sequence[int],
    side: str,
    *,
    k: int = 10,
    threads: int = 1,
) -> list[tuple[int, float]]:
    """Gini@k after zeroing the K' strongest qualifying neurons, for each K'."""
    from popsteer.evaluation import evaluate_pipeline  # evaluation imports this module

    ranked = qualifying_neurons(stats, threshold, side)
    if len(ranked) == 0:
        raise DataError(f"no {side} neurons with |d| > {threshold}")
    too_big = [kp for kp in kprime_grid if kp > len(ranked) or kp < 0]
    if too_big:
        raise ConfigError(f"K' values {too_big} exceed the {len(ranked)} qualifying {side} neurons")
    out = []
    for kp in kprime_grid:
        report = evaluate_pipeline(backbone, split, None, sae=sae,
                                   transform=deactivation_transform(ranked[:kp]), k=k, threads=threads)
        out.append((int(kp), report.gini))
    return out


# ---------------------------------------------------------------------- files

STATS_COLUMNS = ["neuron_id", "mu_pop", "sigma_pop", "mu_unpop", "sigma_unpop", "cohens_d", "sigma_pooled"]


def write_neuron_stats(stats: NeuronStats, path: str | Path, stage: str = "-") -> Path:
    rows = zip(range(stats.n), *(getattr(stats, c).tolist() for c in STATS_COLUMNS[1:]))
    return write_table(path, "neuron_stats", STATS_COLUMNS, rows, stage=stage,
                       extra_comments=[f"n_pop={stats.n_pop} n_unpop={stats.n_unpop}"])


def read_neuron_stats(path: str | Path, stage: str | None = None) -> NeuronStats:
    cols, rows = read_table(path, "neuron_stats", stage=stage)
    if cols != STATS_COLUMNS:
        raise DataError(f"{path}: unexpected columns {cols}")
    arr = np.array([[float(x) for x in r] for r in rows])
    counts = {}
    for line in Path(path).read_text().splitlines()[1:2]:
        for tok in line.lstrip("# ").split():
            key, _, val = tok.partition("=")
            counts[key] = int(val)
    return NeuronStats(*(arr[:, j] for j in range(1, 7)), counts.get("n_pop", 0), counts.get("n_unpop", 0))


def write_plan(plan: SteeringPlan, path: str | Path, stage: str = "-") -> Path:
    rows = zip(plan.neurons.tolist(), plan.weights.tolist(), plan.directions, plan.sigmas.tolist())
    return write_table(path, "steering_plan", ["neuron_id", "w", "direction", "sigma"], rows,
                       stage=stage, extra_comments=[f"n={plan.n}"])


def read_plan(path: str | Path, stage: str | None = None) -> SteeringPlan:
    _, rows = read_table(path, "steering_plan", stage=stage)
    n = int(Path(path).read_text().splitlines()[1].split("=")[1])
    return SteeringPlan(
        n,
        np.array([int(r[0]) for r in rows], dtype=np.int64),
        np.array([float(r[1]) for r in rows]),
        tuple(r[2] for r in rows),
        np.array([float(r[3]) for r in rows]),
    )
