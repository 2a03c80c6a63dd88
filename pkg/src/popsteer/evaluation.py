"""Ranking and exposure-fairness metrics, the evaluation pipeline and the sweep harness."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from popsteer import sae as sae_mod
from popsteer.artifacts import write_table
from popsteer.backbone import BackboneModel, batch_topk, embed_histories, score_all, seen_matrix
from popsteer.bias import (
    NeuronStats,
    SteeringPlan,
    build_steering_plan,
    chunked_map,
    noise_transform,
    steering_transform,
)
from popsteer.data import PopularityPartition, SplitBundle
from popsteer.errors import ConfigError, DataError, PopSteerError
from popsteer.rerank import FairReranker, IprReranker, RandomReranker

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["method", "params", "ndcg", "lt_coverage", "gini"]


def ndcg_at_k(reclist: Sequence[int], target: int, k: int) -> float:
    """Single-relevant-item nDCG: 1 / log2(rank + 1) if the target is in the top k."""
    top = list(reclist)[:k]
    if target in top:
        return 1.0 / np.log2(top.index(target) + 2.0)
    return 0.0


def lt_coverage(reclists: np.ndarray, partition: PopularityPartition, k: int, mode: str = "slots") -> float:
    """Share of recommended slots filled by tail items (``mode='slots'``), or the
    share of tail items recommended at least once (``mode='distinct'``)."""
    R = np.asarray(reclists)[:, :k]
    tail = partition.tail_mask()
    if mode == "slots":
        return float(tail[R].sum() / R.size)
    if mode == "distinct":
        return float(np.unique(R[tail[R]]).size / max(len(partition.tail), 1))
    raise ConfigError(f"unknown long-tail coverage mode {mode!r}")


def exposure_counts(reclists: np.ndarray, n_items: int, k: int) -> np.ndarray:
    return np.bincount(np.asarray(reclists)[:, :k].ravel(), minlength=n_items)


def gini_from_exposure(x: np.ndarray) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    m = len(x)
    if m < 2:
        raise ConfigError("Gini needs at least 2 items")
    total = x.sum()
    if total <= 0:
        raise DataError("Gini undefined: zero total exposure")
    ranks = np.arange(1, m + 1)
    return float(np.sum((2 * ranks - m - 1) * x) / (m * total))


def gini_index(reclists: np.ndarray, n_items: int, k: int) -> float:
    """Gini of per-item exposure over the whole catalog (never-recommended items count as 0)."""
    return gini_from_exposure(exposure_counts(reclists, n_items, k))


@dataclass(frozen=True)
class EvalReport:
    ndcg: float
    lt_coverage: float
    gini: float
    hit_ranks: np.ndarray = field(repr=False)
    exposure: np.ndarray = field(repr=False)
    reclists: np.ndarray = field(repr=False)

    def row(self, method: str, params: str) -> list:
        return [method, params, f"{self.ndcg:.6f}", f"{self.lt_coverage:.6f}", f"{self.gini:.6f}"]


def evaluate_pipeline(
    backbone: BackboneModel,
    split: SplitBundle,
    partition: PopularityPartition | None,
    *,
    sae: sae_mod.SaeModel | None = None,
    plan: SteeringPlan | None = None,
    transform: Callable | None = None,
    reranker=None,
    k: int = 10,
    threads: int = 1,
    lt_mode: str = "slots",
) -> EvalReport:
    """Recommend top-k for every test user and score against the held-out item.

    Paths: raw backbone; SAE reconstruction (``sae``); steered or otherwise
    transformed activations (``sae`` plus ``plan`` or ``transform``); or a
    re-ranker applied to raw backbone scores (``reranker``). User embeddings
    come from the training history, which is also excluded from the lists.
    """
    if reranker is not None and (sae is not None or plan is not None or transform is not None):
        raise ConfigError("a re-ranker runs on raw backbone scores; it cannot be combined with SAE steering")
    if plan is not None and transform is not None:
        raise ConfigError("give either a steering plan or an activation transform, not both")
    if (plan is not None or transform is not None) and sae is None:
        raise ConfigError("steering requires an SAE")
    if plan is not None:
        transform = steering_transform(plan)

    def work(lo, hi):
        users = np.arange(lo, hi)
        X = embed_histories(backbone, split.train[lo:hi])
        if sae is not None:
            A = sae_mod.encode_dense(sae, X)
            if transform is not None:
                A = transform(A, users)
            X = sae_mod.decode_dense(sae, A)
        S = score_all(backbone, X)
        excluded = seen_matrix(split.train[lo:hi], backbone.n_items)
        if reranker is not None:
            return reranker.rerank(S, excluded, users, k)
        return batch_topk(S, k, excluded)

    R = np.vstack(chunked_map(work, split.n_users, threads))
    hits = R == np.asarray(split.test)[:, None]
    ranks = np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, 0)
    gains = np.zeros(len(ranks))
    gains[ranks > 0] = 1.0 / np.log2(ranks[ranks > 0] + 1.0)
    ndcg = float(gains.mean())
    exposure = exposure_counts(R, backbone.n_items, k)
    lt = lt_coverage(R, partition, k, lt_mode) if partition is not None else float("nan")
    return EvalReport(ndcg, lt, gini_from_exposure(exposure), ranks, exposure, R)


def write_exposure(report: EvalReport, partition: PopularityPartition, path, stage: str = "-") -> Path:
    labels = partition.labels()
    rows = ((i, int(x), labels[i]) for i, x in enumerate(report.exposure.tolist()))
    return write_table(path, "exposure", ["item_id", "exposure", "label"], rows, stage=stage)


# ---------------------------------------------------------------------- sweep


@dataclass
class SweepContext:
    backbone: BackboneModel
    split: SplitBundle
    partition: PopularityPartition
    sae: sae_mod.SaeModel | None = None
    stats: NeuronStats | None = None
    k: int = 10
    threads: int = 1
    n_candidates: int = 500
    seed: int = 0
    noise_selection: str = "top"


METHODS = ("backbone", "sae", "popsteer", "noise", "ipr", "fair", "random")


def format_params(params: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in params.items()) or "-"


def expand_grid(grids: dict[str, dict[str, Sequence]]) -> list[tuple[str, dict]]:
    """Cartesian product per method, in the given method/parameter order."""
    if not grids:
        raise ConfigError("empty method list")
    specs = []
    for method, grid in grids.items():
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; known: {', '.join(METHODS)}")
        names = list(grid)
        for values in itertools.product(*(grid[n] for n in names)):
            specs.append((method, dict(zip(names, values))))
    if not specs:
        raise ConfigError("empty sweep grid")
    return specs


def run_method(ctx: SweepContext, method: str, params: dict) -> EvalReport:
    common = dict(k=ctx.k, threads=ctx.threads)
    if method == "backbone":
        return evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, **common)
    if method == "sae":
        return evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, sae=ctx.sae, **common)
    if method == "popsteer":
        plan = build_steering_plan(ctx.stats, float(params["alpha"]), int(params["n_select"]))
        return evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, sae=ctx.sae, plan=plan, **common)
    if method == "noise":
        tf = noise_transform(ctx.stats, int(params["n_select"]), float(params["xi"]), ctx.seed, ctx.noise_selection)
        return evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, sae=ctx.sae, transform=tf, **common)
    if method == "ipr":
        rr = IprReranker(ctx.partition.counts, float(params["alpha"]))
    elif method == "fair":
        rr = FairReranker(ctx.partition.tail_mask(), float(params["p"]), float(params["alpha"]), ctx.n_candidates)
    elif method == "random":
        rr = RandomReranker(int(params["pool"]), ctx.seed)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return evaluate_pipeline(ctx.backbone, ctx.split, ctx.partition, reranker=rr, **common)


def sweep(ctx: SweepContext, specs: Sequence[tuple[str, dict]]) -> list[list]:
    """One CSV row per (method, params); a failing row is logged and skipped."""
    if not specs:
        raise ConfigError("empty sweep grid")
    rows = []
    for method, params in specs:
        try:
            report = run_method(ctx, method, params)
        except PopSteerError as exc:
            log.warning("sweep row %s %s skipped: %s", method, format_params(params), exc)
            continue
        rows.append(report.row(method, format_params(params)))
        log.info("%s %s ndcg=%.4f lt=%.4f gini=%.4f", method, format_params(params),
                 report.ndcg, report.lt_coverage, report.gini)
    return rows


# ------------------------------------------------------------------- ablation


def relative_drop(ndcg: float, reference: float) -> float:
    if reference <= 0:
        raise DataError("reference nDCG is 0: relative drop undefined")
    return 1.0 - ndcg / reference


def tune_alpha(ctx: SweepContext, alpha_grid: Sequence[float], n_select: int, reference: float,
               max_drop: float, *, fallback_steps: int = 8) -> tuple[float, EvalReport]:
    """Largest alpha in the grid whose nDCG drop (relative to ``reference``) stays within ``max_drop``.

    If even the smallest grid value drops too much, bisect on (0, min(grid)]
    for ``fallback_steps`` rounds (alpha = 0 always qualifies against an SAE
    reference).
    """
    best = None
    for alpha in sorted(alpha_grid):
        report = run_method(ctx, "popsteer", {"alpha": alpha, "n_select": n_select})
        drop = relative_drop(report.ndcg, reference)
        log.info("alpha %.3g: nDCG drop %.4f", alpha, drop)
        if drop <= max_drop:
            best = (alpha, report)
    if best is not None:
        return best
    if fallback_steps < 1:
        raise ConfigError(f"no alpha in {list(alpha_grid)} keeps the nDCG drop within {max_drop}")
    log.warning("no alpha in %s keeps the nDCG drop within %s; bisecting below %s",
                list(alpha_grid), max_drop, min(alpha_grid))
    lo, hi, best = 0.0, float(min(alpha_grid)), None
    for _ in range(fallback_steps):
        mid = 0.5 * (lo + hi)
        report = run_method(ctx, "popsteer", {"alpha": mid, "n_select": n_select})
        if relative_drop(report.ndcg, reference) <= max_drop:
            lo, best = mid, (mid, report)
        else:
            hi = mid
    if best is None:
        return 0.0, run_method(ctx, "popsteer", {"alpha": 0.0, "n_select": n_select})
    return best


def match_noise_xi(ctx: SweepContext, n_select: int, target_ndcg: float, *, steps: int = 12,
                   xi_max: float = 2.0) -> tuple[float, EvalReport]:
    """Bisection for the largest noise level whose nDCG is still >= ``target_ndcg``."""
    lo, hi = 0.0, xi_max
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if run_method(ctx, "noise", {"n_select": n_select, "xi": mid}).ndcg >= target_ndcg:
            lo = mid
        else:
            hi = mid
    return lo, run_method(ctx, "noise", {"n_select": n_select, "xi": lo})


ABLATION_COLUMNS = ["n_select", "ndcg_ps", "ndcg_noise", "lt_coverage_ps", "lt_coverage_noise",
                    "gini_ps", "gini_noise"]


def ablation_rows(ctx: SweepContext, alpha: float, xi: float, n_grid: Sequence[int]) -> list[list]:
    """Steering vs noise at fixed alpha and xi for every neuron count (0 = plain reconstruction)."""
    rows = []
    for n in [0, *n_grid]:
        if n == 0:
            ps = noise = run_method(ctx, "sae", {})
        else:
            ps = run_method(ctx, "popsteer", {"alpha": alpha, "n_select": n})
            noise = run_method(ctx, "noise", {"n_select": n, "xi": xi})
        rows.append([n] + [f"{v:.6f}" for v in (ps.ndcg, noise.ndcg, ps.lt_coverage, noise.lt_coverage,
                                                ps.gini, noise.gini)])
    return rows
