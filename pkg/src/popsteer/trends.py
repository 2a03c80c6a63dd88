"""Directional checks on pipeline outputs (trend, correlation and frontier tests)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from popsteer.artifacts import read_table

BASELINES = ("ipr", "fair", "random")


def inversions(values: Sequence[float]) -> list[float]:
    """Sizes of the non-decreasing steps in a series that should strictly decrease."""
    v = np.asarray(values, dtype=np.float64)
    steps = np.diff(v)
    return [float(s) for s in steps if s >= 0]


def decreasing_with_tolerance(values: Sequence[float], max_inversions: int = 1, tol: float = 0.002) -> bool:
    inv = inversions(values)
    return len(inv) <= max_inversions and all(s <= tol for s in inv)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties; nan for a constant series."""
    if len(x) < 2 or np.ptp(np.asarray(y, dtype=np.float64)) == 0:
        return float("nan")
    return float(sps.spearmanr(x, y).statistic)


def read_csv(path: str | Path, kind: str) -> tuple[list[str], list[list[str]]]:
    return read_table(path, kind, sep=",")


@dataclass(frozen=True)
class FrontierResult:
    passed: bool
    method_params: str
    ndcg: float
    gini: float
    n_compared: int
    best_baseline_gini: float


def frontier_check(rows: Sequence[Sequence[str]], window: float = 0.05) -> FrontierResult:
    """Is some steering row's Gini below every baseline row whose nDCG is within ``window`` (relative)?

    Returns the steering row with the largest margin to its comparable
    baselines (rows with no comparable baseline are skipped).
    """
    ps = [(r[1], float(r[2]), float(r[4])) for r in rows if r[0] == "popsteer"]
    base = [(float(r[2]), float(r[4])) for r in rows if r[0] in BASELINES]
    best = None
    for params, ndcg, gini in ps:
        comparable = [g for n, g in base if abs(n - ndcg) <= window * ndcg]
        if not comparable:
            continue
        margin = min(comparable) - gini
        if best is None or margin > best[0]:
            best = (margin, FrontierResult(margin > 0, params, ndcg, gini, len(comparable), min(comparable)))
    if best is None:
        return FrontierResult(False, "-", float("nan"), float("nan"), 0, float("nan"))
    return best[1]
