"""Post-hoc fairness re-rankers used as baselines: IPR, FA*IR and Random."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from popsteer.backbone import batch_topk
from popsteer.errors import ConfigError, DataError

DEFAULT_CANDIDATES = 500


def ipr_rerank(scores: np.ndarray, counts: np.ndarray, alpha: float) -> np.ndarray:
    """Inverse-popularity rescoring  s / (1 + alpha * count / max(count))."""
    if alpha < 0:
        raise ConfigError("IPR alpha must be >= 0")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.max() <= 0:
        raise DataError("IPR needs at least one item with positive count")
    rho = counts / counts.max()
    return np.asarray(scores, dtype=np.float64) / (1.0 + alpha * rho)


def fair_table(k: int, p: float, alpha_sig: float) -> np.ndarray:
    """Minimum protected counts m(1..k): smallest m with BinomCDF(m; i, p) > alpha_sig."""
    if not 0 < p < 1 or not 0 < alpha_sig < 1:
        raise ConfigError(f"FA*IR needs 0 < p < 1 and 0 < alpha < 1, got p={p}, alpha={alpha_sig}")
    out = np.zeros(k, dtype=np.int64)
    for i in range(1, k + 1):
        cdf = sps.binom.cdf(np.arange(i + 1), i, p)
        out[i - 1] = int(np.argmax(cdf > alpha_sig))
    return out


@dataclass(frozen=True)
class ScoredCandidates:
    """One user's candidate list in descending score order, with tail flags."""

    items: np.ndarray
    scores: np.ndarray
    tail: np.ndarray


def fair_rerank(candidates: ScoredCandidates, p: float, alpha_sig: float, k: int,
                table: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Greedy FA*IR top-k with tail items as the protected group.

    Returns the list and whether a prefix constraint had to be relaxed because
    the pool ran out of tail items.
    """
    if k > len(candidates.items):
        raise DataError(f"FA*IR needs at least k={k} candidates, got {len(candidates.items)}")
    if table is None:
        table = fair_table(k, p, alpha_sig)
    tail_flags = np.asarray(candidates.tail, dtype=bool)
    tail_pos = np.nonzero(tail_flags)[0].tolist()
    head_pos = np.nonzero(~tail_flags)[0].tolist()
    ti = hi = 0
    out, n_tail, relaxed = [], 0, False
    for i in range(k):
        take_tail = ti < len(tail_pos) and (
            n_tail < table[i] or hi >= len(head_pos) or tail_pos[ti] < head_pos[hi]
        )
        if n_tail < table[i] and ti >= len(tail_pos):
            relaxed = True
        if take_tail:
            out.append(tail_pos[ti])
            ti += 1
            n_tail += 1
        else:
            out.append(head_pos[hi])
            hi += 1
    return candidates.items[np.array(out, dtype=np.int64)], relaxed


def random_rerank(candidates: ScoredCandidates, pool_size: int, k: int, seed) -> np.ndarray:
    """k items sampled uniformly from the top ``pool_size``, kept in score order."""
    if pool_size < k:
        raise ConfigError(f"random pool size {pool_size} < k={k}")
    if len(candidates.items) < pool_size:
        raise DataError(f"only {len(candidates.items)} candidates for a pool of {pool_size}")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(pool_size, size=k, replace=False))
    return candidates.items[picked]


# ------------------------------------------------- batch adapters for evaluation


@dataclass(frozen=True)
class IprReranker:
    counts: np.ndarray
    alpha: float

    def rerank(self, scores: np.ndarray, excluded: np.ndarray, users: np.ndarray, k: int) -> np.ndarray:
        return batch_topk(ipr_rerank(scores, self.counts, self.alpha), k, excluded)


@dataclass(frozen=True)
class FairReranker:
    tail_mask: np.ndarray
    p: float
    alpha_sig: float
    n_candidates: int = DEFAULT_CANDIDATES

    def rerank(self, scores, excluded, users, k):
        L = min(self.n_candidates, int((~excluded).sum(axis=1).min()))
        cands = batch_topk(scores, L, excluded)
        table = fair_table(k, self.p, self.alpha_sig)
        out = np.empty((len(users), k), dtype=np.int64)
        for row in range(len(users)):
            items = cands[row]
            out[row], _ = fair_rerank(
                ScoredCandidates(items, scores[row, items], self.tail_mask[items]),
                self.p, self.alpha_sig, k, table,
            )
        return out


@dataclass(frozen=True)
class RandomReranker:
    pool_size: int
    seed: int

    def rerank(self, scores, excluded, users, k):
        cands = batch_topk(scores, self.pool_size, excluded)
        out = np.empty((len(users), k), dtype=np.int64)
        for row, u in enumerate(np.asarray(users).tolist()):
            items = cands[row]
            out[row] = random_rerank(ScoredCandidates(items, scores[row, items], np.zeros(len(items), bool)),
                                     self.pool_size, k, [self.seed, u])
        return out
