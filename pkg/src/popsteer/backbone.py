"""Sequential dot-product recommender used as the model under interpretation.

A user's embedding is the exponentially decayed sum of the embeddings of the
most recent ``max_history`` items (most recent weighted 1). Items are scored
by dot product with that embedding. Training minimises the BPR pairwise loss
over (prefix, next item, sampled negative) triples with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from popsteer.artifacts import read_container, write_container
from popsteer.data import SplitBundle
from popsteer.errors import ArtifactError, ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

MAGIC = b"PSBB"


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    decay: float = 0.8
    max_history: int = 50
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 256
    negatives: int = 1
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1 or self.max_history < 1 or self.batch_size < 1 or self.negatives < 1:
            raise ConfigError(f"invalid backbone config: {self}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.learning_rate <= 0 or self.epochs < 0 or self.patience < 1:
            raise ConfigError(f"invalid backbone config: {self}")


@dataclass(frozen=True)
class BackboneModel:
    item_embeddings: np.ndarray
    decay: float
    max_history: int
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    def decay_weights(self) -> np.ndarray:
        return self.decay ** np.arange(self.max_history, dtype=np.float64)


def history_matrix(flat: np.ndarray, ends: np.ndarray, lengths: np.ndarray, max_history: int, pad: int) -> np.ndarray:
    """Index matrix (B, max_history) of the most recent items first.

    Row b holds ``flat[ends[b] - 1], flat[ends[b] - 2], ...`` for at most
    ``lengths[b]`` items; the remaining slots hold ``pad``.
    """
    lag = np.arange(max_history)
    idx = ends[:, None] - 1 - lag[None, :]
    ok = lag[None, :] < np.minimum(lengths, max_history)[:, None]
    return np.where(ok, flat[np.where(ok, idx, 0)], pad)


def _embed(table_padded: np.ndarray, H: np.ndarray, weights: np.ndarray) -> np.ndarray:
    x = np.zeros((H.shape[0], table_padded.shape[1]))
    for lag in range(H.shape[1]):
        x += weights[lag] * table_padded[H[:, lag]]
    return x


def _padded(table: np.ndarray) -> np.ndarray:
    return np.vstack([table, np.zeros((1, table.shape[1]))])


def embed_histories(model: BackboneModel, histories: Sequence[np.ndarray]) -> np.ndarray:
    """User embeddings (B, d) for a batch of item-id histories."""
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    if len(histories) == 0:
        return np.zeros((0, model.dim))
    if (lengths == 0).any():
        raise DataError("empty history")
    flat = np.concatenate([np.asarray(h, dtype=np.int64) for h in histories])
    if flat.min() < 0 or flat.max() >= model.n_items:
        raise DataError("history contains an unknown item id")
    H = history_matrix(flat, np.cumsum(lengths), lengths, model.max_history, model.n_items)
    return _embed(_padded(model.item_embeddings), H, model.decay_weights())


def user_embedding(model: BackboneModel, history: Sequence[int]) -> np.ndarray:
    return embed_histories(model, [np.asarray(history, dtype=np.int64)])[0]


def prefix_embeddings(model: BackboneModel, split: SplitBundle, min_length: int = 2) -> np.ndarray:
    """One embedding per training-sequence prefix of length >= ``min_length``."""
    seqs = split.train
    flat = np.concatenate(seqs)
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in seqs])])
    ends, lengths = [], []
    for u, s in enumerate(seqs):
        t = np.arange(min_length, len(s) + 1)
        ends.append(offsets[u] + t)
        lengths.append(t)
    ends, lengths = np.concatenate(ends), np.concatenate(lengths)
    table = _padded(model.item_embeddings)
    w = model.decay_weights()
    out = np.empty((len(ends), model.dim))
    for lo in range(0, len(ends), 4096):
        H = history_matrix(flat, ends[lo : lo + 4096], lengths[lo : lo + 4096], model.max_history, model.n_items)
        out[lo : lo + 4096] = _embed(table, H, w)
    return out


def score_all(model: BackboneModel, x: np.ndarray) -> np.ndarray:
    """Dot-product scores against every item; ``x`` is (d,) or (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DataError(f"embedding dimension {x.shape[-1]} does not match model dim {model.dim}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite user embedding")
    return x @ model.item_embeddings.T


def topk(scores: np.ndarray, k: int, exclude=()) -> np.ndarray:
    """The k best items by (score desc, id asc), skipping ``exclude``."""
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ConfigError("k must be >= 1")
    excluded = np.zeros(len(scores), dtype=bool)
    excluded[np.asarray(list(exclude), dtype=np.int64)] = True
    if len(scores) - excluded.sum() < k:
        raise DataError(f"only {len(scores) - excluded.sum()} candidates for top-{k}")
    candidates = np.nonzero(~excluded)[0]
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def batch_topk(scores: np.ndarray, k: int, excluded: np.ndarray) -> np.ndarray:
    """Row-wise :func:`topk` for a (B, m) score matrix and (B, m) exclusion mask."""
    if (scores.shape[1] - excluded.sum(axis=1) < k).any():
        raise DataError(f"insufficient candidates for top-{k}")
    masked = np.where(excluded, np.inf, -scores)
    return np.argsort(masked, axis=1, kind="stable")[:, :k]


# ------------------------------------------------------------------- training


def bpr_loss_and_grad(
    table: np.ndarray, H: np.ndarray, weights: np.ndarray, pos: np.ndarray, neg: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean BPR loss  -log sigmoid(x.e_pos - x.e_neg)  and its gradient w.r.t. ``table``.

    ``H`` indexes histories into ``table`` with ``len(table)`` as padding.
    """
    m, B = table.shape[0], len(pos)
    padded = _padded(table)
    x = _embed(padded, H, weights)
    diff = table[pos] - table[neg]
    margin = np.einsum("bd,bd->b", x, diff)
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    g = -0.5 * (1.0 - np.tanh(margin / 2.0)) / B  # d loss / d margin, stable sigmoid(-margin)
    # scatter-add as one sparse product: rows are items, columns index [g*diff; g*x]
    b = np.arange(B)
    L = H.shape[1]
    rows = np.concatenate([H.ravel(), pos, neg])
    cols = np.concatenate([np.repeat(b, L), B + b, B + b])
    vals = np.concatenate([np.tile(weights[:L], B), np.ones(B), -np.ones(B)])
    scatter = sparse.csr_matrix((vals, (rows, cols)), shape=(m + 1, 2 * B))
    grad = scatter @ np.vstack([g[:, None] * diff, g[:, None] * x])
    return loss, grad[:m]


class _Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def seen_matrix(histories: Sequence[np.ndarray], n_items: int) -> np.ndarray:
    seen = np.zeros((len(histories), n_items), dtype=bool)
    for u, h in enumerate(histories):
        seen[u, h] = True
    return seen


def sample_negatives(rng: np.random.Generator, users: np.ndarray, seen: np.ndarray) -> np.ndarray:
    """Uniform items outside each user's history (rejection sampling)."""
    if seen[np.unique(users)].all(axis=1).any():
        raise DataError("a user has interacted with every item; no negatives available")
    neg = rng.integers(seen.shape[1], size=len(users))
    bad = seen[users, neg]
    while bad.any():
        neg[bad] = rng.integers(seen.shape[1], size=int(bad.sum()))
        bad = seen[users, neg]
    return neg


def validation_ndcg(model: BackboneModel, split: SplitBundle, k: int = 10, seen: np.ndarray | None = None) -> float:
    """Mean single-target nDCG@k of the valid item given the training history."""
    if seen is None:
        seen = seen_matrix(split.train, model.n_items)
    total = 0.0
    for lo in range(0, split.n_users, 1024):
        X = embed_histories(model, split.train[lo : lo + 1024])
        S = score_all(model, X)
        target = split.valid[lo : lo + 1024]
        ts = S[np.arange(len(target)), target][:, None]
        ids = np.arange(model.n_items)[None, :]
        better = ((S > ts) | ((S == ts) & (ids < target[:, None]))) & ~seen[lo : lo + 1024]
        rank = better.sum(axis=1) + 1
        hit = (rank <= k) & ~seen[np.arange(lo, lo + len(target)), target]
        total += float(np.sum(np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0)))
    return total / split.n_users


def train_backbone(split: SplitBundle, config: BackboneConfig) -> BackboneModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, d = split.n_items, config.dim
    table = rng.uniform(-0.5 / d, 0.5 / d, size=(m, d))
    model = BackboneModel(table.copy(), config.decay, config.max_history)
    if config.epochs == 0:
        return model

    seqs = split.train
    flat = np.concatenate(seqs)
    offsets = np.concatenate([[0], np.cumsum([len(s) for s in seqs])])
    t_user, t_len = [], []
    for u, s in enumerate(seqs):
        t = np.arange(1, len(s))
        t_user.append(np.full(len(t), u))
        t_len.append(t)
    t_user = np.repeat(np.concatenate(t_user), config.negatives)
    t_len = np.repeat(np.concatenate(t_len), config.negatives)
    if len(t_user) == 0:
        raise DataError("no training triples: every training sequence has length 1")
    t_end = offsets[t_user] + t_len
    t_pos = flat[t_end]
    seen = seen_matrix(seqs, m)
    weights = config.decay ** np.arange(config.max_history, dtype=np.float64)
    opt = _Adam(table.shape, config.learning_rate)

    best_score, best_table, stale = -1.0, table.copy(), 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(t_user))
        neg_all = sample_negatives(rng, t_user[order], seen)
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo : lo + config.batch_size]
            H = history_matrix(flat, t_end[sel], t_len[sel], config.max_history, m)
            loss, grad = bpr_loss_and_grad(table, H, weights, t_pos[sel], neg_all[lo : lo + config.batch_size])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericalError(
                    f"non-finite BPR loss at epoch {epoch} (learning_rate={config.learning_rate})"
                )
            opt.step(table, grad)
            epoch_loss += loss * len(sel)
        current = BackboneModel(table, config.decay, config.max_history)
        score = validation_ndcg(current, split, seen=seen)
        history.append(score)
        log.info("backbone epoch %d loss %.5f valid nDCG@10 %.5f", epoch, epoch_loss / len(order), score)
        if score > best_score:
            best_score, best_table, stale = score, table.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best valid nDCG@10 %.5f)", epoch, best_score)
                break
    best_table.flags.writeable = False
    return BackboneModel(best_table, config.decay, config.max_history, tuple(history))


# ---------------------------------------------------------------- persistence


def save_backbone(model: BackboneModel, path: str | Path, *, id_map: str = "item_map.tsv", stage: str = "-") -> Path:
    header = {
        "kind": "backbone",
        "n_items": model.n_items,
        "dim": model.dim,
        "decay": model.decay,
        "max_history": model.max_history,
        "id_map": id_map,
        "stage": stage,
    }
    return write_container(path, MAGIC, header, {"item_embeddings": model.item_embeddings})


def load_backbone(path: str | Path, *, stage: str | None = None) -> BackboneModel:
    header, arrays = read_container(path, MAGIC)
    if stage is not None and header.get("stage") != stage:
        raise ArtifactError(f"stale artifact {path}: built from stage={header.get('stage')}, expected {stage}")
    table = arrays["item_embeddings"]
    table.flags.writeable = False
    return BackboneModel(table, float(header["decay"]), int(header["max_history"]))
