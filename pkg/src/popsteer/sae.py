"""Top-K sparse autoencoder over backbone user embeddings.

    z = W_enc^T (x - b_pre),  a = TopK(ReLU(z)),  x_hat = W_dec a + b_pre

Training minimises the batch-mean squared reconstruction error plus
``gamma`` times an auxiliary loss in which the ``k_aux`` strongest *dead*
neurons reconstruct the residual ``x - x_hat``. A neuron is dead once it has
been absent from every top-K mask for ``dead_window`` training examples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from popsteer.artifacts import read_container, write_container
from popsteer.errors import ArtifactError, ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

MAGIC = b"PSAE"
CHUNK = 2048


@dataclass(frozen=True)
class SaeConfig:
    scale: int = 64
    k: int = 32
    gamma: float = 1.0 / 32.0
    k_aux: int | None = None
    dead_window: int | None = None
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0

    def resolved_k_aux(self) -> int:
        return self.k_aux if self.k_aux is not None else 2 * self.k

    def resolved_dead_window(self) -> int:
        return self.dead_window if self.dead_window is not None else 10 * self.batch_size


@dataclass(frozen=True)
class SaeModel:
    W_enc: np.ndarray  # (d, N)
    W_dec: np.ndarray  # (d, N)
    b_pre: np.ndarray  # (d,)
    k: int
    gamma: float = 1.0 / 32.0
    k_aux: int = 64
    dead_window: int = 2560
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def d(self) -> int:
        return self.W_dec.shape[0]

    @property
    def n(self) -> int:
        return self.W_dec.shape[1]


@dataclass(frozen=True)
class SparseActivation:
    indices: np.ndarray
    values: np.ndarray
    n: int

    def to_dense(self) -> np.ndarray:
        a = np.zeros(self.n)
        a[self.indices] = self.values
        return a

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SparseActivation":
        idx = np.nonzero(a)[0]
        return cls(idx, a[idx].copy(), len(a))


def _check(sae: SaeModel) -> None:
    if not 1 <= sae.k < sae.d <= sae.n:
        raise ConfigError(f"need 1 <= K < d <= N, got K={sae.k}, d={sae.d}, N={sae.n}")


def init_sae(d: int, scale: int, k: int, seed: int, *, gamma: float = 1.0 / 32.0,
             k_aux: int | None = None, dead_window: int = 2560) -> SaeModel:
    """Unit-norm random decoder columns, encoder tied to the decoder, zero pre-bias."""
    if k >= d:
        raise ConfigError(f"sparsity K={k} must be smaller than the input dimension d={d}")
    if k < 1 or scale < 1:
        raise ConfigError("K and scale must be >= 1")
    rng = np.random.default_rng(seed)
    W_dec = rng.uniform(-1.0, 1.0, size=(d, scale * d))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    sae = SaeModel(W_dec.copy(), W_dec, np.zeros(d), k, gamma,
                   k_aux if k_aux is not None else 2 * k, dead_window)
    _check(sae)
    return sae


def _kth_largest(a: np.ndarray, k: int) -> np.ndarray:
    """Row-wise k-th largest value of ``a`` (B, n), 1 <= k < n.

    The k-th largest of the 2k block maxima is a lower bound on the answer, so
    only entries above it need sorting.
    """
    B, n = a.shape
    nb = min(n, 2 * k)
    size = -(-n // nb)
    padded = a
    if nb * size != n:
        padded = np.full((B, nb * size), -np.inf)
        padded[:, :n] = a
    block_max = padded.reshape(B, nb, size).max(axis=2)
    bound = np.partition(block_max, nb - k, axis=1)[:, nb - k]
    r, c = np.nonzero(a >= bound[:, None])
    v = a[r, c]
    order = np.lexsort((-v, r))
    starts = np.searchsorted(r, np.arange(B))
    return v[order][starts + k - 1]


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mask of the k largest positive entries, ties to the lowest index."""
    n = a.shape[1]
    if k >= n:
        return a > 0
    kth = _kth_largest(a, k)[:, None]
    mask = a >= kth
    tied = np.nonzero((mask.sum(axis=1) > k) & (kth[:, 0] > 0))[0]
    if len(tied):
        sub, t = a[tied], kth[tied]
        gt, eq = sub > t, sub == t
        need = k - gt.sum(axis=1, keepdims=True)
        mask[tied] = gt | (eq & (np.cumsum(eq, axis=1) <= need))
    return mask & (a > 0)


def pre_activations(sae: SaeModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != sae.d:
        raise DataError(f"input dimension {X.shape[-1]} does not match SAE d={sae.d}")
    return (X - sae.b_pre) @ sae.W_enc


def encode_dense(sae: SaeModel, X: np.ndarray) -> np.ndarray:
    """Post-mask activations (B, N) for a batch of embeddings."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty((X.shape[0], sae.n))
    for lo in range(0, X.shape[0], CHUNK):
        a = np.maximum(pre_activations(sae, X[lo : lo + CHUNK]), 0.0)
        out[lo : lo + CHUNK] = np.where(topk_mask(a, sae.k), a, 0.0)
    return out


def decode_dense(sae: SaeModel, A: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    rows, cols = np.nonzero(A)
    return _sparse(rows, cols, A[rows, cols], A.shape) @ sae.W_dec.T + sae.b_pre


def encode(sae: SaeModel, x: np.ndarray) -> SparseActivation:
    return SparseActivation.from_dense(encode_dense(sae, x)[0])


def decode(sae: SaeModel, a: SparseActivation) -> np.ndarray:
    """x_hat = W_dec a + b_pre, touching only the active columns."""
    return sae.W_dec[:, a.indices] @ a.values + sae.b_pre


def reconstruct(sae: SaeModel, X: np.ndarray) -> np.ndarray:
    return decode_dense(sae, encode_dense(sae, X))


# ------------------------------------------------------------------- training


def _sparse(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape) -> sparse.csr_matrix:
    return sparse.csr_matrix((vals, (rows, cols)), shape=shape)


def loss_and_grads(
    W_enc: np.ndarray,
    W_dec: np.ndarray,
    b_pre: np.ndarray,
    X: np.ndarray,
    k: int,
    *,
    dead: np.ndarray | None = None,
    gamma: float = 0.0,
    k_aux: int = 0,
    mask: np.ndarray | None = None,
) -> tuple[dict, dict]:
    """Objective ``mse + gamma * aux`` on one batch and its analytic gradients.

    ``mse`` and ``aux`` are batch means of per-example squared L2 errors. When
    ``mask`` is given the top-K selection is held fixed (used for gradient
    checks); the masked entries are then linear in the pre-activations.
    Activations are handled as sparse matrices: only the encoder product is dense.
    The returned ``losses["mask"]`` is the top-K mask used in the forward pass.
    """
    B, n = X.shape[0], W_dec.shape[1]
    xc = X - b_pre
    Z = xc @ W_enc
    if mask is None:
        mask = topk_mask(np.maximum(Z, 0.0), k)
    rows, cols = np.nonzero(mask)
    A = _sparse(rows, cols, Z[rows, cols], (B, n))
    W_dec_t = W_dec.T
    E = X - (A @ W_dec_t + b_pre)
    mse = float(np.sum(E * E) / B)

    dXhat = -2.0 * E / B
    gW_dec_t = A.T @ dXhat
    g_rows, g_cols = [rows], [cols]
    g_vals = [np.einsum("ij,ij->i", dXhat[rows], W_dec_t[cols])]
    gb = dXhat.sum(axis=0)

    aux = 0.0
    if dead is not None and gamma > 0 and dead.any():
        dead_ids = np.nonzero(dead)[0]
        Zd = np.maximum(Z[:, dead_ids], 0.0)
        ar, ac = np.nonzero(topk_mask(Zd, min(k_aux, len(dead_ids))))
        ac_full = dead_ids[ac]
        A_aux = _sparse(ar, ac_full, Zd[ar, ac], (B, n))
        R = E - A_aux @ W_dec_t  # residual target is treated as a constant
        aux = float(np.sum(R * R) / B)
        dEhat = -2.0 * gamma * R / B
        gW_dec_t = gW_dec_t + A_aux.T @ dEhat
        g_rows.append(ar)
        g_cols.append(ac_full)
        g_vals.append(np.einsum("ij,ij->i", dEhat[ar], W_dec_t[ac_full]))

    gZ = _sparse(np.concatenate(g_rows), np.concatenate(g_cols), np.concatenate(g_vals), (B, n))
    gW_enc = np.asarray((gZ.T @ xc).T)
    gb -= W_enc @ np.asarray(gZ.sum(axis=0)).ravel()
    losses = {"loss": mse + gamma * aux, "mse": mse, "aux": aux, "mask": mask}
    return losses, {"W_enc": gW_enc, "W_dec": np.asarray(gW_dec_t).T.copy(), "b_pre": gb}


def renormalize_decoder(W_enc: np.ndarray, W_dec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm decoder columns; the scale moves into the encoder columns.

    Because ReLU commutes with positive scaling, each neuron's contribution
    ``a_j * W_dec[:, j]`` is unchanged for a given top-K selection.
    """
    norms = np.linalg.norm(W_dec, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    return W_enc * norms, W_dec / norms


class _Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1, c2 = 1 - self.beta1**self.t, 1 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_sae(sae: SaeModel, embeddings: np.ndarray, config: SaeConfig) -> SaeModel:
    """Mini-batch Adam on reconstruction + auxiliary dead-neuron loss."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("SAE training needs a non-empty (n, d) embedding matrix")
    if X.shape[1] != sae.d:
        raise DataError(f"embedding dimension {X.shape[1]} does not match SAE d={sae.d}")
    _check(sae)
    rng = np.random.default_rng(config.seed)
    params = {"W_enc": sae.W_enc.copy(), "W_dec": sae.W_dec.copy(), "b_pre": sae.b_pre.copy()}
    opt = _Adam(params, config.learning_rate)
    last_active = np.zeros(sae.n, dtype=np.int64)
    seen = 0
    scale = max(1.0, float(np.mean(np.sum(X * X, axis=1))))
    history = []
    batch_index = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(X.shape[0])
        for lo in range(0, len(order), config.batch_size):
            xb = X[order[lo : lo + config.batch_size]]
            dead = (seen - last_active) >= sae.dead_window
            losses, grads = loss_and_grads(
                params["W_enc"], params["W_dec"], params["b_pre"], xb, sae.k,
                dead=dead, gamma=sae.gamma, k_aux=sae.k_aux,
            )
            if not np.isfinite(losses["loss"]):
                raise NumericalError(f"non-finite SAE loss at batch {batch_index} (epoch {epoch})")
            if dead.all() and losses["mse"] > 1e-10 * scale:
                raise NumericalError(f"all {sae.n} SAE neurons are dead at batch {batch_index}")
            opt.step(params, grads)
            params["W_enc"], params["W_dec"] = renormalize_decoder(params["W_enc"], params["W_dec"])

            seen += len(xb)
            last_active[losses["mask"].any(axis=0)] = seen
            batch_index += 1
        current = replace(sae, W_enc=params["W_enc"], W_dec=params["W_dec"], b_pre=params["b_pre"])
        report = reconstruction_report(current, X)
        history.append(report.normalized_mse)
        log.info("sae epoch %d normalized MSE %.5f dead %.3f", epoch, report.normalized_mse, report.dead_fraction)
    for v in params.values():
        v.flags.writeable = False
    return replace(sae, W_enc=params["W_enc"], W_dec=params["W_dec"], b_pre=params["b_pre"], history=tuple(history))


@dataclass(frozen=True)
class ReconstructionReport:
    normalized_mse: float
    dead_fraction: float
    mean_active: float


def reconstruction_report(sae: SaeModel, embeddings: np.ndarray) -> ReconstructionReport:
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("empty embedding stream")
    err = 0.0
    fired = np.zeros(sae.n, dtype=bool)
    active = 0
    for lo in range(0, X.shape[0], CHUNK):
        A = encode_dense(sae, X[lo : lo + CHUNK])
        E = X[lo : lo + CHUNK] - decode_dense(sae, A)
        err += float(np.sum(E * E))
        nz = A > 0
        fired |= nz.any(axis=0)
        active += int(nz.sum())
    spread = float(np.sum((X - X.mean(axis=0)) ** 2))
    if spread > 0:
        nmse = err / spread
    else:
        nmse = 0.0 if err == 0 else float("inf")
    return ReconstructionReport(nmse, float(1.0 - fired.mean()), active / X.shape[0])


# ---------------------------------------------------------------- persistence


def save_sae(sae: SaeModel, path: str | Path, *, stage: str = "-") -> Path:
    header = {
        "kind": "sae",
        "d": sae.d,
        "n": sae.n,
        "k": sae.k,
        "gamma": sae.gamma,
        "k_aux": sae.k_aux,
        "dead_window": sae.dead_window,
        "stage": stage,
    }
    return write_container(path, MAGIC, header, {"W_enc": sae.W_enc, "W_dec": sae.W_dec, "b_pre": sae.b_pre})


def load_sae(path: str | Path, *, stage: str | None = None) -> SaeModel:
    header, arrays = read_container(path, MAGIC)
    if stage is not None and header.get("stage") != stage:
        raise ArtifactError(f"stale artifact {path}: built from stage={header.get('stage')}, expected {stage}")
    for a in arrays.values():
        a.flags.writeable = False
    return SaeModel(arrays["W_enc"], arrays["W_dec"], arrays["b_pre"], int(header["k"]),
                    float(header["gamma"]), int(header["k_aux"]), int(header["dead_window"]))
