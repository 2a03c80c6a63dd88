"""Interaction logs: loading, k-core filtering, leave-one-out splits,
head/tail popularity partition and popularity-polarised synthetic profiles."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from popsteer.artifacts import read_table, write_table
from popsteer.errors import ConfigError, DataError

USER_COLUMNS = {"user", "user_id", "userid", "uid"}
ITEM_COLUMNS = {"item", "item_id", "itemid", "iid", "movie_id", "movieid", "track_id", "artist_id"}
TIME_COLUMNS = {"timestamp", "time", "ts"}

HEAD_TAIL_FRACTION = Fraction(1, 5)


def _frozen(a, dtype=np.int64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class InteractionLog:
    """Timestamped implicit-feedback events with dense user/item ids.

    Events keep their file order; ``user_labels[u]`` / ``item_labels[i]`` hold
    the original identifiers of dense ids ``u`` / ``i``.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_labels: tuple[str, ...]
    item_labels: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.user_labels)

    @property
    def n_items(self) -> int:
        return len(self.item_labels)

    @property
    def n_events(self) -> int:
        return len(self.users)

    @property
    def density(self) -> float:
        return self.n_events / (self.n_users * self.n_items)

    def stats(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_events,
            "density": self.density,
        }

    def sequences(self) -> list[np.ndarray]:
        """Per-user item sequences ordered by timestamp (stable on ties)."""
        order = np.lexsort((np.arange(self.n_events), self.timestamps, self.users))
        bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
        items = self.items[order]
        return [items[bounds[u] : bounds[u + 1]] for u in range(self.n_users)]


@dataclass(frozen=True)
class SplitBundle:
    """Leave-one-out split: chronological training prefix, then valid, then test."""

    train: tuple[np.ndarray, ...]
    train_timestamps: tuple[np.ndarray, ...]
    valid: np.ndarray
    test: np.ndarray
    user_labels: tuple[str, ...]
    item_labels: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.train)

    @property
    def n_items(self) -> int:
        return len(self.item_labels)

    def train_counts(self) -> np.ndarray:
        return np.bincount(np.concatenate(self.train), minlength=self.n_items)


@dataclass(frozen=True)
class PopularityPartition:
    counts: np.ndarray
    head: np.ndarray
    tail: np.ndarray
    head_mass: float
    tail_mass: float

    @property
    def n_items(self) -> int:
        return len(self.counts)

    def tail_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_items, dtype=bool)
        mask[self.tail] = True
        return mask

    def labels(self) -> list[str]:
        out = ["mid"] * self.n_items
        for i in self.head:
            out[i] = "head"
        for i in self.tail:
            out[i] = "tail"
        return out


# --------------------------------------------------------------------------- io


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def _is_header(fields: list[str]) -> bool:
    return (
        len(fields) == 3
        and fields[0].lower() in USER_COLUMNS
        and fields[1].lower() in ITEM_COLUMNS
        and fields[2].lower() in TIME_COLUMNS
    )


def _dense(labels: list[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    index: dict[str, int] = {}
    ids = np.fromiter((index.setdefault(x, len(index)) for x in labels), dtype=np.int64, count=len(labels))
    return ids, tuple(index)


def load_interactions(path: str | Path, fmt: str = "tsv") -> InteractionLog:
    """Read ``user item timestamp`` rows and remap ids densely by first appearance.

    ``tsv`` splits on any whitespace, ``csv`` on commas. A first row whose
    fields are recognised column names (``user``/``item``/``timestamp`` and
    common aliases) is skipped as a header.
    """
    if fmt not in ("tsv", "csv"):
        raise ConfigError(f"unknown format {fmt!r}; expected 'tsv' or 'csv'")
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    users: list[str] = []
    items: list[str] = []
    stamps: list[int] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")] if fmt == "csv" else line.split()
            if lineno == 1 and _is_header(fields):
                continue
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields (user, item, timestamp), got {len(fields)}")
            if not _is_int(fields[2]):
                raise DataError(f"{path}:{lineno}: timestamp {fields[2]!r} is not an integer")
            users.append(fields[0])
            items.append(fields[1])
            stamps.append(int(fields[2]))
    if not users:
        raise DataError(f"{path}: no interactions")
    u, user_labels = _dense(users)
    i, item_labels = _dense(items)
    return InteractionLog(_frozen(u), _frozen(i), _frozen(stamps), user_labels, item_labels)


def write_interactions(log: InteractionLog, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["user\titem\ttimestamp"]
    lines += [
        f"{log.user_labels[u]}\t{log.item_labels[i]}\t{t}"
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist())
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_id_maps(log: InteractionLog, directory: str | Path, stage: str = "-") -> None:
    directory = Path(directory)
    write_table(directory / "user_map.tsv", "user_map", ["original", "dense"],
                ((lab, u) for u, lab in enumerate(log.user_labels)), stage=stage)
    write_table(directory / "item_map.tsv", "item_map", ["original", "dense"],
                ((lab, i) for i, lab in enumerate(log.item_labels)), stage=stage)


def write_partition(partition: PopularityPartition, path: str | Path, stage: str = "-") -> Path:
    rows = zip(range(partition.n_items), partition.counts.tolist(), partition.labels())
    return write_table(path, "partition", ["item_id", "count", "label"], rows, stage=stage)


def read_partition(path: str | Path, stage: str | None = None) -> PopularityPartition:
    _, rows = read_table(path, "partition", stage=stage)
    counts = np.array([int(r[1]) for r in rows], dtype=np.int64)
    labels = [r[2] for r in rows]
    head = np.array([i for i, lab in enumerate(labels) if lab == "head"], dtype=np.int64)
    tail = np.array([i for i, lab in enumerate(labels) if lab == "tail"], dtype=np.int64)
    total = counts.sum()
    return PopularityPartition(
        _frozen(counts), _frozen(head), _frozen(tail),
        float(counts[head].sum() / total), float(counts[tail].sum() / total),
    )


def write_split(split: SplitBundle, path: str | Path, stage: str = "-") -> Path:
    """One row per event: user, item, timestamp, role in {train, valid, test}."""
    rows = []
    for u in range(split.n_users):
        for i, t in zip(split.train[u].tolist(), split.train_timestamps[u].tolist()):
            rows.append((u, i, t, "train"))
        rows.append((u, int(split.valid[u]), -1, "valid"))
        rows.append((u, int(split.test[u]), -1, "test"))
    # original labels travel with the id-map tables
    return write_table(path, "split", ["user", "item", "timestamp", "role"], rows, stage=stage)


def read_split(path: str | Path, user_labels, item_labels, stage: str | None = None) -> SplitBundle:
    _, rows = read_table(path, "split", stage=stage)
    n = len(user_labels)
    train: list[list[int]] = [[] for _ in range(n)]
    stamps: list[list[int]] = [[] for _ in range(n)]
    valid = np.zeros(n, dtype=np.int64)
    test = np.zeros(n, dtype=np.int64)
    for u, i, t, role in rows:
        u, i = int(u), int(i)
        if role == "train":
            train[u].append(i)
            stamps[u].append(int(t))
        elif role == "valid":
            valid[u] = i
        else:
            test[u] = i
    return SplitBundle(
        tuple(_frozen(s) for s in train), tuple(_frozen(s) for s in stamps),
        _frozen(valid), _frozen(test), tuple(user_labels), tuple(item_labels),
    )


def read_id_map(path: str | Path, kind: str, stage: str | None = None) -> tuple[str, ...]:
    _, rows = read_table(path, kind, stage=stage)
    return tuple(r[0] for r in rows)


def write_log_table(log: InteractionLog, path: str | Path, kind: str, stage: str = "-") -> Path:
    rows = zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist())
    return write_table(path, kind, ["user", "item", "timestamp"], rows, stage=stage)


def read_log_table(path, kind, user_labels, item_labels, stage: str | None = None) -> InteractionLog:
    _, rows = read_table(path, kind, stage=stage)
    arr = np.array([[int(x) for x in r] for r in rows], dtype=np.int64).reshape(-1, 3)
    return InteractionLog(_frozen(arr[:, 0]), _frozen(arr[:, 1]), _frozen(arr[:, 2]),
                          tuple(user_labels), tuple(item_labels))


# ------------------------------------------------------------------ transforms


def kcore_filter(log: InteractionLog, k: int) -> InteractionLog:
    """Iteratively drop users with < k events and items with < k distinct users.

    Surviving ids are re-densified in their previous relative order.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    keep = np.ones(log.n_events, dtype=bool)
    while True:
        u, i = log.users[keep], log.items[keep]
        user_deg = np.bincount(u, minlength=log.n_users)
        pairs = np.unique(u * log.n_items + i)
        item_deg = np.bincount(pairs % log.n_items, minlength=log.n_items)
        bad = (user_deg[log.users] < k) | (item_deg[log.items] < k)
        new_keep = keep & ~bad
        if new_keep.sum() == keep.sum():
            break
        keep = new_keep
        if not keep.any():
            break
    if not keep.any():
        raise DataError("k-core eliminated all data")
    users, items = log.users[keep], log.items[keep]
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    return InteractionLog(
        _frozen(np.searchsorted(kept_users, users)),
        _frozen(np.searchsorted(kept_items, items)),
        _frozen(log.timestamps[keep]),
        tuple(log.user_labels[u] for u in kept_users.tolist()),
        tuple(log.item_labels[i] for i in kept_items.tolist()),
    )


def chronological_split(log: InteractionLog) -> SplitBundle:
    order = np.lexsort((np.arange(log.n_events), log.timestamps, log.users))
    bounds = np.searchsorted(log.users[order], np.arange(log.n_users + 1))
    items, stamps = log.items[order], log.timestamps[order]
    train, train_ts, valid, test = [], [], [], []
    for u in range(log.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        if hi - lo < 3:
            raise DataError(
                f"user {log.user_labels[u]!r} has {hi - lo} interactions; leave-one-out needs at least 3"
            )
        train.append(_frozen(items[lo : hi - 2]))
        train_ts.append(_frozen(stamps[lo : hi - 2]))
        valid.append(items[hi - 2])
        test.append(items[hi - 1])
    return SplitBundle(tuple(train), tuple(train_ts), _frozen(valid), _frozen(test),
                       log.user_labels, log.item_labels)


def partition_popularity(split: SplitBundle, fraction: Fraction = HEAD_TAIL_FRACTION) -> PopularityPartition:
    """Head = most popular items covering >= ``fraction`` of training interactions,
    tail = least popular items covering >= ``fraction``; boundary item included.

    Items are ranked by descending training count, ties by ascending id; the
    tail is accumulated along the reverse of that ranking.
    """
    counts = split.train_counts()
    if np.count_nonzero(counts) < 2:
        raise DataError("popularity partition needs at least 2 distinct training items")
    total = int(counts.sum())
    fraction = Fraction(fraction)
    ranking = np.lexsort((np.arange(len(counts)), -counts))

    def prefix(order: np.ndarray) -> np.ndarray:
        cum = np.cumsum(counts[order])
        # exact rational comparison: cum / total >= fraction
        hit = np.nonzero(cum * fraction.denominator >= fraction.numerator * total)[0][0]
        return order[: hit + 1]

    head = prefix(ranking)
    tail = prefix(ranking[::-1])
    if np.intersect1d(head, tail).size:
        raise DataError("head and tail item sets overlap; catalog too concentrated for a 20% split")
    return PopularityPartition(
        _frozen(counts), _frozen(np.sort(head)), _frozen(np.sort(tail)),
        float(counts[head].sum() / total), float(counts[tail].sum() / total),
    )


def synthesize_profiles(split: SplitBundle, partition: PopularityPartition, mode: str, seed: int) -> InteractionLog:
    """Replace every training item by a uniform draw (with replacement) from the
    head (``mode='pop'``) or tail (``mode='unpop'``) item set."""
    if mode == "pop":
        pool = partition.head
    elif mode == "unpop":
        pool = partition.tail
    else:
        raise ConfigError(f"mode must be 'pop' or 'unpop', got {mode!r}")
    if len(pool) == 0:
        raise DataError(f"empty target item set for mode={mode}")
    lengths = np.array([len(s) for s in split.train])
    rng = np.random.default_rng(seed)
    items = np.asarray(pool)[rng.integers(len(pool), size=int(lengths.sum()))]
    users = np.repeat(np.arange(split.n_users), lengths)
    stamps = np.concatenate(split.train_timestamps) if len(lengths) else np.zeros(0)
    return InteractionLog(_frozen(users), _frozen(items), _frozen(stamps),
                          split.user_labels, split.item_labels)


def generate_powerlaw_dataset(
    n_users: int,
    n_items: int,
    events_per_user: tuple[int, int],
    zipf_exponent: float,
    seed: int,
    n_clusters: int = 1,
    affinity: float = 0.0,
) -> InteractionLog:
    """Seeded synthetic log whose item popularity follows Zipf's law.

    Item at popularity rank r (0-based) has base weight (r + 1) ** -zipf_exponent.
    With ``n_clusters > 1`` items are dealt round-robin by rank into clusters,
    each user gets a home cluster, and each draw comes from the home cluster
    (popularity-weighted) with probability ``affinity``, else from the whole
    catalog; round-robin dealing keeps the marginal close to Zipf. Users never
    repeat an item.
    """
    lo, hi = events_per_user
    if n_users < 10 or n_items < 10:
        raise ConfigError("n_users and n_items must be >= 10")
    if zipf_exponent <= 0:
        raise ConfigError("zipf_exponent must be > 0")
    if lo < 3:
        raise ConfigError(f"events_per_user lower bound {lo} < 3 would break leave-one-out splitting")
    if hi < lo or hi > n_items // max(n_clusters, 1):
        raise ConfigError(f"invalid events_per_user range {events_per_user}")
    if not 0.0 <= affinity <= 1.0:
        raise ConfigError("affinity must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    weights = np.arange(1, n_items + 1, dtype=np.float64) ** -zipf_exponent
    item_of_rank = rng.permutation(n_items)
    cluster_of_rank = np.arange(n_items) % n_clusters
    global_cdf = np.cumsum(weights) / weights.sum()
    cluster_ranks = [np.nonzero(cluster_of_rank == c)[0] for c in range(n_clusters)]
    cluster_cdfs = [np.cumsum(weights[r]) / weights[r].sum() for r in cluster_ranks]

    users, items, stamps = [], [], []
    for u in range(n_users):
        length = int(rng.integers(lo, hi + 1))
        home = int(rng.integers(n_clusters))
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < length:
            batch = 2 * (length - len(chosen))
            from_home = rng.random(batch) < affinity
            g = np.minimum(np.searchsorted(global_cdf, rng.random(batch)), n_items - 1)
            h = cluster_ranks[home][
                np.minimum(np.searchsorted(cluster_cdfs[home], rng.random(batch)), len(cluster_ranks[home]) - 1)
            ]
            for r in np.where(from_home, h, g).tolist():
                if r not in seen:
                    seen.add(r)
                    chosen.append(r)
                    if len(chosen) == length:
                        break
        start = int(rng.integers(0, 10**6))
        ts = start + np.cumsum(rng.integers(1, 3600, size=length))
        users.extend([u] * length)
        items.extend(item_of_rank[chosen].tolist())
        stamps.extend(ts.tolist())
    return InteractionLog(
        _frozen(users), _frozen(items), _frozen(stamps),
        tuple(str(u) for u in range(n_users)), tuple(str(i) for i in range(n_items)),
    )
