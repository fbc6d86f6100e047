"""Undirected attributed graphs: loading, synthetic generation, splits.

File formats are plain text: `edges.tsv` with one "src<TAB>dst" pair per
line ('#' starts a comment), `features.csv` with one row of floats per
node, `labels.csv` with one 0/1 per node. Graphs are immutable once built.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Splits:
    """Disjoint boolean node masks."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected attributed graph with binary node labels.

    Edges are stored once per pair with i < j, no self-loops; adjacency is
    exposed through sorted per-node neighbor lists. The label array is
    read-only for the lifetime of the graph. Identity equality, so graphs
    can key caches.
    """

    n: int
    edges: np.ndarray            # (m, 2) int array, i < j
    neighbor_lists: tuple        # tuple of sorted tuples
    features: Tensor             # (n, h)
    labels: np.ndarray           # (n,) values in {0, 1}
    splits: Splits | None = None

    def __post_init__(self):
        self.labels.setflags(write=False)
        self.edges.setflags(write=False)

    def degree(self, v):
        return len(self.neighbor_lists[v])

    def neighbors(self, v):
        return self.neighbor_lists[v]

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def with_splits(self, splits):
        return dataclasses.replace(self, splits=splits)

    def validate(self):
        """Full-scan consistency check of the adjacency structure."""
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop stored at node {i}")
            if j not in self.neighbor_lists[i] or i not in self.neighbor_lists[j]:
                raise ValueError(f"adjacency not symmetric for edge ({i}, {j})")
        if self.features.shape[0] != self.n or len(self.labels) != self.n:
            raise ValueError("feature/label row count does not match node count")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        return True


@dataclass(frozen=True)
class NeighborSequence:
    """A fixed-length window of a node's neighbors.

    Always exactly L members; when the node has fewer than L neighbors the
    last real neighbor is repeated and flagged in `duplicated`.
    """

    target: int
    members: tuple
    duplicated: tuple

    @property
    def real_members(self):
        return tuple(m for m, d in zip(self.members, self.duplicated) if not d)


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted two-block benchmark graph: SBM edges, Gaussian features."""

    n: int
    anomaly_rate: float
    feature_dim: int
    mean_normal: float | tuple = 0.0
    mean_anomaly: float | tuple = 1.0
    feature_std: float = 1.0
    intra_normal_p: float = 0.02
    intra_anomaly_p: float = 0.02
    cross_p: float = 0.02
    seed: int | None = None

    def mean_vectors(self):
        mn = np.broadcast_to(np.asarray(self.mean_normal, dtype=np.float64),
                             (self.feature_dim,)).copy()
        ma = np.broadcast_to(np.asarray(self.mean_anomaly, dtype=np.float64),
                             (self.feature_dim,)).copy()
        return mn, ma


def _build_graph(n, pair_set, features, labels, source=""):
    for i, j in pair_set:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"{source}edge references node {max(i, j)} "
                             f"but the graph has {n} nodes")
    adj = [[] for _ in range(n)]
    for i, j in sorted(pair_set):
        adj[i].append(j)
        adj[j].append(i)
    edges = np.array(sorted(pair_set), dtype=np.int64).reshape(-1, 2)
    return Graph(
        n=n,
        edges=edges,
        neighbor_lists=tuple(tuple(sorted(a)) for a in adj),
        features=Tensor(features),
        labels=np.asarray(labels, dtype=np.int64),
    )


def load_graph(edge_path, feature_path, label_path):
    """Load a graph from edges.tsv / features.csv / labels.csv.

    Directed or duplicated edge listings collapse to single undirected
    edges; self-loops in the input are dropped.
    """
    features = []
    with open(feature_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                features.append([float(tok) for tok in line.split(",")])
            except ValueError:
                raise ValueError(f"{feature_path}:{lineno}: unparseable feature row") from None
    if features and any(len(r) != len(features[0]) for r in features):
        raise ValueError(f"{feature_path}: inconsistent feature row widths")

    labels = []
    with open(label_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                val = int(line)
            except ValueError:
                raise ValueError(f"{label_path}:{lineno}: unparseable label") from None
            if val not in (0, 1):
                raise ValueError(f"{label_path}:{lineno}: label must be 0 or 1, got {val}")
            labels.append(val)

    if len(features) != len(labels):
        raise ValueError(f"row-count mismatch: {len(features)} feature rows "
                         f"vs {len(labels)} labels")
    n = len(labels)

    pair_set = set()
    with open(edge_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            try:
                i, j = int(toks[0]), int(toks[1])
            except (ValueError, IndexError):
                raise ValueError(f"{edge_path}:{lineno}: unparseable edge line") from None
            if i == j:
                log.debug("%s:%d: dropping self-loop at node %d", edge_path, lineno, i)
                continue
            pair_set.add((min(i, j), max(i, j)))

    return _build_graph(n, pair_set, features, labels, source=f"{edge_path}: ")


def generate_synthetic(spec):
    """Sample a two-block SBM graph with class-conditional Gaussian features.

    The anomaly count is round(n * anomaly_rate); identical seeds give
    identical graphs.
    """
    if not 0.0 < spec.anomaly_rate < 1.0:
        raise ValueError(f"anomaly_rate must be in (0,1), got {spec.anomaly_rate}")
    for name in ("intra_normal_p", "intra_anomaly_p", "cross_p"):
        p = getattr(spec, name)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0,1], got {p}")
    mean_n, mean_a = spec.mean_vectors()
    if np.array_equal(mean_n, mean_a):
        raise ValueError("normal and anomaly feature means must differ somewhere")

    rng = np.random.default_rng(spec.seed)
    n = spec.n
    k = min(max(int(round(n * spec.anomaly_rate)), 1), n - 1)
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:k]] = 1

    exp_deg_anom = (k - 1) * spec.intra_anomaly_p + (n - k) * spec.cross_p
    exp_deg_norm = (n - k - 1) * spec.intra_normal_p + k * spec.cross_p
    if exp_deg_anom == 0 or exp_deg_norm == 0:
        log.warning("a block has expected degree 0 (anomaly %.3f, normal %.3f)",
                    exp_deg_anom, exp_deg_norm)

    # pairwise probabilities from the label outer product
    is_anom = labels.astype(bool)
    pmat = np.where(np.logical_xor.outer(is_anom, is_anom), spec.cross_p,
                    np.where(np.logical_and.outer(is_anom, is_anom),
                             spec.intra_anomaly_p, spec.intra_normal_p))
    draws = rng.random((n, n))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    ii, jj = np.nonzero(upper & (draws < pmat))
    pair_set = set(zip(ii.tolist(), jj.tolist()))

    features = rng.normal(0.0, spec.feature_std, size=(n, spec.feature_dim))
    features += np.where(is_anom[:, None], mean_a, mean_n)

    return _build_graph(n, pair_set, features, labels)


def neighbor_sequence(g, v, length, order="ascending", rng=None, hops=1):
    """Fixed-length neighbor window for node v.

    Truncation keeps the lowest node ids (or a random subset with
    order="random"); short neighborhoods repeat the last real neighbor.
    With hops=2 the window is filled with 1-hop neighbors first, then
    sorted 2-hop ones.
    """
    if g.degree(v) == 0:
        raise ValueError(f"node {v} is isolated; no neighbor sequence exists")
    pool = list(g.neighbor_lists[v])
    if hops == 2:
        two_hop = set()
        for u in g.neighbor_lists[v]:
            two_hop.update(g.neighbor_lists[u])
        two_hop.discard(v)
        two_hop.difference_update(pool)
        pool.extend(sorted(two_hop))
    elif hops != 1:
        raise ValueError(f"hops must be 1 or 2, got {hops}")

    if len(pool) > length:
        if order == "random":
            if rng is None:
                raise ValueError("random truncation needs an rng")
            keep = sorted(rng.choice(len(pool), size=length, replace=False))
            members = [pool[i] for i in keep]
        else:
            members = pool[:length]
        duplicated = [False] * length
    else:
        members = list(pool)
        duplicated = [False] * len(pool)
        while len(members) < length:
            members.append(pool[-1])
            duplicated.append(True)
    return NeighborSequence(target=v, members=tuple(members), duplicated=tuple(duplicated))


def average_degree(g):
    """Mean node degree, 2|E|/n."""
    if g.n < 1:
        raise ValueError("empty graph")
    return 2.0 * g.num_edges / g.n


def sequence_length(g):
    """Default neighbor-window length: average degree rounded half-up, at least 1."""
    return max(1, int(math.floor(average_degree(g) + 0.5)))


def make_splits(g, train_frac=0.01, val_test_ratio=(1, 2), seed=0):
    """Stratified train mask plus a val/test split of the remainder.

    Per class the train count is max(1, floor(train_frac * class size));
    the remaining nodes are shuffled and split val:test by floor on the
    ratio. Deterministic under the seed.
    """
    labels = g.labels
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("splits need both classes present in the graph")
    rng = np.random.default_rng(seed)

    train = np.zeros(g.n, dtype=bool)
    for c in classes:
        ids = np.flatnonzero(labels == c)
        count = max(1, int(math.floor(train_frac * len(ids))))
        picked = rng.permutation(ids)[:count]
        train[picked] = True

    rest = np.flatnonzero(~train)
    rest = rng.permutation(rest)
    a, b = val_test_ratio
    n_val = int(math.floor(len(rest) * a / (a + b)))
    val = np.zeros(g.n, dtype=bool)
    test = np.zeros(g.n, dtype=bool)
    val[rest[:n_val]] = True
    test[rest[n_val:]] = True
    return Splits(train=train, val=val, test=test)
