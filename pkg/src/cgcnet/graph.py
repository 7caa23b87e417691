"""Cell-graph construction: node sampling, proximity edges, re-weighting and
feature normalisation, plus the on-disk bundle format."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .features import N_FEATURES

CLASS_NAMES = ("normal", "low-grade", "high-grade")
SAMPLING_STRATEGIES = ("fuse", "farthest", "random")


@dataclass
class SamplerConfig:
    a_ratio: float = 0.35
    b_ratio: float = 0.15
    strategy: str = "fuse"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in SAMPLING_STRATEGIES:
            raise ValueError(f"strategy must be one of {SAMPLING_STRATEGIES}")
        if not (0.0 <= self.b_ratio < self.a_ratio <= 1.0 and self.a_ratio + self.b_ratio <= 1.0):
            raise ValueError("sampling ratios need 0 <= b < a <= 1 and a + b <= 1")


@dataclass
class EdgeConfig:
    k_max: int = 8
    d: float = 100.0
    p: float = 0.4

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if not self.d > 0:
            raise ValueError("distance threshold must be positive")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")


def _ceil_ratio(ratio, n):
    # round first so that 0.15 * 100 = 15.000000000000002 counts as 15
    return int(math.ceil(round(ratio * n, 9)))


def farthest_point_sample(coords, m, seed=None, start=None):
    """Greedy farthest point sampling.

    The first index is drawn uniformly from ``seed`` unless ``start`` is
    given; every later pick maximises the distance to the selected set,
    lowest index on ties.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if start is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        start = int(rng.integers(n))
    picks = [start]
    dist = np.linalg.norm(coords - coords[start], axis=1)
    dist[start] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        picks.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(coords - coords[nxt], axis=1))
        dist[picks] = -1.0
    return picks


def fused_sample(coords, cfg: SamplerConfig, rng=None):
    """Indices kept by the configured strategy, sorted ascending.

    ``fuse`` takes ceil(a n) farthest points plus ceil(b n) uniform picks
    from the rest; ``farthest`` and ``random`` keep ceil((a + b) n) points
    by one method alone.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if cfg.strategy == "random":
        m = min(n, _ceil_ratio(cfg.a_ratio + cfg.b_ratio, n))
        return sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    if cfg.strategy == "farthest":
        m = min(n, _ceil_ratio(cfg.a_ratio + cfg.b_ratio, n))
        return sorted(farthest_point_sample(coords, m, rng))
    chosen = farthest_point_sample(coords, min(n, _ceil_ratio(cfg.a_ratio, n)), rng)
    rest = np.setdiff1d(np.arange(n), chosen)
    n_rand = min(len(rest), _ceil_ratio(cfg.b_ratio, n))
    extra = rng.choice(rest, size=n_rand, replace=False) if n_rand else []
    return sorted(int(i) for i in list(chosen) + list(extra))


def knn_edges(coords, cfg: EdgeConfig, chunk=1024):
    """Symmetric 0/1 adjacency: union of each node's k nearest neighbours closer than d."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    adj = np.zeros((n, n), dtype=bool)
    if n < 2:
        return adj
    k = min(cfg.k_max, n - 1)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        diff = coords[lo:hi, None, :] - coords[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        rows = np.arange(hi - lo)
        dist[rows, rows + lo] = np.inf
        # stable sort keeps the lower index first among equal distances
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        near_d = np.take_along_axis(dist, nearest, axis=1)
        ok = near_d < cfg.d
        src = np.repeat(rows + lo, k).reshape(-1, k)
        adj[src[ok], nearest[ok]] = True
    adj |= adj.T
    np.fill_diagonal(adj, False)
    return adj


def reweight(adjacency, p=0.4):
    """Row-stochastic A': 1 - p on the diagonal, p / deg(i) on each edge.

    Isolated nodes get a unit diagonal.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    n = adj.shape[0]
    deg = adj.sum(axis=1)
    out = np.zeros((n, n))
    live = deg > 0
    out[live] = p * adj[live] / deg[live, None]
    out[np.arange(n), np.arange(n)] = np.where(live, 1.0 - p, 1.0)
    return out


@dataclass
class CellGraph:
    coords: np.ndarray
    features: np.ndarray
    adjacency: np.ndarray
    label: int | None = None
    p: float = 0.4
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ValueError("features need one row per node")
        self.adjacency = np.asarray(self.adjacency, dtype=bool)

    @property
    def n(self):
        return len(self.coords)

    @cached_property
    def reweighted(self):
        return reweight(self.adjacency, self.p)

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    def with_features(self, features):
        return CellGraph(self.coords, features, self.adjacency, self.label, self.p, dict(self.meta))

    def permuted(self, perm):
        perm = np.asarray(perm)
        return CellGraph(
            self.coords[perm], self.features[perm], self.adjacency[np.ix_(perm, perm)],
            self.label, self.p, dict(self.meta),
        )

    def check(self):
        """Raise AssertionError if a structural invariant is broken."""
        a = self.adjacency
        assert a.shape == (self.n, self.n)
        assert not a.diagonal().any(), "self loops"
        assert (a == a.T).all(), "adjacency not symmetric"
        assert self.features.shape == (self.n, N_FEATURES)
        rows = self.reweighted.sum(axis=1)
        assert np.allclose(rows, 1.0, rtol=0, atol=1e-12)
        d = self.meta.get("edge_config", {}).get("d")
        if d is not None:
            i, j = np.nonzero(a)
            assert (np.linalg.norm(self.coords[i] - self.coords[j], axis=1) < d).all()


def assemble_graph(features, coords, sampler_cfg: SamplerConfig, edge_cfg: EdgeConfig, label=None, meta=None):
    features = np.asarray(features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("empty graph: no nuclei to build from")
    keep = fused_sample(coords, sampler_cfg)
    sub = coords[keep]
    info = dict(meta or {})
    info.update(
        sampler_config=asdict(sampler_cfg),
        edge_config=asdict(edge_cfg),
        n_source_nuclei=len(features),
    )
    return CellGraph(sub, features[keep], knn_edges(sub, edge_cfg), label, edge_cfg.p, info)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(graphs, floor=1e-8):
    feats = [g.features for g in graphs if g.n]
    if not feats:
        raise ValueError("normalisation needs at least one node in the training set")
    x = np.vstack(feats)
    return NormStats(x.mean(axis=0), np.maximum(x.std(axis=0), floor))


def normalize_features(graphs, stats=None):
    """Z-score every graph with ``stats`` (fitted on ``graphs`` if omitted)."""
    stats = stats if stats is not None else fit_norm_stats(graphs)
    return stats, [g.with_features(stats.apply(g.features)) for g in graphs]


# ---------------------------------------------------------------------------
# bundle I/O


def _fmt(x):
    return format(float(x), ".17g")


def save_bundle(graph: CellGraph, directory):
    if graph.n == 0:
        raise ValueError("empty graph: refusing to write a bundle with no nodes")
    os.makedirs(directory, exist_ok=True)
    meta = dict(graph.meta)
    meta.update(n=graph.n, label=graph.label, p=graph.p, n_features=graph.features.shape[1])
    meta.setdefault("norm_stats_id", None)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "nodes.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "row", "col"] + [f"f{k}" for k in range(graph.features.shape[1])])
        for i in range(graph.n):
            w.writerow([i, _fmt(graph.coords[i, 0]), _fmt(graph.coords[i, 1])] + [_fmt(v) for v in graph.features[i]])
    with open(os.path.join(directory, "edges.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"])
        w.writerows(graph.edges())


def load_bundle(directory) -> CellGraph:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(directory, "nodes.csv"), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    n = int(meta["n"])
    if len(rows) != n:
        raise ValueError(f"{directory}: meta says {n} nodes, nodes.csv has {len(rows)}")
    table = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(n, -1)
    adj = np.zeros((n, n), dtype=bool)
    with open(os.path.join(directory, "edges.csv"), newline="") as fh:
        for r in list(csv.reader(fh))[1:]:
            i, j = int(r[0]), int(r[1])
            adj[i, j] = adj[j, i] = True
    label = meta.pop("label", None)
    p = meta.pop("p", 0.4)
    for key in ("n", "n_features"):
        meta.pop(key, None)
    return CellGraph(table[:, :2], table[:, 2:], adj, label, p, meta)


def is_bundle(directory):
    return all(os.path.isfile(os.path.join(directory, f)) for f in ("meta.json", "nodes.csv", "edges.csv"))
