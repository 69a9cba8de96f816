"""Density-based clustering of token activations.

HDBSCAN is implemented from scratch: core distances at min_samples,
minimum spanning tree of the mutual-reachability graph (vectorized
Prim with a shrinking candidate set, so 100k x 256 stays tractable on
one core), single-linkage hierarchy, condensation at min_cluster_size
and excess-of-mass cluster selection. A Lloyd/k-means++ K-Means is
included as the partition-based baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .tensor import RngState, Tensor


@dataclass
class ClusteringConfig:
    min_cluster_size_fraction: float = 0.006
    min_samples: int | None = None     # defaults to the derived min_cluster_size
    metric: str = "euclidean"
    selection: str = "eom"

    def __post_init__(self):
        if not 0 < self.min_cluster_size_fraction < 1:
            raise ConfigError("min_cluster_size_fraction must be in (0, 1)")
        if self.metric != "euclidean":
            raise ConfigError("only the euclidean metric is supported")
        if self.selection != "eom":
            raise ConfigError("only excess-of-mass selection is supported")

    def derived_min_cluster_size(self, n_samples: int) -> int:
        mcs = int(round(self.min_cluster_size_fraction * n_samples))
        if mcs < 2:
            raise ConfigError(
                f"min_cluster_size_fraction {self.min_cluster_size_fraction} on "
                f"{n_samples} samples derives min_cluster_size {mcs} < 2")
        return mcs


@dataclass
class ClusterAssignment:
    labels: np.ndarray   # per-sample: -1 noise, 0..k-1 cluster id
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        bad = (self.labels < -1) | (self.labels >= self.k)
        if bad.any():
            raise ValidationError("cluster labels outside {-1} U [0, k)")

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)

    def noise_fraction(self) -> float:
        return float((self.labels == -1).mean()) if len(self.labels) else 0.0

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "labels": self.labels.tolist()})

    @classmethod
    def from_json(cls, s: str) -> "ClusterAssignment":
        d = json.loads(s)
        return cls(np.asarray(d["labels"], dtype=np.int64), int(d["k"]))


def core_distances(points: Tensor, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor (self counts as the first)."""
    x = np.asarray(points)
    n = len(x)
    k = min(min_samples, n)
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty(n, dtype=x.dtype)
    block = max(1, int(1.2e8 // max(n, 1)))
    for s0 in range(0, n, block):
        s1 = min(s0 + block, n)
        d2 = sq[s0:s1, None] + sq[None, :] - 2.0 * (x[s0:s1] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        out[s0:s1] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out


def mutual_reachability_mst(points: Tensor, min_samples: int,
                            core: np.ndarray | None = None) -> np.ndarray:
    """Exact MST of the mutual-reachability graph.

    Returns (n-1, 3) rows [u, v, weight]. Prim over the implicit dense
    graph; ties in the key minimum break toward the smaller original
    point index so results are order-deterministic.
    """
    x = np.asarray(points)
    n = len(x)
    if core is None:
        core = core_distances(x, min_samples)
    core = np.asarray(core, dtype=x.dtype)
    if n == 1:
        return np.zeros((0, 3), dtype=np.float64)
    # shrinking candidate arrays: entry j describes original point cand[j]
    cand = np.arange(1, n)
    xc = x[1:].copy()
    sqc = np.einsum("ij,ij->i", xc, xc)
    corec = core[1:].copy()
    key = np.full(n - 1, np.inf, dtype=np.float64)
    parent = np.zeros(n - 1, dtype=np.int64)
    cur_idx, cur_x, cur_sq, cur_core = 0, x[0].copy(), float(x[0] @ x[0]), core[0]
    edges = np.empty((n - 1, 3), dtype=np.float64)
    m = n - 1
    for step in range(n - 1):
        d2 = sqc[:m] + cur_sq - 2.0 * (xc[:m] @ cur_x)
        np.maximum(d2, 0.0, out=d2)
        mr = np.maximum(np.sqrt(d2), np.maximum(corec[:m], cur_core))
        upd = mr < key[:m]
        key[:m][upd] = mr[upd]
        parent[:m][upd] = cur_idx
        kmin = key[:m].min()
        ties = np.flatnonzero(key[:m] == kmin)
        j = ties[np.argmin(cand[:m][ties])] if len(ties) > 1 else int(ties[0])
        edges[step] = (parent[j], cand[j], key[j])
        cur_idx, cur_sq, cur_core = int(cand[j]), float(sqc[j]), corec[j]
        cur_x = xc[j].copy()
        last = m - 1
        for arr in (cand, sqc, corec, key, parent):
            arr[j] = arr[last]
        xc[j] = xc[last]
        m = last
    return edges


def single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Merge tree from MST edges, scipy-linkage style rows [left, right, dist, size].

    Edges are processed by ascending (weight, min index, max index).
    """
    u = np.minimum(edges[:, 0], edges[:, 1]).astype(np.int64)
    v = np.maximum(edges[:, 0], edges[:, 1]).astype(np.int64)
    w = edges[:, 2]
    order = np.lexsort((v, u, w))
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    size = np.ones(2 * n - 1, dtype=np.int64)
    out = np.empty((n - 1, 4), dtype=np.float64)

    def find(a):
        root = a
        while parent[root] != -1:
            root = parent[root]
        while parent[a] != -1:
            parent[a], a = root, parent[a]
        return root

    nxt = n
    for t, ei in enumerate(order):
        ra, rb = find(u[ei]), find(v[ei])
        out[t] = (ra, rb, w[ei], size[ra] + size[rb])
        parent[ra] = parent[rb] = nxt
        size[nxt] = size[ra] + size[rb]
        nxt += 1
    return out


def condense_tree(linkage: np.ndarray, n: int, min_cluster_size: int):
    """Condensed cluster tree: rows (parent, child, lambda, child_size).

    Point ids stay 0..n-1; condensed cluster ids start at n (root = n).
    """
    sizes = np.ones(2 * n - 1, dtype=np.int64)
    sizes[n:] = linkage[:, 3].astype(np.int64)
    lefts = linkage[:, 0].astype(np.int64)
    rights = linkage[:, 1].astype(np.int64)
    dists = linkage[:, 2]

    def leaves_under(node):
        found, stack = [], [node]
        while stack:
            nd = stack.pop()
            if nd < n:
                found.append(nd)
            else:
                stack.append(lefts[nd - n])
                stack.append(rights[nd - n])
        return found

    root = 2 * n - 2
    relabel = np.full(2 * n - 1, -1, dtype=np.int64)
    relabel[root] = n
    next_label = n + 1
    rows_parent, rows_child, rows_lam, rows_size = [], [], [], []
    # BFS so a node's condensed label exists before its children are visited
    queue = [root]
    ignore = np.zeros(2 * n - 1, dtype=bool)
    while queue:
        node = queue.pop(0)
        if node < n or ignore[node]:
            continue
        left, right = lefts[node - n], rights[node - n]
        dist = dists[node - n]
        lam = 1.0 / dist if dist > 0 else np.inf
        lsize, rsize = sizes[left], sizes[right]
        label_here = relabel[node]

        def fall_out(sub):
            for leaf in leaves_under(sub):
                rows_parent.append(label_here)
                rows_child.append(leaf)
                rows_lam.append(lam)
                rows_size.append(1)
            stack = [sub]
            while stack:
                nd = stack.pop()
                if nd >= n:
                    ignore[nd] = True
                    stack.append(lefts[nd - n])
                    stack.append(rights[nd - n])

        if lsize >= min_cluster_size and rsize >= min_cluster_size:
            for child, csize in ((left, lsize), (right, rsize)):
                if child < n:
                    rows_parent.append(label_here)
                    rows_child.append(child)
                    rows_lam.append(lam)
                    rows_size.append(1)
                else:
                    relabel[child] = next_label
                    rows_parent.append(label_here)
                    rows_child.append(next_label)
                    rows_lam.append(lam)
                    rows_size.append(csize)
                    next_label += 1
                    queue.append(child)
        elif lsize < min_cluster_size and rsize < min_cluster_size:
            fall_out(left)
            fall_out(right)
        elif lsize < min_cluster_size:
            relabel[right] = label_here
            fall_out(left)
            queue.append(right)
        else:
            relabel[left] = label_here
            fall_out(right)
            queue.append(left)
    return (np.asarray(rows_parent, dtype=np.int64), np.asarray(rows_child, dtype=np.int64),
            np.asarray(rows_lam, dtype=np.float64), np.asarray(rows_size, dtype=np.int64), n)


def _eom_select(condensed, min_cluster_size):
    parents, children, lams, sizes, n = condensed
    cluster_ids = np.unique(parents)
    births = {int(c): 0.0 for c in cluster_ids}
    for c, lam in zip(children, lams):
        if c >= n:
            births[int(c)] = float(lam)
    stability = {int(c): 0.0 for c in cluster_ids}
    for p, lam, sz in zip(parents, lams, sizes):
        lam_capped = lam if np.isfinite(lam) else births.get(int(p), 0.0) + 1.0
        stability[int(p)] += (lam_capped - births[int(p)]) * sz
    kids = {}
    for p, c in zip(parents, children):
        if c >= n:
            kids.setdefault(int(p), []).append(int(c))
    is_cluster = {int(c): True for c in cluster_ids}
    root = n
    for node in sorted(is_cluster, reverse=True):
        if node == root:
            continue
        child_stab = sum(stability[c] for c in kids.get(node, []) if c in stability)
        if child_stab > stability[node]:
            stability[node] = child_stab
            is_cluster[node] = False
        else:
            stack = list(kids.get(node, []))
            while stack:
                c = stack.pop()
                if c in is_cluster:
                    is_cluster[c] = False
                stack.extend(k for k in kids.get(c, []))
    return sorted(c for c, flag in is_cluster.items() if flag and c != root)


def hdbscan(points: Tensor, min_cluster_size: int, min_samples: int | None = None,
            core: np.ndarray | None = None) -> ClusterAssignment:
    """Label points with HDBSCAN (excess-of-mass, noise = -1)."""
    x = np.asarray(points)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ConfigError(f"points must be 2-D, got shape {x.shape}")
    n = len(x)
    if min_cluster_size < 2:
        raise ConfigError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if n < min_cluster_size:
        raise ConfigError(f"{n} samples < min_cluster_size {min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size
    edges = mutual_reachability_mst(x, min_samples, core=core)
    if np.all(edges[:, 2] == 0):
        # zero-diameter data: one trivially perfect cluster, nothing is noise
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)
    linkage = single_linkage(edges, n)
    condensed = condense_tree(linkage, n, min_cluster_size)
    selected = _eom_select(condensed, min_cluster_size)
    parents, children, lams, sizes, _ = condensed
    cluster_parent = {int(c): int(p) for p, c in zip(parents, children) if c >= n}
    sel_label = {c: i for i, c in enumerate(selected)}
    sel_set = set(selected)
    labels = np.full(n, -1, dtype=np.int64)
    point_parent = {int(c): int(p) for p, c in zip(parents, children) if c < n}
    for point, par in point_parent.items():
        node = par
        while node is not None:
            if node in sel_set:
                labels[point] = sel_label[node]
                break
            node = cluster_parent.get(node)
    return ClusterAssignment(labels, len(selected))


def hdbscan_config(points: Tensor, config: ClusteringConfig) -> ClusterAssignment:
    n = len(points)
    mcs = config.derived_min_cluster_size(n)
    ms = config.min_samples if config.min_samples is not None else mcs
    return hdbscan(points, mcs, ms)


def kmeans(points: Tensor, k: int, rng: RngState, max_iter: int = 300,
           tol: float = 1e-7) -> tuple[ClusterAssignment, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; returns (assignment, centroids)."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ConfigError(f"k={k} must be in [1, {n}]")
    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = x[first]
    d2 = np.square(x - centers[0]).sum(1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = x[int(rng.integers(0, n))]
            continue
        r = float(rng.uniform((), 0.0, 1.0)) * total
        idx = int(np.searchsorted(np.cumsum(d2), r))
        idx = min(idx, n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, np.square(x - centers[c]).sum(1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.square(x[:, None, :] - centers[None, :, :]).sum(-1) if n * k * x.shape[1] < 5e7 \
            else _blocked_assign(x, centers)
        new_labels = dist.argmin(1) if dist.ndim == 2 else dist
        new_centers = centers.copy()
        for c in range(k):
            members = new_labels == c
            if members.any():
                new_centers[c] = x[members].mean(0)
            else:
                # dead centroid: re-seed from the farthest point
                far = int(np.square(x - centers[new_labels]).sum(1).argmax())
                new_centers[c] = x[far]
                new_labels[far] = c
        shift = np.square(new_centers - centers).sum()
        centers, labels = new_centers, new_labels
        if shift <= tol:
            break
    return ClusterAssignment(labels, k), centers


def _blocked_assign(x, centers):
    n = len(x)
    out = np.empty(n, dtype=np.int64)
    block = max(1, int(2e7 // max(len(centers), 1)))
    csq = np.square(centers).sum(1)
    for s0 in range(0, n, block):
        xb = x[s0:s0 + block]
        d = csq[None, :] - 2.0 * (xb @ centers.T)
        out[s0:s0 + block] = d.argmin(1)
    return out


def cluster_layer_activations(records, config: ClusteringConfig) -> ClusterAssignment:
    """HDBSCAN over one layer's hidden-activation vectors.

    k == 0 (everything noise) means the layer stays dense downstream.
    """
    if len(records) == 0:
        raise ConfigError("no activation records to cluster")
    if len(np.unique(records.layer)) != 1:
        raise ValidationError("records span multiple layers; cluster one layer at a time")
    return hdbscan_config(records.y, config)
