"""Rounding a relaxed observation matrix to a partition via local
community detection.

The off-diagonal entries of a relaxed optimum H* above a small threshold
form an undirected weighted graph.  Communities are grown greedily from
seeds using the cluster fitness

    f(C) = k_in / (k_in + k_out)^alpha

where k_in counts each internal edge twice (total in-cluster degree) and
k_out is the total weight crossing the boundary.  A node's fitness with
respect to C is f(C with node) - f(C without node); growth adds the
neighbor with the largest positive fitness and then re-scans members,
dropping any whose fitness went negative.  Seeds are the lowest-indexed
uncovered nodes, so the whole procedure is deterministic.

The raw cover may overlap; nodes claimed by several clusters go to the one
where their fitness gain is largest (ties to the earlier cluster).  Blocks
below a required minimum size are repaired by merging the smallest
undersized block into the block it is most strongly connected to.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import ValidationError
from .partitions import ObservationMatrix, Partition

#: default cutoff separating structural entries of H* from solver noise
EDGE_THRESHOLD = 1e-6

#: fill colors for DOT export, cycled block by block
_PALETTE = (
    "#e6a176", "#87b5e5", "#9dd488", "#e88b9d", "#c0a6e0",
    "#ecd078", "#7fd4c1", "#d3a9d3", "#b5c689", "#a2b6c8",
)


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph: symmetric nonnegative matrix, zero diagonal."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"weight matrix must be square, got {w.shape}")
        if np.abs(w - w.T).max() > 0:
            raise ValidationError("weight matrix must be symmetric")
        if w.min() < 0:
            raise ValidationError("edge weights must be nonnegative")
        if np.abs(np.diagonal(w)).max() > 0:
            raise ValidationError("self-loops are not allowed")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_matrix(cls, matrix, threshold: float = EDGE_THRESHOLD) -> "WeightedGraph":
        """Graph on the off-diagonal support of a (relaxed or exact)
        observation matrix, keeping entries strictly above ``threshold``."""
        if isinstance(matrix, ObservationMatrix):
            matrix = matrix.matrix
        m = np.asarray(matrix, dtype=float)
        w = 0.5 * (m + m.T)
        w = np.where(w > threshold, w, 0.0)
        np.fill_diagonal(w, 0.0)
        return cls(w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def degree(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def cluster_fitness(graph: WeightedGraph, cluster, alpha: float = 1.0) -> float:
    """k_in / (k_in + k_out)^alpha for the node set ``cluster``; isolated
    clusters with no incident weight at all score 0."""
    members = sorted(set(int(v) for v in cluster))
    if not members:
        raise ValidationError("cluster must be nonempty")
    w = graph.weights
    k_in = float(w[np.ix_(members, members)].sum())  # counts each edge twice
    total = float(w[members, :].sum())
    k_out = total - k_in
    if k_in + k_out <= 0.0:
        return 0.0
    return k_in / (k_in + k_out) ** alpha


class _Cluster:
    """Mutable cluster with O(n) incremental fitness bookkeeping."""

    def __init__(self, graph: WeightedGraph, seed: int, alpha: float):
        self.w = graph.weights
        self.deg = graph.degree()
        self.alpha = alpha
        self.members: set[int] = {seed}
        self.k_in = 0.0
        self.deg_sum = float(self.deg[seed])

    def _fitness(self, k_in: float, deg_sum: float) -> float:
        # deg_sum = k_in + k_out by the degree convention
        if deg_sum <= 0.0:
            return 0.0
        return k_in / deg_sum**self.alpha

    def fitness(self) -> float:
        return self._fitness(self.k_in, self.deg_sum)

    def _link(self, v: int) -> float:
        idx = sorted(self.members - {v})
        return float(self.w[v, idx].sum()) if idx else 0.0

    def gain_add(self, v: int) -> float:
        link = float(self.w[v, sorted(self.members)].sum())
        return (
            self._fitness(self.k_in + 2.0 * link, self.deg_sum + self.deg[v])
            - self.fitness()
        )

    def gain_keep(self, v: int) -> float:
        """Fitness with v minus fitness without v, for a member v."""
        link = self._link(v)
        return self.fitness() - self._fitness(
            self.k_in - 2.0 * link, self.deg_sum - self.deg[v]
        )

    def add(self, v: int) -> None:
        self.k_in += 2.0 * float(self.w[v, sorted(self.members)].sum())
        self.deg_sum += float(self.deg[v])
        self.members.add(v)

    def remove(self, v: int) -> None:
        self.members.remove(v)
        self.k_in -= 2.0 * self._link(v)
        self.deg_sum -= float(self.deg[v])

    def neighbors(self) -> list[int]:
        idx = sorted(self.members)
        mask = self.w[idx, :].sum(axis=0) > 0.0
        mask[idx] = False
        return list(np.where(mask)[0])


def detect_communities(graph: WeightedGraph, alpha: float = 1.0) -> list[tuple[int, ...]]:
    """Greedy natural communities seeded at the lowest uncovered node.

    Returns a cover of all nodes; clusters may overlap.  The seed of a
    cluster is never removed from it, which guarantees every node ends up
    covered and the outer loop terminates.
    """
    n = graph.n
    covered: set[int] = set()
    clusters: list[tuple[int, ...]] = []
    for seed in range(n):
        if seed in covered:
            continue
        cluster = _Cluster(graph, seed, alpha)
        guard = 0
        while guard < 10 * n * n:
            guard += 1
            best_gain, best_node = 0.0, None
            for v in cluster.neighbors():
                gain = cluster.gain_add(v)
                if gain > best_gain:
                    best_gain, best_node = gain, v
            if best_node is None:
                break
            cluster.add(best_node)
            removing = True
            while removing:
                removing = False
                for v in sorted(cluster.members):
                    if v == seed:
                        continue
                    if cluster.gain_keep(v) < 0.0:
                        cluster.remove(v)
                        removing = True
                        break
        members = tuple(sorted(cluster.members))
        clusters.append(members)
        covered.update(members)
    return clusters


def _resolve_overlaps(graph: WeightedGraph, clusters) -> list[list[int]]:
    """Assign each multiply-claimed node to the claiming cluster it is most
    strongly connected to (total edge weight to the other members), ties to
    the earlier cluster.

    Fitness gain would be the other natural criterion, but it is a relative
    quantity: a node contributes a larger gain to a weaker cluster even
    when its absolute ties there are lighter, which misassigns boundary
    nodes.  Connection weight matches the repair criterion below.
    """
    w = graph.weights
    owner: dict[int, int] = {}
    for k, members in enumerate(clusters):
        for v in members:
            if v not in owner:
                owner[v] = k
                continue
            rest_new = [u for u in members if u != v]
            rest_old = [u for u in clusters[owner[v]] if u != v]
            if float(w[v, rest_new].sum()) > float(w[v, rest_old].sum()):
                owner[v] = k
    blocks: dict[int, list[int]] = {}
    for v in sorted(owner):
        blocks.setdefault(owner[v], []).append(v)
    return [blocks[k] for k in sorted(blocks)]


def round_to_partition(
    h_star,
    min_block_size: int = 1,
    threshold: float = EDGE_THRESHOLD,
    alpha: float = 1.0,
) -> Partition:
    """Partition nearest in structure to a relaxed observation matrix.

    Detect communities on the thresholded support of H*, resolve overlaps
    by connection weight, then repair undersized blocks by repeatedly
    merging the smallest one into the block with which it shares the
    largest total H* weight (ties to the lower-indexed block).
    """
    if isinstance(h_star, ObservationMatrix):
        h_mat = h_star.matrix
    else:
        h_mat = np.asarray(h_star, dtype=float)
    n = h_mat.shape[0]
    if min_block_size > n:
        raise ValidationError(f"min_block_size {min_block_size} exceeds n={n}")
    graph = WeightedGraph.from_matrix(h_mat, threshold)
    clusters = detect_communities(graph, alpha)
    blocks = _resolve_overlaps(graph, clusters)
    connection = 0.5 * (h_mat + h_mat.T)
    while True:
        sizes = [len(b) for b in blocks]
        deficient = [k for k, s in enumerate(sizes) if s < min_block_size]
        if not deficient or len(blocks) == 1:
            break
        k = min(deficient, key=lambda k: (sizes[k], blocks[k][0]))
        weights_to = [
            connection[np.ix_(blocks[k], blocks[j])].sum() if j != k else -np.inf
            for j in range(len(blocks))
        ]
        target = int(np.argmax(weights_to))  # argmax takes the first on ties
        merged = sorted(blocks[k] + blocks[target])
        blocks = [b for j, b in enumerate(blocks) if j not in (k, target)]
        blocks.append(merged)
        blocks.sort(key=lambda b: b[0])
    return Partition.from_blocks(blocks, n=n)


def write_dot(
    path: str | Path,
    graph: WeightedGraph,
    partition: Partition | None = None,
    max_penwidth: float = 5.0,
) -> None:
    """Graphviz DOT export: edge penwidth scales with weight (heaviest edge
    maps to ``max_penwidth``), nodes filled by block color, labels 1-indexed."""
    w = graph.weights
    n = graph.n
    w_max = float(w.max())
    lines = ["graph communities {", "  node [style=filled];"]
    for v in range(n):
        color = "#cccccc"
        if partition is not None:
            color = _PALETTE[partition.assignment[v] % len(_PALETTE)]
        lines.append(f'  {v + 1} [fillcolor="{color}"];')
    for i in range(n):
        for j in range(i + 1, n):
            if w[i, j] > 0.0:
                pen = max_penwidth * w[i, j] / w_max if w_max > 0 else 1.0
                lines.append(f"  {i + 1} -- {j + 1} [penwidth={pen:.3f}];")
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")
