"""Partitions of the agent set and their block-averaging observation matrices.

A partition is stored as a restricted-growth assignment: agent 0 is in block
0 and each newly seen block id is one greater than the maximum of the ids
before it.  That form is unique per set partition, hashable, and enumerates
naturally in lexicographic order, which keeps exhaustive search over the
~1.2e5 partitions of 10 agents cheap and duplicate-free.

Agents are 0-indexed throughout the library; all text/JSON interfaces are
1-indexed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import islice
from typing import Iterable, Iterator

import numpy as np

from .game import ValidationError


@dataclass(frozen=True)
class Partition:
    """A set partition of {0..n-1} in canonical restricted-growth form."""

    assignment: tuple[int, ...]

    def __post_init__(self):
        a = tuple(int(v) for v in self.assignment)
        if not a:
            raise ValidationError("partition needs at least one agent")
        seen = 0
        for i, c in enumerate(a):
            if c < 0 or c > seen:
                raise ValidationError(
                    f"assignment {a} is not in restricted-growth form at agent {i + 1}"
                )
            if c == seen:
                seen += 1
        object.__setattr__(self, "assignment", a)

    @classmethod
    def from_blocks(cls, blocks: Iterable[Iterable[int]], n: int | None = None) -> "Partition":
        """Canonicalize raw 0-indexed blocks; they must cover {0..n-1} disjointly.

        Raises naming the offending agent on overlap or gap, and rejects
        empty blocks.
        """
        blocks = [list(block) for block in blocks]
        for block in blocks:
            if not block:
                raise ValidationError("empty block is not allowed")
        owner: dict[int, int] = {}
        for k, block in enumerate(blocks):
            for agent in block:
                agent = int(agent)
                if agent in owner:
                    raise ValidationError(f"agent {agent + 1} appears in more than one block")
                owner[agent] = k
        if n is None:
            n = max(owner) + 1 if owner else 0
        for agent in range(n):
            if agent not in owner:
                raise ValidationError(f"agent {agent + 1} is missing from the blocks")
        extra = [a for a in owner if not 0 <= a < n]
        if extra:
            raise ValidationError(f"agent {min(extra) + 1} is outside 1..{n}")
        relabel: dict[int, int] = {}
        assignment = []
        for agent in range(n):
            k = owner[agent]
            if k not in relabel:
                relabel[k] = len(relabel)
            assignment.append(relabel[k])
        return cls(tuple(assignment))

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def num_blocks(self) -> int:
        return max(self.assignment) + 1

    @property
    def blocks(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.num_blocks)]
        for agent, c in enumerate(self.assignment):
            out[c].append(agent)
        return tuple(tuple(block) for block in out)

    def block_sizes(self) -> np.ndarray:
        return np.bincount(np.asarray(self.assignment), minlength=self.num_blocks)

    def own_block_size(self) -> np.ndarray:
        """Length-n vector whose i-th entry is the size of agent i's block."""
        sizes = self.block_sizes()
        return sizes[np.asarray(self.assignment)]

    def __str__(self) -> str:
        return format_partition(self)


def parse_partition(text: str, n: int | None = None) -> Partition:
    """Parse the 1-indexed block syntax, e.g. ``{1,5,8},{2,9},{3,6,7,10},{4}``."""
    stripped = text.strip()
    if not stripped:
        raise ValidationError("empty partition text")
    pos, blocks = 0, []
    pattern = re.compile(r"\{\s*(\d+(?:\s*,\s*\d+)*)\s*\}")
    while pos < len(stripped):
        if stripped[pos] in ", \t":
            pos += 1
            continue
        match = pattern.match(stripped, pos)
        if match is None:
            raise ValidationError(f"partition parse error at character {pos + 1}: {stripped[pos:pos + 12]!r}")
        members = [int(tok) for tok in match.group(1).split(",")]
        if any(m < 1 for m in members):
            raise ValidationError(f"agent labels are 1-indexed, got {min(members)}")
        blocks.append([m - 1 for m in members])
        pos = match.end()
    return Partition.from_blocks(blocks, n=n)


def format_partition(partition: Partition) -> str:
    """Inverse of parse_partition, blocks in canonical order, members ascending."""
    return ",".join("{" + ",".join(str(a + 1) for a in block) + "}" for block in partition.blocks)


def partition_to_dict(partition: Partition) -> dict:
    return {"blocks": [[a + 1 for a in block] for block in partition.blocks]}


def partition_from_dict(data: dict, n: int | None = None) -> Partition:
    if not isinstance(data, dict) or "blocks" not in data:
        raise ValidationError("partition document must be an object with a 'blocks' list")
    blocks = [[int(a) - 1 for a in block] for block in data["blocks"]]
    return Partition.from_blocks(blocks, n=n)


@dataclass(frozen=True)
class ObservationMatrix:
    """Symmetric doubly-stochastic PSD matrix describing what agents see.

    ``source`` records the provenance: "partition" for an exact
    block-averaging matrix (additionally idempotent with entries in
    {0} | {1/block size}), "relaxed" for a continuous optimizer iterate.
    """

    matrix: np.ndarray
    source: str = "partition"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).copy()
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"observation matrix must be square, got {m.shape}")
        if self.source not in ("partition", "relaxed"):
            raise ValidationError(f"unknown provenance {self.source!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def residuals(self) -> dict[str, float]:
        """Feasibility measures: symmetry gap, row-sum deviation, entry range,
        smallest eigenvalue, and (for partition provenance) idempotence gap."""
        m = self.matrix
        out = {
            "symmetry": float(np.abs(m - m.T).max()),
            "row_sum": float(np.abs(m.sum(axis=1) - 1.0).max()),
            "min_entry": float(m.min()),
            "max_entry": float(m.max()),
            "min_eigenvalue": float(np.linalg.eigvalsh(0.5 * (m + m.T))[0]),
        }
        if self.source == "partition":
            out["idempotence"] = float(np.abs(m @ m - m).max())
        return out

    def validate(self, tol: float = 1e-9) -> None:
        r = self.residuals()
        if r["symmetry"] > tol or r["row_sum"] > tol or r["min_entry"] < -tol:
            raise ValidationError(f"matrix is not doubly stochastic within {tol}: {r}")
        if r["min_eigenvalue"] < -max(tol, 1e-10):
            raise ValidationError(f"matrix is not positive semidefinite: {r}")
        if self.source == "partition" and r["idempotence"] > tol:
            raise ValidationError(f"partition matrix is not idempotent: {r}")


def assignment_matrix(assignment: np.ndarray | tuple[int, ...]) -> np.ndarray:
    """Block-averaging matrix of an assignment vector: 1/(own block size)
    for agents in the same block, 0 elsewhere."""
    a = np.asarray(assignment)
    same = (a[:, None] == a[None, :]).astype(float)
    return same / same.sum(axis=1)[:, None]


def observation_matrix(partition: Partition) -> ObservationMatrix:
    """Exact block-averaging matrix of a partition (symmetric, idempotent)."""
    return ObservationMatrix(assignment_matrix(partition.assignment), source="partition")


def iter_assignments(n: int, min_block_size: int = 1) -> Iterator[tuple[int, ...]]:
    """All canonical assignments of n agents with every block >= min_block_size,
    in lexicographic order.

    Prefixes that cannot be completed (too few agents left to fill deficient
    blocks) are pruned during generation, so e.g. n=10 with minimum size 3
    visits only the 2557 feasible partitions.  Iterative DFS: recursion-free
    so yielding stays O(1) per partition even at millions of partitions.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    if min_block_size < 1:
        raise ValidationError("min_block_size must be at least 1")
    L = min_block_size
    if L > n:
        return
    a = [0] * n
    counts = [0] * n
    nblocks = [0] * (n + 1)   # open blocks before each position
    deficit = [0] * (n + 1)   # unmet minimum-size demand before each position
    next_c = [0] * n
    i = 0
    while True:
        if i == n:
            yield tuple(a)
            i -= 1
            counts[a[i]] -= 1
            next_c[i] = a[i] + 1
            continue
        c = next_c[i]
        advanced = False
        while c <= nblocks[i]:
            opens = c == nblocks[i]
            step = (L - 1) if opens else (-1 if counts[c] < L else 0)
            new_deficit = deficit[i] + step
            if new_deficit <= n - i - 1:
                a[i] = c
                counts[c] += 1
                nblocks[i + 1] = nblocks[i] + (1 if opens else 0)
                deficit[i + 1] = new_deficit
                i += 1
                if i < n:
                    next_c[i] = 0
                advanced = True
                break
            c += 1
        if not advanced:
            i -= 1
            if i < 0:
                return
            counts[a[i]] -= 1
            next_c[i] = a[i] + 1


def count_partitions(n: int, min_block_size: int = 1) -> int:
    """Number of partitions the enumeration will yield (one linear pass)."""
    return sum(1 for _ in iter_assignments(n, min_block_size))


def enumerate_partitions(
    n: int,
    min_block_size: int = 1,
    start: int = 0,
    stop: int | None = None,
) -> Iterator[Partition]:
    """Stream of Partition objects in lexicographic canonical order.

    ``start``/``stop`` select a sub-range by enumeration index so independent
    workers can consume disjoint slices of the same stream.
    """
    for a in islice(iter_assignments(n, min_block_size), start, stop):
        yield Partition(a)
