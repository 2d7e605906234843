"""Performance metrics at equilibrium and the exhaustive partition oracle.

Two families of metrics are computed at the unique equilibrium x* induced
by a partition: social welfare (sum of payoffs, to maximize) and free
riding (to minimize), the latter in two per-agent variants:

    partial      (b_i - x*_i) / b_i      the partial-observability index
    transparent  (W_i x* - x*_i) / b_i   the fully transparent index

which coincide at interior equilibria of the fully observable game.

The exhaustive search is the ground-truth oracle for partition
optimization: it evaluates every partition (optionally with a minimum
block size), with no pruning beyond infeasible-prefix elimination in the
enumerator, so its correctness is trivial.  Equilibria inside the loop use
the direct interior solve in vectorized batches, falling back to
fixed-point iteration for the partitions whose solution is not strictly
positive; the winner is recomputed and certified through the canonical
path afterwards.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import islice

import numpy as np

from .dynamics import INTERIOR_MIN, ConvergenceError, EquilibriumResult, solve_equilibrium
from .game import GameInstance, ValidationError
from .partitions import Partition, iter_assignments, observation_matrix

#: exhaustive search refuses larger n unless explicitly overridden
MAX_EXHAUSTIVE_N = 14

#: two values this close count as a tie, resolved lexicographically
VALUE_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Metric:
    """What to optimize: 'welfare' (maximize) or 'free_riding' (minimize),
    the latter totalled over all agents or a 0-indexed subset."""

    kind: str
    subset: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("welfare", "free_riding"):
            raise ValidationError(f"unknown metric kind {self.kind!r}")
        if self.subset is not None:
            if self.kind != "free_riding":
                raise ValidationError("subset applies only to free_riding")
            subset = tuple(sorted(int(i) for i in self.subset))
            if not subset:
                raise ValidationError("subset must be nonempty")
            object.__setattr__(self, "subset", subset)

    @property
    def maximize(self) -> bool:
        return self.kind == "welfare"

    def check_against(self, instance: GameInstance) -> None:
        if self.subset is not None:
            bad = [i for i in self.subset if not 0 <= i < instance.n]
            if bad:
                raise ValidationError(f"subset agent {bad[0] + 1} out of range 1..{instance.n}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "subset": None if self.subset is None else [i + 1 for i in self.subset],
        }


def welfare(instance: GameInstance, x: np.ndarray) -> float:
    """Aggregate payoff sum_i S_i(W_i x) - c_i x_i at a joint action x >= 0."""
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n,):
        raise ValidationError(f"x must have length {instance.n}")
    if np.any(x < 0):
        raise ValidationError("x must be nonnegative")
    v = instance.w @ x
    return float(instance.payoff.value(v).sum() - instance.c @ x)


def free_riding(
    instance: GameInstance,
    x: np.ndarray,
    variant: str = "partial",
    subset: tuple[int, ...] | None = None,
) -> tuple[np.ndarray, float]:
    """Per-agent free-riding indices and their total over ``subset``
    (default all agents)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n,):
        raise ValidationError(f"x must have length {instance.n}")
    if variant == "partial":
        per_agent = (instance.b - x) / instance.b
    elif variant == "transparent":
        per_agent = (instance.w @ x - x) / instance.b
    else:
        raise ValidationError(f"unknown free-riding variant {variant!r}")
    idx = slice(None) if subset is None else list(subset)
    return per_agent, float(per_agent[idx].sum())


def metric_value(instance: GameInstance, metric: Metric, x: np.ndarray) -> float:
    if metric.kind == "welfare":
        return welfare(instance, x)
    _, total = free_riding(instance, x, variant="partial", subset=metric.subset)
    return total


def evaluate_partition(
    instance: GameInstance,
    partition: Partition,
    metric: Metric,
    tol: float = 1e-10,
) -> tuple[float, EquilibriumResult]:
    """Metric value at the unique equilibrium induced by the partition."""
    metric.check_against(instance)
    if partition.n != instance.n:
        raise ValidationError(
            f"partition covers {partition.n} agents, instance has {instance.n}"
        )
    h = observation_matrix(partition)
    result = solve_equilibrium(instance, h, tol=tol)
    return metric_value(instance, metric, result.x_star), result


@dataclass(frozen=True)
class SearchReport:
    metric: Metric
    min_block_size: int
    best: Partition
    value: float
    top_k: tuple[tuple[float, Partition], ...]
    partitions_evaluated: int
    wall_seconds: float
    equilibrium: EquilibriumResult

    def to_dict(self) -> dict:
        from .partitions import partition_to_dict

        return {
            "metric": self.metric.to_dict(),
            "L": self.min_block_size,
            "best": partition_to_dict(self.best),
            "value": self.value,
            "top_k": [
                {"value": v, **partition_to_dict(p)} for v, p in self.top_k
            ],
            "partitions_evaluated": self.partitions_evaluated,
            "wall_seconds": self.wall_seconds,
        }


def _batch_iterate(
    instance: GameInstance, h: np.ndarray, tol: float, max_iter: int = 10**6
) -> np.ndarray:
    """Fixed-point iteration run simultaneously over a stack of observation
    matrices, with the same stopping rule as iterate_equilibrium."""
    from .game import contraction_factor

    g = contraction_factor(instance.w)
    threshold = tol * (1.0 - g)
    a_mat = np.eye(instance.n) - instance.w
    ah = a_mat[None, :, :] @ h
    x = np.zeros((h.shape[0], instance.n))
    for _ in range(max_iter):
        x_next = np.maximum(0.0, (ah @ x[:, :, None])[:, :, 0] + instance.b)
        delta = np.abs(x_next - x).max()
        x = x_next
        if delta <= threshold:
            return x
    raise ConvergenceError(
        f"batched iteration did not reach tolerance {tol} in {max_iter} steps"
    )


def _batch_values(
    instance: GameInstance, metric: Metric, assigns: np.ndarray, tol: float
) -> np.ndarray:
    """Metric values for a stack of assignment vectors (batched linear
    solves; batched iteration fallback where not interior)."""
    n = instance.n
    eye = np.eye(n)
    a_mat = eye - instance.w
    same = assigns[:, :, None] == assigns[:, None, :]
    h = same / same.sum(axis=2)[:, :, None]
    m = eye[None, :, :] - a_mat[None, :, :] @ h
    rhs = np.broadcast_to(instance.b, (len(assigns), n))[:, :, None]
    x = np.linalg.solve(m, rhs)[:, :, 0]
    not_interior = np.where(x.min(axis=1) <= INTERIOR_MIN)[0]
    if not_interior.size:
        x[not_interior] = _batch_iterate(instance, h[not_interior], tol)
    if metric.kind == "welfare":
        v = x @ instance.w.T
        values = instance.payoff.value(v.T).sum(axis=0) - x @ instance.c
    else:
        eta = (instance.b[None, :] - x) / instance.b[None, :]
        idx = slice(None) if metric.subset is None else list(metric.subset)
        values = eta[:, idx].sum(axis=1)
    return values


def _search_range(args) -> dict:
    """Evaluate one enumeration sub-range; used serially and by workers."""
    instance, metric, min_block_size, start, stop, top_k, tol = args
    sign = -1.0 if metric.maximize else 1.0
    stream = islice(iter_assignments(instance.n, min_block_size), start, stop)
    best_key = np.inf
    candidates: list[tuple[float, tuple[int, ...]]] = []
    leaders: list[tuple[float, tuple[int, ...]]] = []
    evaluated = 0
    chunk_size = 2048
    while True:
        chunk = list(islice(stream, chunk_size))
        if not chunk:
            break
        values = _batch_values(instance, metric, np.asarray(chunk), tol)
        evaluated += len(chunk)
        keys = sign * values
        for key, assign in zip(keys, chunk):
            if key < best_key:
                best_key = key
            if key <= best_key + VALUE_TIE_TOL:
                candidates.append((float(key), assign))
        if len(candidates) > 64:
            candidates = [c for c in candidates if c[0] <= best_key + VALUE_TIE_TOL]
        order = np.argsort(keys, kind="stable")[:top_k]
        leaders.extend((float(keys[q]), chunk[q]) for q in order)
        leaders.sort()
        del leaders[top_k:]
    candidates = [c for c in candidates if c[0] <= best_key + VALUE_TIE_TOL]
    return {"best_key": best_key, "candidates": candidates, "leaders": leaders,
            "evaluated": evaluated}


def exhaustive_search(
    instance: GameInstance,
    metric: Metric,
    min_block_size: int = 1,
    top_k: int = 5,
    jobs: int = 1,
    allow_large: bool = False,
    tol: float = 1e-10,
) -> SearchReport:
    """Exact optimum over every partition with blocks >= min_block_size.

    Ties within VALUE_TIE_TOL go to the lexicographically smallest
    canonical assignment, so results are reproducible bit-for-bit and
    independent of the degree of parallelism.
    """
    metric.check_against(instance)
    n = instance.n
    if n > MAX_EXHAUSTIVE_N and not allow_large:
        raise ValidationError(
            f"exhaustive search over n={n} agents needs allow_large=True "
            f"(the partition count grows superexponentially)"
        )
    if min_block_size > n:
        raise ValidationError(f"min_block_size {min_block_size} exceeds n={n}")
    start_time = time.perf_counter()
    jobs = max(1, int(jobs))
    if jobs == 1:
        parts = [_search_range((instance, metric, min_block_size, 0, None, top_k, tol))]
    else:
        total = sum(1 for _ in iter_assignments(n, min_block_size))
        bounds = np.linspace(0, total, jobs + 1).astype(int)
        tasks = [
            (instance, metric, min_block_size, int(lo), int(hi), top_k, tol)
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if hi > lo
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_search_range, tasks))
    best_key = min(p["best_key"] for p in parts)
    candidates = [
        c for p in parts for c in p["candidates"] if c[0] <= best_key + VALUE_TIE_TOL
    ]
    best_assignment = min(assign for _, assign in candidates)
    leaders = sorted(x for p in parts for x in p["leaders"])[:top_k]
    sign = -1.0 if metric.maximize else 1.0
    best = Partition(best_assignment)
    value, equilibrium = evaluate_partition(instance, best, metric, tol=tol)
    wall = time.perf_counter() - start_time
    return SearchReport(
        metric=metric,
        min_block_size=min_block_size,
        best=best,
        value=value,
        top_k=tuple((sign * key, Partition(assign)) for key, assign in leaders),
        partitions_evaluated=sum(p["evaluated"] for p in parts),
        wall_seconds=wall,
        equilibrium=equilibrium,
    )


def default_jobs() -> int:
    """Parallelism degree from the PARTOBS_JOBS environment variable."""
    raw = os.environ.get("PARTOBS_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
