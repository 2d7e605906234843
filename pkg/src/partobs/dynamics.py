"""Best response dynamics, equilibrium computation, and certification.

Under an observation matrix H (exact block averaging or a relaxed point),
agents jointly move by  x(t+1) = max(0, (I - W) H x(t) + b).  With the
off-diagonal row sums of W below 1 this map is a contraction in the
infinity norm with factor g = contraction_factor(W), so the limit exists,
is unique, and is certified by the complementarity conditions

    y = (I - (I - W) H) x* - b,   y >= 0,   x* >= 0,   y^T x* = 0.

Two routes compute it: fixed-point iteration (always applicable, the
certifier of record) and a direct linear solve valid when the solution is
strictly positive (exact to solver precision, preferred when it applies).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game import GameInstance, ValidationError, contraction_factor
from .partitions import ObservationMatrix

#: solutions with a coordinate at or below this are not trusted as interior
INTERIOR_MIN = 1e-10


class ConvergenceError(RuntimeError):
    """Fixed-point iteration failed to reach the requested tolerance."""


@dataclass(frozen=True)
class LcpReport:
    """Complementarity residuals of a candidate equilibrium."""

    min_slack: float            # min_i y_i        (>= -eps at an equilibrium)
    min_action: float           # min_i x_i        (>= 0)
    max_complementarity: float  # max_i |y_i x_i|  (<= eps)

    def within(self, eps: float) -> bool:
        return (
            self.min_slack >= -eps
            and self.min_action >= 0.0
            and self.max_complementarity <= eps
        )


@dataclass(frozen=True)
class EquilibriumResult:
    x_star: np.ndarray
    iterations: int
    method: str                       # "iteration" | "interior-solve"
    lcp: LcpReport
    ratios: tuple[float, ...] = ()    # successive step-size ratios (iteration)
    trace: np.ndarray | None = None   # iterates stacked row-wise, if recorded
    converged: bool = True

    def __post_init__(self):
        x = np.asarray(self.x_star, dtype=float).copy()
        x.setflags(write=False)
        object.__setattr__(self, "x_star", x)


def _h_array(h) -> np.ndarray:
    if isinstance(h, ObservationMatrix):
        return h.matrix
    return np.asarray(h, dtype=float)


def best_response_step(instance: GameInstance, h, x: np.ndarray) -> np.ndarray:
    """One joint move: max(0, (I - W) H x + b)."""
    hm = _h_array(h)
    x = np.asarray(x, dtype=float)
    n = instance.n
    if hm.shape != (n, n) or x.shape != (n,):
        raise ValidationError(
            f"dimension mismatch: H {hm.shape}, x {x.shape}, instance n={n}"
        )
    a = np.eye(n) - instance.w
    return np.maximum(0.0, a @ (hm @ x) + instance.b)


def lcp_residuals(instance: GameInstance, h, x: np.ndarray) -> LcpReport:
    """Residuals of the complementarity certificate at x (any x >= 0)."""
    hm = _h_array(h)
    x = np.asarray(x, dtype=float)
    a = np.eye(instance.n) - instance.w
    y = x - a @ (hm @ x) - instance.b
    return LcpReport(
        min_slack=float(y.min()),
        min_action=float(x.min()),
        max_complementarity=float(np.abs(y * x).max()),
    )


def neumann_approx(instance: GameInstance, h) -> np.ndarray:
    """First-order series approximation (I + (I - W) H) b of the interior
    equilibrium; no positivity clamp, matching its use in the relaxation."""
    hm = _h_array(h)
    a = np.eye(instance.n) - instance.w
    return instance.b + a @ (hm @ instance.b)


def iterate_equilibrium(
    instance: GameInstance,
    h,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 10**6,
    record_trace: bool = False,
) -> EquilibriumResult:
    """Fixed-point iteration of the best response map from x0 (default 0).

    Stops once the step size drops to tol * (1 - g), which leaves the
    returned iterate within tol of the true fixed point by the standard
    contraction bound, or earlier if an exact floating-point fixed point is
    reached.  Raises ConvergenceError when max_iter is exhausted (a sign of
    g near 1 or a tolerance below the rounding floor of the action scale).
    """
    hm = _h_array(h)
    n = instance.n
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if x0 is None:
        x = np.zeros(n)
    else:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (n,):
            raise ValidationError(f"x0 must have length {n}, got shape {x.shape}")
        if np.any(x < 0):
            raise ValidationError("x0 must be nonnegative")
    g = contraction_factor(instance.w)
    threshold = tol * (1.0 - g)
    a = np.eye(n) - instance.w
    trace = [x.copy()] if record_trace else None
    ratios: list[float] = []
    prev_delta = None
    for iteration in range(1, max_iter + 1):
        x_next = np.maximum(0.0, a @ (hm @ x) + instance.b)
        delta = float(np.abs(x_next - x).max())
        if record_trace:
            trace.append(x_next.copy())
        if prev_delta is not None and prev_delta > 0.0:
            ratios.append(delta / prev_delta)
        prev_delta = delta
        exact = delta == 0.0
        x = x_next
        if exact or delta <= threshold:
            return EquilibriumResult(
                x_star=x,
                iterations=iteration,
                method="iteration",
                lcp=lcp_residuals(instance, hm, x),
                ratios=tuple(ratios),
                trace=np.array(trace) if record_trace else None,
            )
    last = ratios[-1] if ratios else float("nan")
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations (last step ratio {last:.6g}, "
        f"last step size {prev_delta:.6g}, threshold {threshold:.6g})"
    )


def interior_solve(instance: GameInstance, h) -> EquilibriumResult | None:
    """Direct solve of (I - (I - W) H) x = b, valid only when x comes out
    strictly positive; returns None otherwise (caller falls back to
    iteration).  One step of iterative refinement keeps the residual near
    machine level so the complementarity products stay tiny even for
    thousand-scale actions.
    """
    hm = _h_array(h)
    n = instance.n
    m = np.eye(n) - (np.eye(n) - instance.w) @ hm
    try:
        x = np.linalg.solve(m, instance.b)
        for _ in range(2):
            r = instance.b - m @ x
            if np.abs(r).max() == 0.0:
                break
            x = x + np.linalg.solve(m, r)
    except np.linalg.LinAlgError as exc:  # not reachable for valid inputs
        raise ConvergenceError(f"linear system singular: {exc}") from exc
    if float(x.min()) <= INTERIOR_MIN:
        return None
    return EquilibriumResult(
        x_star=x,
        iterations=0,
        method="interior-solve",
        lcp=lcp_residuals(instance, hm, x),
    )


def solve_equilibrium(
    instance: GameInstance,
    h,
    tol: float = 1e-10,
    max_iter: int = 10**6,
    record_trace: bool = False,
) -> EquilibriumResult:
    """Canonical equilibrium path: direct solve when interior, iteration
    otherwise (and always when a trace is requested)."""
    if not record_trace:
        result = interior_solve(instance, h)
        if result is not None:
            return result
    return iterate_equilibrium(
        instance, h, tol=tol, max_iter=max_iter, record_trace=record_trace
    )


def write_trajectory_csv(path: str | Path, trace: np.ndarray) -> None:
    """Trajectory as CSV: header t,x1,...,xn, 12 significant digits."""
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 2:
        raise ValidationError(f"trace must be 2-d, got shape {trace.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i + 1}" for i in range(trace.shape[1])])
        for t, row in enumerate(trace):
            writer.writerow([t] + [format(v, ".12g") for v in row])
