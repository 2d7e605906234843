"""Game instances: interaction matrix, standalone investments, payoff family.

A game couples an n x n interaction matrix W (unit diagonal, nonnegative
off-diagonal, off-diagonal row sums strictly below 1) with a vector b of
standalone investments and a concave benefit function per agent.  Agent i's
payoff at a joint action x >= 0 is  S_i(W_i x) - c_i * x_i,  where the unit
cost c_i is tied to b_i through the first-order condition S_i'(b_i) = c_i:
b_i is the action an isolated agent would pick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: absolute tolerance for structural checks on exact-decimal inputs
STRUCT_TOL = 1e-12

#: upper end of the generated b range
GENERATED_B_MAX = 1000.0


class ValidationError(ValueError):
    """An instance, partition, or file violates a structural invariant."""


@dataclass(frozen=True)
class SqrtPayoff:
    """Square-root benefit family ``a_i * sqrt(x)`` with per-agent scale a_i > 0.

    Any replacement family must provide the same three methods: the benefit
    ``value``, its ``derivative``, and ``derivative_inverse`` (the map from a
    marginal value back to the action attaining it), all vectorized per agent.
    The family must be strictly increasing and strictly concave on (0, inf)
    with S'(0+) above and lim S'(x) below every relevant unit cost; for the
    root family S'(0+) = inf and S'(inf) = 0, so any c > 0 works.
    """

    scale: np.ndarray

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float)).copy()
        if scale.ndim != 1 or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValidationError("payoff scale must be a vector of positive finite numbers")
        scale.setflags(write=False)
        object.__setattr__(self, "scale", scale)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.sqrt(x)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        return self.scale / (2.0 * np.sqrt(x))

    def derivative_inverse(self, y: np.ndarray) -> np.ndarray:
        return (self.scale / (2.0 * np.asarray(y, dtype=float))) ** 2

    def check_concave_increasing(self, grid: np.ndarray | None = None) -> None:
        """Sample the derivative on a positive grid; raise unless it is
        positive and strictly decreasing (increasing + concave benefit)."""
        if grid is None:
            grid = np.logspace(-3, 4, 29)
        d = self.derivative(grid[:, None])  # grid x agents
        if np.any(d <= 0):
            raise ValidationError("benefit function is not strictly increasing on the grid")
        if np.any(np.diff(d, axis=0) >= 0):
            raise ValidationError("benefit derivative is not strictly decreasing on the grid")


def _payoff_to_dict(payoff: SqrtPayoff) -> dict:
    scale = payoff.scale
    uniform = float(scale[0])
    out = uniform if np.all(scale == uniform) else [float(v) for v in scale]
    return {"family": "sqrt", "scale": out}


def _payoff_from_dict(spec: dict, n: int) -> SqrtPayoff:
    if not isinstance(spec, dict) or spec.get("family") != "sqrt":
        raise ValidationError("payoff spec must be {'family': 'sqrt', 'scale': ...}")
    scale = spec.get("scale")
    if isinstance(scale, (int, float)):
        scale = np.full(n, float(scale))
    else:
        scale = np.asarray(scale, dtype=float)
        if scale.shape != (n,):
            raise ValidationError(f"payoff scale must be a scalar or a length-{n} list")
    return SqrtPayoff(scale)


@dataclass(frozen=True)
class GameInstance:
    """Immutable game data: interaction matrix, standalone investments, payoffs.

    The unit-cost vector c is derived from (payoff, b) at construction via
    c_i = S_i'(b_i), so the two can never drift apart.  All arrays are frozen;
    instances are safe to share across threads and processes.
    """

    w: np.ndarray
    b: np.ndarray
    payoff: SqrtPayoff
    c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).copy()
        b = np.asarray(self.b, dtype=float).copy()
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"W must be square, got shape {w.shape}")
        n = w.shape[0]
        if n < 1:
            raise ValidationError("instance needs at least one agent")
        if b.shape != (n,):
            raise ValidationError(f"b must have length {n}, got shape {b.shape}")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(b)):
            raise ValidationError("W and b must be finite")
        _check_interaction_matrix(w)
        bad = np.where(b <= 0)[0]
        if bad.size:
            raise ValidationError(f"b[{bad[0] + 1}] = {b[bad[0]]!r} must be positive")
        if len(self.payoff.scale) != n:
            raise ValidationError(
                f"payoff scale has {len(self.payoff.scale)} entries for {n} agents"
            )
        self.payoff.check_concave_increasing()
        c = self.payoff.derivative(b)
        for arr in (w, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GameInstance):
            return NotImplemented
        return (
            np.array_equal(self.w, other.w)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.payoff.scale, other.payoff.scale)
        )


def _check_interaction_matrix(w: np.ndarray) -> None:
    n = w.shape[0]
    diag = np.diagonal(w)
    bad = np.where(np.abs(diag - 1.0) > STRUCT_TOL)[0]
    if bad.size:
        i = bad[0] + 1
        raise ValidationError(f"W[{i},{i}] = {diag[bad[0]]!r} must be 1 (tolerance {STRUCT_TOL})")
    off = w - np.diag(diag)
    neg = np.argwhere(off < 0)
    if neg.size:
        i, j = neg[0] + 1
        raise ValidationError(f"W[{i},{j}] = {w[i - 1, j - 1]!r} must be nonnegative")
    row_sums = off.sum(axis=1)
    bad = np.where(row_sums >= 1.0)[0]
    if bad.size:
        i = bad[0]
        raise ValidationError(
            f"row {i + 1} off-diagonal sum {row_sums[i]!r} breaks diagonal dominance (< 1 required)"
        )


def contraction_factor(w: np.ndarray) -> float:
    """Largest off-diagonal row sum of W.

    Because I - W has zero diagonal and off-diagonal magnitudes W_ij, this
    equals the infinity-norm of I - W, the contraction factor of the best
    response map.  Raises unless W is square with unit diagonal, nonnegative
    off-diagonal entries, and every off-diagonal row sum strictly below 1.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"W must be square, got shape {w.shape}")
    _check_interaction_matrix(w)
    off = w - np.diag(np.diagonal(w))
    return float(off.sum(axis=1).max(initial=0.0))


def check_interiority(instance: GameInstance) -> tuple[bool, float]:
    """Sufficient condition for a strictly positive equilibrium.

    Returns ``(holds, margin)`` with margin = min(b) - g/(1-g) * max(b) where
    g is the contraction factor.  The condition is sufficient only: a
    negative margin does not preclude an interior equilibrium.
    """
    g = contraction_factor(instance.w)
    margin = float(instance.b.min() - g / (1.0 - g) * instance.b.max())
    return margin > 0.0, margin


def agent_payoff(instance: GameInstance, i: int, x: np.ndarray) -> float:
    """Payoff S_i(W_i x) - c_i x_i of agent i (0-indexed) at joint action x >= 0."""
    x = np.asarray(x, dtype=float)
    n = instance.n
    if x.shape != (n,):
        raise ValidationError(f"x must have length {n}, got shape {x.shape}")
    if not 0 <= i < n:
        raise IndexError(f"agent index {i} out of range for {n} agents")
    bad = np.where(x < 0)[0]
    if bad.size:
        raise ValidationError(f"x[{bad[0] + 1}] = {x[bad[0]]!r} must be nonnegative")
    effective = float(instance.w[i] @ x)
    benefit = float(instance.payoff.value(np.full(n, effective))[i])
    return benefit - float(instance.c[i] * x[i])


def generate_instance(
    n: int,
    seed: int,
    gamma: float = 0.49,
    rho: float = 0.97,
    density: float = 0.5,
) -> GameInstance:
    """Random instance with contraction factor <= gamma and a guaranteed
    interior equilibrium for every partition.

    Construction (all draws from one seeded generator, so the result is a
    pure function of the arguments): sample an off-diagonal sparsity pattern
    at the given density, weight it uniformly, rescale each nonempty row to
    an off-diagonal sum drawn from [gamma/2, gamma], and draw b uniformly
    from [rho * 1000, 1000].  Requires rho in (gamma/(1-gamma), 1], which
    makes min(b)/max(b) >= rho exceed gamma/(1-gamma): the interiority
    margin is strictly positive by construction rather than by rejection.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"gamma = {gamma!r} must lie in (0, 1)")
    bound = gamma / (1.0 - gamma)
    if not bound < rho <= 1.0:
        raise ValidationError(
            f"rho = {rho!r} must lie in (gamma/(1-gamma), 1] = ({bound:.6g}, 1]"
        )
    if not 0.0 <= density <= 1.0:
        raise ValidationError(f"density = {density!r} must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pattern = rng.random((n, n)) < density
    np.fill_diagonal(pattern, False)
    weights = rng.random((n, n)) * pattern
    targets = rng.uniform(0.5 * gamma, gamma, size=n)
    sums = weights.sum(axis=1)
    nonempty = sums > 0
    scale = np.zeros(n)
    scale[nonempty] = targets[nonempty] / sums[nonempty]
    w = np.eye(n) + weights * scale[:, None]
    b = rng.uniform(rho * GENERATED_B_MAX, GENERATED_B_MAX, size=n)
    return GameInstance(w=w, b=b, payoff=SqrtPayoff(np.full(n, 200.0)))


def instance_to_dict(instance: GameInstance) -> dict:
    return {
        "n": instance.n,
        "W": [[float(v) for v in row] for row in instance.w],
        "b": [float(v) for v in instance.b],
        "payoff": _payoff_to_dict(instance.payoff),
    }


def instance_from_dict(data: dict) -> GameInstance:
    if not isinstance(data, dict):
        raise ValidationError("instance document must be a JSON object")
    try:
        n = int(data["n"])
        w = np.asarray(data["W"], dtype=float)
        b = np.asarray(data["b"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed instance document: {exc}") from exc
    if w.shape != (n, n):
        raise ValidationError(f"W has shape {w.shape}, expected ({n}, {n})")
    if b.shape != (n,):
        raise ValidationError(f"b has length {b.shape}, expected {n}")
    payoff = _payoff_from_dict(data.get("payoff", {"family": "sqrt", "scale": 200.0}), n)
    instance = GameInstance(w=w, b=b, payoff=payoff)
    if "c" in data:
        c = np.asarray(data["c"], dtype=float)
        if c.shape != (n,):
            raise ValidationError(f"c has shape {c.shape}, expected ({n},)")
        mismatch = np.abs(c - instance.c) > 1e-9 * np.maximum(1.0, np.abs(instance.c))
        if np.any(mismatch):
            i = int(np.where(mismatch)[0][0])
            raise ValidationError(
                f"c[{i + 1}] = {c[i]!r} disagrees with S'(b_{i + 1}) = {instance.c[i]!r}"
            )
    return instance


def save_instance(instance: GameInstance, path: str | Path) -> None:
    """Write the instance as canonical JSON (sorted keys, 2-space indent)."""
    doc = json.dumps(instance_to_dict(instance), indent=2, sort_keys=True)
    Path(path).write_text(doc + "\n")


def load_instance(path: str | Path) -> GameInstance:
    """Load and fully validate an instance file; see instance_from_dict."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read instance file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"instance file {path} is not valid JSON: {exc}") from exc
    return instance_from_dict(data)
