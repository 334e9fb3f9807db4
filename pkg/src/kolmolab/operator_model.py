"""Coefficient fields for nonautonomous second-order operators.

The operators handled here act on smooth functions as

    A(t) f = sum_ij q_ij(t, x) D_ij f + F(t, x) . grad f

with a symmetric, uniformly elliptic diffusion matrix Q = (q_ij) and a
possibly superlinear drift F.  This module defines the coefficient-field
container, the built-in polynomial operator family

    Q(t, x) = (1 + |x|^m) Q0(t, x),     F(t, x) = -b(t, x) |x|^(p-1) x,

and grid-based checking of the growth/coercivity conditions the rest of
the package relies on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CoefficientEvalError, ParameterDomainError

__all__ = [
    "CoefficientField",
    "GrowthParams",
    "HypothesisReport",
    "ConditionResult",
    "ShellGrid",
    "shell_grid",
    "constant_b",
    "make_example54",
    "eval_coefficients",
    "spatial_divergence",
    "check_hypotheses",
]

# Central-difference step for the dQ fallback; scaled with |x| so the
# relative truncation error stays balanced over wide radial ranges.
H_FD_BASE = 1e-5


def growth_factor(m: float, r):
    """Radial growth factor 1 + r^m of the diffusion; identically 1 at m = 0.

    The m = 0 member of the polynomial family has constant diffusion Q0, so
    the factor degenerates to 1 rather than 2 there; the same convention is
    used in the growth inequalities so the family meets them with equality.
    """
    if m == 0.0:
        return np.ones_like(np.asarray(r, dtype=float)) if np.ndim(r) else 1.0
    return 1.0 + np.asarray(r, dtype=float) ** m if np.ndim(r) else 1.0 + float(r) ** m


def _as_point(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != d:
        raise ValueError(f"point has dimension {x.size}, field has d={d}")
    return x


def constant_b(value: float) -> Callable[[float, np.ndarray], float]:
    """Convenience wrapper for a constant drift-coercivity profile b."""
    if value < 0:
        raise ParameterDomainError("b must be nonnegative")

    def b(t, x):
        return value

    return b


@dataclass(frozen=True)
class GrowthParams:
    """Growth and coercivity parameters of a coefficient field.

    m is the diffusion growth power, p the drift power, Lambda the common
    growth constant, kappa the drift coercivity constant valid outside the
    ball of radius K, and b the (t, x)-dependent coercivity profile.
    """

    m: float
    p: float
    Lambda: float
    kappa: float
    K: float
    b: Callable[[float, np.ndarray], float]

    def __post_init__(self):
        if self.m < 0:
            raise ParameterDomainError("m must be >= 0")
        if self.p <= max(self.m - 1.0, 1.0):
            raise ParameterDomainError(
                f"p must exceed max(m-1, 1) = {max(self.m - 1.0, 1.0)}; got p={self.p}"
            )
        if self.Lambda <= 0:
            raise ParameterDomainError("Lambda must be positive")
        if self.kappa <= 0:
            raise ParameterDomainError("kappa must be positive")
        if self.K < 1:
            raise ParameterDomainError("K must be >= 1")

    @property
    def beta(self) -> float:
        return self.p + 1.0 - self.m


@dataclass(frozen=True)
class CoefficientField:
    """Immutable coefficient field (Q, F) on [0, 1] x R^d.

    Q and F are pointwise evaluators; Q_batch / F_batch, when present,
    accept an (n, d) array of points and are used by the simulation and
    PDE code paths.  dQ(t, x, i, j, k) returns the spatial derivative
    d q_ij / d x_k when analytic derivatives are available.
    """

    d: int
    Q: Callable[[float, np.ndarray], np.ndarray]
    F: Callable[[float, np.ndarray], np.ndarray]
    eta: float
    dQ: Optional[Callable[[float, np.ndarray, int, int, int], float]] = None
    Q_batch: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    F_batch: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    params: Optional[GrowthParams] = None
    name: str = "custom"

    def eval_Q_batch(self, t: float, X: np.ndarray) -> np.ndarray:
        """Q at every row of X; shape (n, d, d)."""
        X = np.asarray(X, dtype=float)
        if self.Q_batch is not None:
            return np.asarray(self.Q_batch(t, X), dtype=float)
        return np.stack([np.atleast_2d(np.asarray(self.Q(t, x), dtype=float)) for x in X])

    def eval_F_batch(self, t: float, X: np.ndarray) -> np.ndarray:
        """F at every row of X; shape (n, d)."""
        X = np.asarray(X, dtype=float)
        if self.F_batch is not None:
            return np.asarray(self.F_batch(t, X), dtype=float)
        return np.stack([np.asarray(self.F(t, x), dtype=float).reshape(-1) for x in X])


def make_example54(
    d: int,
    m: float,
    p: float,
    Lambda: float = 1.0,
    kappa: float = 1.0,
    K: float = 1.0,
    b: Callable[[float, np.ndarray], float] | float = 1.0,
    Q0: Callable[[float, np.ndarray], np.ndarray] | np.ndarray | float | None = None,
    dQ0: Optional[Callable[[float, np.ndarray, int, int, int], float]] = None,
    eta: Optional[float] = None,
) -> CoefficientField:
    """Build the polynomial operator family

        A(t) f = (1 + |x|^m) Tr(Q0(t, x) D^2 f) - b(t, x) |x|^(p-1) <x, grad f>.

    Q0 may be a constant matrix/scalar or a callable (t, x) -> matrix; when
    constant, analytic diffusion derivatives are populated automatically.
    eta defaults to the smallest eigenvalue of a constant Q0.
    """
    if not isinstance(b, Callable):
        b = constant_b(float(b))
    params = GrowthParams(m=m, p=p, Lambda=Lambda, kappa=kappa, K=K, b=b)

    const_Q0 = None
    if Q0 is None:
        const_Q0 = np.eye(d)
    elif not callable(Q0):
        const_Q0 = np.asarray(Q0, dtype=float) * np.eye(d) if np.ndim(Q0) == 0 else np.asarray(Q0, dtype=float)
        if const_Q0.shape != (d, d):
            raise ParameterDomainError(f"Q0 must be {d}x{d}")
        if not np.allclose(const_Q0, const_Q0.T):
            raise ParameterDomainError("Q0 must be symmetric")

    if eta is None:
        if const_Q0 is None:
            raise ParameterDomainError("eta must be supplied for a callable Q0")
        eta = float(np.linalg.eigvalsh(const_Q0).min())
        if eta <= 0:
            raise ParameterDomainError("constant Q0 must be positive definite")

    def q0_at(t, x):
        if const_Q0 is not None:
            return const_Q0
        return np.asarray(Q0(t, x), dtype=float)

    def Q(t, x):
        x = _as_point(x, d)
        r = float(np.linalg.norm(x))
        return growth_factor(m, r) * q0_at(t, x)

    def F(t, x):
        x = _as_point(x, d)
        r = float(np.linalg.norm(x))
        if r == 0.0:
            return np.zeros(d)
        return -float(b(t, x)) * r ** (p - 1.0) * x

    dQ = None
    if const_Q0 is not None or dQ0 is not None:

        def dQ(t, x, i, j, k):
            x = _as_point(x, d)
            r = float(np.linalg.norm(x))
            q0 = q0_at(t, x)
            # d/dx_k (1+r^m) = m r^(m-2) x_k; zero at the origin for m > 1
            # and identically for m = 0.
            if m == 0.0 or r == 0.0:
                radial = 0.0
            else:
                radial = m * r ** (m - 2.0) * x[k]
            val = radial * q0[i, j]
            if dQ0 is not None:
                val += growth_factor(m, r) * dQ0(t, x, i, j, k)
            return val

    def Q_batch(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.linalg.norm(X, axis=1)
        scale = np.asarray(growth_factor(m, r))
        if const_Q0 is not None:
            return scale[:, None, None] * const_Q0[None, :, :]
        return scale[:, None, None] * np.stack([q0_at(t, x) for x in X])

    def F_batch(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.linalg.norm(X, axis=1)
        bv = np.array([float(b(t, x)) for x in X])
        amp = np.where(r > 0.0, bv * r ** (p - 1.0), 0.0)
        return -amp[:, None] * X

    return CoefficientField(
        d=d, Q=Q, F=F, eta=float(eta), dQ=dQ, Q_batch=Q_batch, F_batch=F_batch,
        params=params, name=f"example54(d={d},m={m},p={p})",
    )


def eval_coefficients(field: CoefficientField, t: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (Q(t, x), F(t, x)), checking symmetry and finiteness."""
    x = _as_point(x, field.d)
    Qm = np.atleast_2d(np.asarray(field.Q(t, x), dtype=float))
    Fv = np.asarray(field.F(t, x), dtype=float).reshape(-1)
    if not (np.all(np.isfinite(Qm)) and np.all(np.isfinite(Fv))):
        raise CoefficientEvalError(f"non-finite coefficients at t={t}, x={x}", t=t, x=x)
    scale = np.abs(Qm).max()
    if scale > 0 and np.abs(Qm - Qm.T).max() > 1e-12 * scale:
        raise CoefficientEvalError(f"Q not symmetric at t={t}, x={x}", t=t, x=x)
    return Qm, Fv


def spatial_divergence(field: CoefficientField, t: float, x, j: int) -> float:
    """sum_i d q_ij / d x_i at (t, x), column index j in 1..d.

    Uses the analytic derivative when the field carries one, otherwise
    central finite differences with radius-scaled step.
    """
    x = _as_point(x, field.d)
    j0 = j - 1
    if not 0 <= j0 < field.d:
        raise ParameterDomainError(f"column index j must be in 1..{field.d}")
    if field.dQ is not None:
        total = sum(field.dQ(t, x, i, j0, i) for i in range(field.d))
    else:
        total = 0.0
        for i in range(field.d):
            h = max(H_FD_BASE, H_FD_BASE * abs(x[i]))
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            qp = np.atleast_2d(np.asarray(field.Q(t, xp), dtype=float))[i, j0]
            qm = np.atleast_2d(np.asarray(field.Q(t, xm), dtype=float))[i, j0]
            total += (qp - qm) / (2.0 * h)
    total = float(total)
    if not math.isfinite(total):
        raise CoefficientEvalError(f"non-finite divergence at t={t}, x={x}", t=t, x=x)
    return total


@dataclass(frozen=True)
class ShellGrid:
    """Tensor grid of times with radial shells (directions x radii)."""

    times: tuple[float, ...]
    radii: tuple[float, ...]
    directions: tuple[tuple[float, ...], ...]

    def points(self) -> np.ndarray:
        """All spatial points, shape (n_radii * n_directions [+1], d)."""
        dirs = np.asarray(self.directions, dtype=float)
        pts = [r * u for r in self.radii for u in dirs]
        pts.append(np.zeros(dirs.shape[1]))
        return np.asarray(pts)

    def describe(self) -> dict:
        return {
            "n_times": len(self.times),
            "n_radii": len(self.radii),
            "n_directions": len(self.directions),
            "r_max": max(self.radii) if self.radii else 0.0,
        }


def shell_grid(
    d: int,
    times: Sequence[float],
    radii: Sequence[float],
    n_directions: int = 8,
    seed: int = 0,
) -> ShellGrid:
    """Deterministic shell grid: coordinate axes plus seeded sphere points."""
    dirs = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        dirs.append(e.copy())
        dirs.append(-e)
    if d > 1:
        rng = np.random.Generator(np.random.Philox(key=seed))
        while len(dirs) < max(n_directions, 2 * d):
            v = rng.standard_normal(d)
            n = np.linalg.norm(v)
            if n > 1e-8:
                dirs.append(v / n)
    return ShellGrid(
        times=tuple(float(t) for t in times),
        radii=tuple(float(r) for r in radii),
        directions=tuple(tuple(v) for v in dirs),
    )


@dataclass(frozen=True)
class ConditionResult:
    condition_id: str
    passed: bool
    worst_value: float
    worst_point: tuple


@dataclass(frozen=True)
class HypothesisReport:
    conditions: tuple[ConditionResult, ...]
    grid: dict
    verdict: bool

    def to_json(self) -> str:
        doc = {
            "verdict": "pass" if self.verdict else "fail",
            "grid": self.grid,
            "conditions": {
                c.condition_id: {
                    "pass": bool(c.passed),
                    "worst_value": c.worst_value,
                    "worst_point": {"t": c.worst_point[0], "x": list(c.worst_point[1])},
                }
                for c in self.conditions
            },
        }
        return json.dumps(doc, sort_keys=True, indent=2)


# Relative slack for conditions the built-in family satisfies with equality.
_EQ_SLACK = 1e-9


def check_hypotheses(
    field: CoefficientField,
    params: GrowthParams,
    grid: ShellGrid,
    probes: Optional[Sequence[Sequence[float]]] = None,
) -> HypothesisReport:
    """Grid-certify ellipticity and the growth/coercivity inequalities.

    Six conditions are checked at every grid node.  The report is advisory:
    violations are recorded with their worst margin, never raised.  For the
    upper-bound conditions the recorded value is lhs - rhs (positive means
    violated); for ellipticity it is the worst normalized margin
    <Q xi, xi>/|xi|^2 - eta (negative means violated).
    """
    if not grid.times or not grid.radii:
        raise ParameterDomainError("grid must contain at least one time and one radius")
    if probes is None:
        probes = grid.directions
    probes = [np.asarray(p, dtype=float) for p in probes]

    worst = {
        "ellipticity": (math.inf, None),
        "q_radial_growth": (-math.inf, None),
        "q_quadratic_growth": (-math.inf, None),
        "dq_growth": (-math.inf, None),
        "drift_growth_B1": (-math.inf, None),
        "drift_coercive_B2B3": (-math.inf, None),
    }

    def note_max(key, value, t, x):
        if value > worst[key][0]:
            worst[key] = (value, (t, tuple(x)))

    def note_min(key, value, t, x):
        if value < worst[key][0]:
            worst[key] = (value, (t, tuple(x)))

    pts = grid.points()
    for t in grid.times:
        for x in pts:
            Qm, Fv = eval_coefficients(field, t, x)
            r = float(np.linalg.norm(x))
            gro = params.Lambda * growth_factor(params.m, r)

            for xi in probes:
                quad = float(xi @ Qm @ xi) / float(xi @ xi)
                note_min("ellipticity", quad - field.eta, t, x)
                note_max("q_quadratic_growth", quad - gro, t, x)

            note_max("q_radial_growth", float(np.linalg.norm(Qm @ x)) - gro * r, t, x)

            dq_worst = max(
                abs(_entry_derivative(field, t, x, i, j, k))
                for i in range(field.d)
                for j in range(field.d)
                for k in range(field.d)
            )
            note_max("dq_growth", dq_worst - gro, t, x)

            note_max("drift_growth_B1", float(np.linalg.norm(Fv)) - params.Lambda * r**params.p, t, x)

            bv = float(params.b(t, x))
            v = float(Fv @ x) + bv * r ** (params.p + 1.0)
            if bv < 0:
                v = max(v, -bv)
            if r >= params.K and bv < params.kappa:
                v = max(v, params.kappa - bv)
            note_max("drift_coercive_B2B3", v, t, x)

    conditions = []
    for key, (value, point) in worst.items():
        if key == "ellipticity":
            passed = value >= -_EQ_SLACK * max(1.0, field.eta)
        else:
            passed = value <= _EQ_SLACK * max(1.0, params.Lambda)
        conditions.append(ConditionResult(key, passed, float(value), point))

    return HypothesisReport(
        conditions=tuple(conditions),
        grid=grid.describe(),
        verdict=all(c.passed for c in conditions),
    )


def _entry_derivative(field, t, x, i, j, k) -> float:
    if field.dQ is not None:
        return float(field.dQ(t, x, i, j, k))
    h = max(H_FD_BASE, H_FD_BASE * abs(x[k]))
    xp = x.copy()
    xm = x.copy()
    xp[k] += h
    xm[k] -= h
    qp = np.atleast_2d(np.asarray(field.Q(t, xp), dtype=float))[i, j]
    qm = np.atleast_2d(np.asarray(field.Q(t, xm), dtype=float))[i, j]
    return float((qp - qm) / (2.0 * h))
