"""Truncation of unbounded diffusion coefficients.

The approximating matrices blend the original diffusion with its ellipticity
floor through a cutoff driven by a time-dependent exponential weight W1:

    phi_n(s, x) = phi(W1(s, x) / n),
    Q_n(s, x)   = phi_n Q(s, x) + (1 - phi_n) eta I,

so Q_n equals Q where W1 <= n, equals eta I where W1 >= 2n, and stays
symmetric and eta-elliptic everywhere (convex combination of two matrices
with those properties).  The drift is left untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterDomainError
from .lyapunov import StaticLyapunov, TimeDependentLyapunov, generator_ratio
from .operator_model import CoefficientField, ShellGrid

__all__ = [
    "CutoffProfile",
    "ApproximationScheme",
    "make_cutoff",
    "approx_coefficients",
    "truncated_field",
    "verify_approx",
]


@dataclass(frozen=True)
class CutoffProfile:
    """Smooth cutoff with exact plateau [0, 1] and exact support [0, 2]."""

    grid: np.ndarray
    values: np.ndarray
    slope_bound: float

    def __call__(self, tau):
        tau = np.abs(np.asarray(tau, dtype=float))
        out = np.interp(tau, self.grid, self.values, left=1.0, right=0.0)
        # the profile is exactly 1 on [0, 1] and 0 on [2, inf); snap those
        # regions so grid interpolation cannot introduce one-ulp wobble
        out = np.where(tau <= 1.0, 1.0, out)
        out = np.where(tau >= 2.0, 0.0, out)
        return out


# Core ramp interval (plateau_edge, support_edge) and mollifier half-width.
# The ramp is logarithmic so tau * phi'(tau) is constant on the core:
# |tau phi'| = 1/ln(support_edge/plateau_edge) ~ 1.62, under the required 2;
# symmetric smoothstep ramps violate that product bound (~2.25 at midpoint).
_PLATEAU = 1.05
_SUPPORT = 1.95
_MOLL_HW = 0.05


def make_cutoff(n_grid: int = 8192, n_check: int = 10_000) -> CutoffProfile:
    """Construct the fixed cutoff profile and certify its slope bound.

    A log ramp on (1.05, 1.95) is mollified with a C-infinity bump of
    half-width 0.05, which keeps phi = 1 on [0, 1] and phi = 0 beyond 2
    exactly while smoothing the junctions.  The bound sup |tau phi'| <= 2
    is verified on a fine grid at construction.
    """
    lo, hi = 0.0, 2.5
    taus = np.linspace(lo, hi, n_grid)
    dtau = taus[1] - taus[0]
    L = math.log(_SUPPORT / _PLATEAU)

    raw = np.ones_like(taus)
    ramp = (taus > _PLATEAU) & (taus < _SUPPORT)
    raw[ramp] = 1.0 - np.log(taus[ramp] / _PLATEAU) / L
    raw[taus >= _SUPPORT] = 0.0

    half = int(round(_MOLL_HW / dtau))
    z = np.linspace(-1.0, 1.0, 2 * half + 1)
    with np.errstate(divide="ignore", over="ignore"):
        bump = np.where(np.abs(z) < 1.0, np.exp(-1.0 / np.maximum(1.0 - z**2, 1e-300)), 0.0)
    bump /= bump.sum()
    # edge-padded convolution: raw is constant near both ends of the grid
    padded = np.concatenate([np.full(half, 1.0), raw, np.zeros(half)])
    vals = np.convolve(padded, bump, mode="valid")
    vals = np.clip(vals, 0.0, 1.0)
    vals[taus <= 1.0] = 1.0
    vals[taus >= 2.0] = 0.0

    prof = CutoffProfile(grid=taus, values=vals, slope_bound=0.0)
    check = np.linspace(lo, hi, n_check)
    phi = prof(check)
    dphi = np.gradient(phi, check)
    bound = float(np.max(np.abs(check * dphi)))
    if bound > 2.0:
        raise ParameterDomainError(f"cutoff slope bound violated: sup|tau phi'| = {bound}")
    return CutoffProfile(grid=taus, values=vals, slope_bound=bound)


@dataclass(frozen=True)
class ApproximationScheme:
    n: int
    base: CoefficientField
    W1: TimeDependentLyapunov
    cutoff: CutoffProfile

    def __post_init__(self):
        if self.n < 1:
            raise ParameterDomainError("truncation level n must be a positive integer")

    def phi_n(self, s: float, X) -> np.ndarray:
        """phi(W1(s, x)/n), computed through log W1 to dodge exp overflow."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        gamma = self.W1.gamma(s)
        log_ratio = gamma * self.W1.profile.u(np.linalg.norm(X, axis=1)) - math.log(self.n)
        return self.cutoff(np.exp(np.minimum(log_ratio, 50.0)))


def approx_coefficients(scheme: ApproximationScheme, s: float, x) -> np.ndarray:
    """Q_n(s, x) = phi_n Q + (1 - phi_n) eta I."""
    x = np.asarray(x, dtype=float).reshape(-1)
    phi = float(scheme.phi_n(s, x[None, :])[0])
    Q = np.atleast_2d(np.asarray(scheme.base.Q(s, x), dtype=float))
    return phi * Q + (1.0 - phi) * scheme.base.eta * np.eye(scheme.base.d)


def truncated_field(scheme: ApproximationScheme) -> CoefficientField:
    """Coefficient field with the blended diffusion and the original drift."""
    base = scheme.base

    def Q(t, x):
        return approx_coefficients(scheme, t, x)

    def Q_batch(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        phi = scheme.phi_n(t, X)
        Qb = base.eval_Q_batch(t, X)
        eye = base.eta * np.eye(base.d)
        return phi[:, None, None] * Qb + (1.0 - phi)[:, None, None] * eye[None, :, :]

    return CoefficientField(
        d=base.d, Q=Q, F=base.F, eta=base.eta,
        Q_batch=Q_batch, F_batch=base.F_batch,
        params=base.params, name=f"{base.name}|truncated(n={scheme.n})",
    )


def verify_approx(scheme: ApproximationScheme, V: StaticLyapunov, grid: ShellGrid) -> dict:
    """Grid checks on the truncated coefficients.

    Verifies: symmetry and eta-ellipticity of Q_n, boundedness of Q_n on the
    grid, the generator bound A_n V <= M with the base field's M, and that
    the rate of W1 still certifies W1 for the truncated operator (the
    blended generator is a convex combination of the two certified forms).
    """
    field_n = truncated_field(scheme)
    X = grid.points()
    r = np.linalg.norm(X, axis=1)
    ups = V.profile.u(r)
    log_v = V.delta * ups
    safe = log_v <= 700.0

    ell_margin = math.inf
    sym_err = 0.0
    q_sup = 0.0
    gen_margin = -math.inf
    w1_margin = -math.inf
    for t in grid.times:
        Qn = field_n.eval_Q_batch(t, X)
        sym_err = max(sym_err, float(np.abs(Qn - np.transpose(Qn, (0, 2, 1))).max()))
        eigs = np.linalg.eigvalsh(Qn)
        ell_margin = min(ell_margin, float(eigs.min() - field_n.eta))
        q_sup = max(q_sup, float(np.abs(Qn).max()))

        for form in ("full", "eta"):
            ratio = generator_ratio(field_n, V.profile, V.delta, t, X, form=form)
            vals = ratio[safe] * np.exp(log_v[safe])
            if vals.size:
                gen_margin = max(gen_margin, float(vals.max()) - V.M)
            if np.any(ratio[~safe] > 0.0):
                gen_margin = max(gen_margin, math.inf)

        if t < scheme.W1.horizon:
            gap = scheme.W1.horizon - t
            gamma = scheme.W1.gamma(t)
            extra = scheme.W1.epsilon * scheme.W1.alpha * gap ** (scheme.W1.alpha - 1.0) * ups
            hs = scheme.W1.h(t)
            for form in ("full", "eta"):
                lhs = generator_ratio(field_n, V.profile, gamma, t, X, form=form) + extra
                w1_margin = max(w1_margin, float(lhs.max()) - hs)

    checks = {
        "symmetry": {"margin": sym_err, "pass": sym_err <= 1e-12 * max(1.0, q_sup)},
        "ellipticity": {"margin": ell_margin, "pass": ell_margin >= -1e-10},
        "q_bounded": {"sup": q_sup, "pass": math.isfinite(q_sup)},
        "generator_bound": {"margin": gen_margin, "pass": gen_margin <= 1e-9 * max(1.0, V.M)},
        "w1_same_rate": {"margin": w1_margin, "pass": w1_margin <= 1e-9},
    }
    return {
        "n": scheme.n,
        "checks": checks,
        "pass": all(c["pass"] for c in checks.values()),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=float)
