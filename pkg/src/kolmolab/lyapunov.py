"""Exponential Lyapunov functions for superlinearly dissipative operators.

Two objects are built from a radial profile upsilon (|x|^beta outside the
unit ball, even quartic inside, matched C^2):

    V(x)    = exp(delta upsilon(x))                (static)
    W(s, x) = exp(eps (t - s)^alpha upsilon(x))    (time dependent)

The generator is applied to both in closed form via the log-space identity

    A exp(g upsilon) / exp(g upsilon)
        = g [sum_ij q_ij D_ij upsilon + F . grad upsilon]
          + g^2 <Q grad upsilon, grad upsilon>

which keeps the unbounded exponential factor out of the arithmetic until
the final multiplication.  A second "eta-form" replaces Q by eta I in the
second-order part; certificates must hold for both forms.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CertificationError, CoefficientEvalError, ParameterDomainError
from .operator_model import CoefficientField, GrowthParams, ShellGrid, growth_factor

__all__ = [
    "RadialProfile",
    "StaticLyapunov",
    "TimeDependentLyapunov",
    "LyapunovReport",
    "smooth_radial_power",
    "derive_static",
    "derive_time_dependent",
    "apply_generator",
    "generator_ratio",
    "verify_lyapunov",
    "analytic_h_integral",
    "write_h_csv",
]

# exp argument cap: beyond this the value overflows double precision, so
# bounded-above certification must rely on the sign of the ratio instead.
_EXP_CAP = 700.0


@dataclass(frozen=True)
class RadialProfile:
    """Radial function upsilon: |x|^beta for |x| >= 1, quartic inside."""

    beta: float
    a: float
    b_c: float
    c: float

    def u(self, r):
        """upsilon as a function of the radius (vectorized)."""
        r = np.asarray(r, dtype=float)
        inner = self.a + self.b_c * r**2 + self.c * r**4
        outer = np.where(r >= 1.0, r, 1.0) ** self.beta
        return np.where(r < 1.0, inner, outer)

    def du_over_r(self, r):
        """upsilon'(r)/r, finite at r = 0."""
        r = np.asarray(r, dtype=float)
        inner = 2.0 * self.b_c + 4.0 * self.c * r**2
        safe = np.where(r >= 1.0, r, 1.0)
        outer = self.beta * safe ** (self.beta - 2.0)
        return np.where(r < 1.0, inner, outer)

    def d2u(self, r):
        """Second radial derivative upsilon''(r)."""
        r = np.asarray(r, dtype=float)
        inner = 2.0 * self.b_c + 12.0 * self.c * r**2
        safe = np.where(r >= 1.0, r, 1.0)
        outer = self.beta * (self.beta - 1.0) * safe ** (self.beta - 2.0)
        return np.where(r < 1.0, inner, outer)

    def value(self, x) -> float:
        return float(self.u(np.linalg.norm(np.asarray(x, dtype=float).reshape(-1))))

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        r = float(np.linalg.norm(x))
        return float(self.du_over_r(r)) * x

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        d = x.size
        r = float(np.linalg.norm(x))
        g1 = float(self.du_over_r(r))
        g2 = float(self.d2u(r))
        H = g1 * np.eye(d)
        if r > 0.0:
            xh = x / r
            H += (g2 - g1) * np.outer(xh, xh)
        return H


def smooth_radial_power(beta: float) -> RadialProfile:
    """C^2 radial profile equal to |x|^beta outside the unit ball.

    The inner even quartic a + b_c r^2 + c r^4 is the unique one matching
    value and first two radial derivatives at r = 1.
    """
    if beta <= 0:
        raise ParameterDomainError(f"beta must be positive; got {beta}")
    a = 1.0 - (6.0 * beta - beta**2) / 8.0
    b_c = beta * (4.0 - beta) / 4.0
    c = beta * (beta - 2.0) / 8.0
    prof = RadialProfile(beta=float(beta), a=a, b_c=b_c, c=c)
    rs = np.linspace(0.0, 1.0, 257)
    if np.any(prof.u(rs) < -1e-12):
        raise ParameterDomainError(
            f"the C2-matching even quartic is negative inside the unit ball for "
            f"beta={beta}; a nonnegative profile requires beta in (0, 2] or beta >= 4"
        )
    return prof


def generator_ratio(
    field: CoefficientField,
    profile: RadialProfile,
    gamma: float,
    t: float,
    X: np.ndarray,
    form: str = "full",
) -> np.ndarray:
    """(A f)/f for f = exp(gamma upsilon), vectorized over rows of X.

    form "full" uses the operator's Q in the second-order part; form "eta"
    uses eta Laplacian instead (the second inequality of the certificate).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    r = np.linalg.norm(X, axis=1)
    g1 = profile.du_over_r(r)
    g2 = profile.d2u(r)
    F = field.eval_F_batch(t, X)
    drift = g1 * np.einsum("ij,ij->i", F, X)
    if form == "full":
        Q = field.eval_Q_batch(t, X)
        trQ = np.trace(Q, axis1=1, axis2=2)
        qxx = np.einsum("ij,ijk,ik->i", X, Q, X)
        qxx_hat = np.where(r > 0.0, qxx / np.where(r > 0.0, r**2, 1.0), 0.0)
        second = g1 * trQ + (g2 - g1) * qxx_hat
        quad = g1**2 * qxx
    elif form == "eta":
        second = field.eta * (d * g1 + (g2 - g1))
        quad = field.eta * g1**2 * r**2
    else:
        raise ParameterDomainError(f"unknown generator form {form!r}")
    out = gamma * (second + drift) + gamma**2 * quad
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.isfinite(out)))
        raise CoefficientEvalError(
            f"non-finite generator ratio at t={t}, x={X[bad]}", t=t, x=X[bad]
        )
    return out


@dataclass(frozen=True)
class StaticLyapunov:
    profile: RadialProfile
    delta: float
    M: float
    R_cert: float

    def value(self, x) -> float:
        return math.exp(self.delta * self.profile.value(x))

    def log_value(self, x) -> float:
        return self.delta * self.profile.value(x)

    def values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.exp(self.delta * self.profile.u(np.linalg.norm(X, axis=1)))


@dataclass(frozen=True)
class TimeDependentLyapunov:
    profile: RadialProfile
    epsilon: float
    alpha: float
    horizon: float
    delta: float
    h_times: tuple
    h_values: tuple
    h_form: str
    analytic_exponent: float

    def gamma(self, s: float) -> float:
        if s > self.horizon + 1e-12:
            raise ParameterDomainError(f"s={s} exceeds horizon t={self.horizon}")
        return self.epsilon * max(self.horizon - s, 0.0) ** self.alpha

    def log_value(self, s: float, x) -> float:
        return self.gamma(s) * self.profile.value(x)

    def value(self, s: float, x) -> float:
        return math.exp(self.log_value(s, x))

    def values(self, s: float, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.exp(self.gamma(s) * self.profile.u(np.linalg.norm(X, axis=1)))

    def ds_log(self, s: float, x) -> float:
        """d/ds log W = -eps alpha (t-s)^(alpha-1) upsilon(x); always <= 0."""
        gap = max(self.horizon - s, 0.0)
        return -self.epsilon * self.alpha * gap ** (self.alpha - 1.0) * self.profile.value(x)

    def h(self, s: float) -> float:
        times = np.asarray(self.h_times)
        i = int(np.searchsorted(times, s, side="right")) - 1
        if i < 0:
            i = 0
        return float(self.h_values[min(i, len(self.h_values) - 1)])

    def integral_h(self, s: float, t: Optional[float] = None) -> float:
        """Exact integral of the piecewise-constant rate over [s, t]."""
        if t is None:
            t = self.horizon
        if not s <= t <= self.horizon + 1e-12:
            raise ParameterDomainError(f"need s <= t <= horizon; got s={s}, t={t}")
        nodes = list(self.h_times) + [self.horizon]
        total = 0.0
        for i, v in enumerate(self.h_values):
            lo = max(nodes[i], s)
            hi = min(nodes[i + 1], t)
            if hi > lo:
                total += v * (hi - lo)
        return total


def _ratio_max(field, profile, gamma, t, X, *, extra=None):
    """Grid max over both generator forms of ratio (+ optional extra term)."""
    best = -math.inf
    for form in ("full", "eta"):
        vals = generator_ratio(field, profile, gamma, t, X, form=form)
        if extra is not None:
            vals = vals + extra
        best = max(best, float(vals.max()))
    return best


def derive_static(
    field: CoefficientField,
    params: GrowthParams,
    delta_frac: float,
    grid: ShellGrid,
    R_cert: Optional[float] = None,
) -> StaticLyapunov:
    """Pick delta = delta_frac * kappa/(beta Lambda) and certify V = exp(delta upsilon).

    M is the grid maximum (over both generator forms and all grid times) of
    the generator applied to V, floored at 0.  The tail beyond the grid is
    certified by the radial bracket

        B(r) = (d + (beta-2)_+) Lambda (1+r^m)
               + delta beta Lambda r^beta (1+r^m) - kappa r^(p+1)

    which dominates the generator's sign for r >= max(1, K); B must be
    negative and decreasing at R_cert and 2 R_cert.
    """
    if not 0.0 < delta_frac < 1.0:
        raise ParameterDomainError(
            f"delta_frac must lie strictly in (0, 1); got {delta_frac}"
        )
    beta = params.beta
    profile = smooth_radial_power(beta)
    delta = delta_frac * params.kappa / (beta * params.Lambda)

    def bracket(r: float) -> float:
        grow = params.Lambda * growth_factor(params.m, r)
        return (
            (field.d + max(beta - 2.0, 0.0)) * grow
            + delta * beta * params.Lambda * r**beta * growth_factor(params.m, r)
            - params.kappa * r ** (params.p + 1.0)
        )

    if R_cert is None:
        R = max(2.0, params.K, max(grid.radii, default=1.0))
        for _ in range(60):
            if bracket(R) < 0.0 and bracket(2.0 * R) < bracket(R):
                break
            R *= 2.0
        else:
            raise CertificationError("tail bracket never turned negative; check delta < kappa/(beta Lambda)")
        R_cert = R
    if not (bracket(R_cert) < 0.0 and bracket(2.0 * R_cert) < bracket(R_cert)):
        raise CertificationError(
            f"tail bracket not negative and decreasing at R_cert={R_cert}; retry with a larger R_cert"
        )

    X = grid.points()
    r = np.linalg.norm(X, axis=1)
    log_v = delta * profile.u(r)
    safe = log_v <= _EXP_CAP
    M = 0.0
    for t in grid.times:
        for form in ("full", "eta"):
            ratio = generator_ratio(field, profile, delta, t, X, form=form)
            if np.any(ratio[~safe] > 0.0):
                raise CertificationError(
                    "generator positive where exp(delta upsilon) overflows; shrink the grid radius or delta"
                )
            if np.any(safe):
                M = max(M, float(np.max(ratio[safe] * np.exp(log_v[safe]))))
    return StaticLyapunov(profile=profile, delta=delta, M=M, R_cert=float(R_cert))


def derive_time_dependent(
    static: StaticLyapunov,
    field: CoefficientField,
    params: GrowthParams,
    horizon: float,
    eps_frac: float,
    alpha: float,
    grid: ShellGrid,
    safety: float = 1.05,
) -> TimeDependentLyapunov:
    """Build W(s, x) = exp(eps (t-s)^alpha upsilon(x)) with an empirical rate h.

    h is piecewise constant on the grid's time slices: per slice it is the
    safety-factored grid supremum of the positive part of -(d_s W - A W)/W,
    taken over both generator forms, so the certificate holds on the grid by
    construction.  The analytic decay exponent of the rate is recorded for
    comparison.
    """
    beta = params.beta
    threshold = beta / (beta + params.m - 2.0)
    if alpha <= threshold:
        raise ParameterDomainError(
            f"alpha must exceed (p+1-m)/(p-1) = {threshold}; got {alpha}"
        )
    if not 0.0 < eps_frac < 1.0:
        raise ParameterDomainError(f"eps_frac must lie strictly in (0, 1); got {eps_frac}")
    if not 0.0 < horizon <= 1.0:
        raise ParameterDomainError(f"horizon must lie in (0, 1]; got {horizon}")
    epsilon = eps_frac * static.delta

    times = sorted(s for s in grid.times if s < horizon)
    if not times:
        raise ParameterDomainError("grid times must contain at least one s < horizon")
    X = grid.points()
    r = np.linalg.norm(X, axis=1)
    ups = static.profile.u(r)

    h_vals = []
    for s in times:
        gap = horizon - s
        gamma = epsilon * gap**alpha
        # -(d_s W - A W)/W = (A W)/W + eps alpha (t-s)^(alpha-1) upsilon
        extra = epsilon * alpha * gap ** (alpha - 1.0) * ups
        worst = _ratio_max(field, static.profile, gamma, s, X, extra=extra)
        h_vals.append(safety * max(0.0, worst))

    analytic_exponent = alpha - (2.0 * beta + params.m - 2.0) / (beta + params.m - 2.0)
    return TimeDependentLyapunov(
        profile=static.profile,
        epsilon=epsilon,
        alpha=float(alpha),
        horizon=float(horizon),
        delta=static.delta,
        h_times=tuple(times),
        h_values=tuple(h_vals),
        h_form="empirical",
        analytic_exponent=analytic_exponent,
    )


def apply_generator(field: CoefficientField, fn, t: float, x, s: Optional[float] = None) -> float:
    """A(t) applied to V, to W(s, .), or to the constant 1 (fn=None), at x.

    Uses the closed-form radial derivatives of the profile; the exponential
    factor is applied last.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if fn is None:
        return 0.0
    if isinstance(fn, StaticLyapunov):
        gamma = fn.delta
        log_f = fn.delta * fn.profile.value(x[0])
        profile = fn.profile
    elif isinstance(fn, TimeDependentLyapunov):
        if s is None:
            raise ParameterDomainError("s is required when applying the generator to W")
        gamma = fn.gamma(s)
        log_f = gamma * fn.profile.value(x[0])
        profile = fn.profile
    else:
        raise ParameterDomainError(f"unsupported function object {type(fn).__name__}")
    ratio = float(generator_ratio(field, profile, gamma, t, x, form="full")[0])
    val = ratio * math.exp(min(log_f, _EXP_CAP))
    if log_f > _EXP_CAP:
        raise CoefficientEvalError(f"exp overflow applying generator at x={x[0]}", t=t, x=x[0])
    return val


@dataclass(frozen=True)
class LyapunovReport:
    parameters: dict
    violation_count: int
    worst_margin: float
    violations: tuple

    @property
    def passed(self) -> bool:
        return self.violation_count == 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "pass": self.passed,
                "parameters": self.parameters,
                "violation_count": self.violation_count,
                "worst_margin": self.worst_margin,
                "violations": [
                    {"s": v[0], "x": list(v[1]), "margin": v[2]} for v in self.violations
                ],
            },
            sort_keys=True,
            indent=2,
        )


def verify_lyapunov(
    W: TimeDependentLyapunov,
    field: CoefficientField,
    grid: ShellGrid,
    h: Optional[callable] = None,
    tol: float = 1e-12,
    max_recorded: int = 50,
) -> LyapunovReport:
    """Check d_s W - A W >= -h W (both generator forms) on the grid.

    With h=None the weight's own rate is used, which certifies by
    construction on the grid it was derived on.  Violations are recorded
    with margins; a margin is the amount by which -(d_s W - A W)/W exceeds
    h(s).
    """
    X = grid.points()
    r = np.linalg.norm(X, axis=1)
    ups = W.profile.u(r)
    h_fn = h if h is not None else W.h

    count = 0
    worst = 0.0
    recorded = []
    for s in grid.times:
        if s >= W.horizon:
            continue
        gap = W.horizon - s
        gamma = W.epsilon * gap**W.alpha
        extra = W.epsilon * W.alpha * gap ** (W.alpha - 1.0) * ups
        hs = float(h_fn(s))
        for form in ("full", "eta"):
            lhs = generator_ratio(field, W.profile, gamma, s, X, form=form) + extra
            margins = lhs - hs
            bad = margins > tol
            count += int(bad.sum())
            if np.any(bad):
                worst = max(worst, float(margins[bad].max()))
                for i in np.nonzero(bad)[0][: max(0, max_recorded - len(recorded))]:
                    recorded.append((float(s), tuple(X[i]), float(margins[i])))

    return LyapunovReport(
        parameters={
            "beta": W.profile.beta,
            "delta": W.delta,
            "epsilon": W.epsilon,
            "alpha": W.alpha,
            "horizon": W.horizon,
            "h_form": W.h_form if h is None else "supplied",
        },
        violation_count=count,
        worst_margin=worst,
        violations=tuple(recorded),
    )


def analytic_h_integral(C: float, exponent: float, s: float, t: float) -> float:
    """Integral over (s, t) of C (t - tau)^exponent; finite iff exponent > -1."""
    if exponent <= -1.0:
        raise ParameterDomainError(f"exponent must exceed -1 for integrability; got {exponent}")
    if not s < t:
        raise ParameterDomainError("need s < t")
    return C * (t - s) ** (exponent + 1.0) / (exponent + 1.0)


def write_h_csv(path, W: TimeDependentLyapunov) -> None:
    """h samples as CSV column pair (s, h)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s", "h"])
        for s, v in zip(W.h_times, W.h_values):
            w.writerow([repr(float(s)), repr(float(v))])
