"""Weighted density bounds and the kernel tail envelope.

The weight system consists of three exponentials

    w  = exp(eps0 (t-s)^alpha upsilon),
    W1 = exp(eps1 (t-s)^alpha upsilon),
    W2 = exp(eps2 (t-s)^alpha upsilon),

with eps0 < eps1 < eps2 < delta and k (eps1 - eps0) < eps2 - eps0.  Eight
constants c_1..c_8 are grid suprema of defining ratios (weighted gradient,
generator, time-derivative, drift and divergence bounds); each splits as
c_j = cbar_j (t - b0)^(-r_j) with an explicit r-exponent table.  The kernel
envelope is

    C_tilde [(t-s)^e1 + (t-s)^e2] exp(-delta0 (t-s)^alpha |y|^beta),
    e1 = 1 - alpha k (p v m)/beta,  e2 = 2 - alpha k (p + (m-1)_+)/beta,

with C_tilde always a fitted, never a claimed, constant.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CoefficientEvalError, InputError, ParameterDomainError
from .density_lab import DensityField
from .lyapunov import TimeDependentLyapunov
from .operator_model import CoefficientField, GrowthParams, ShellGrid, spatial_divergence

__all__ = [
    "WeightSystem",
    "KernelEnvelope",
    "envelope_exponents",
    "eval_envelope",
    "canonical_window",
    "weight_constants",
    "localized_constants",
    "general_bound_rhs",
    "fit_tail_decay",
    "verify_envelope_domination",
    "r_exponent_table",
    "write_tail_csv",
]


def envelope_exponents(p: float, m: float, alpha: float, k: float, d: Optional[int] = None):
    """Prefactor exponents (e1, e2) of the kernel envelope."""
    if p <= max(m - 1.0, 1.0):
        raise ParameterDomainError(f"p must exceed max(m-1, 1); got p={p}, m={m}")
    beta = p + 1.0 - m
    if alpha <= beta / (p - 1.0):
        raise ParameterDomainError(f"alpha must exceed (p+1-m)/(p-1) = {beta / (p - 1.0)}; got {alpha}")
    if d is not None and k <= d + 2:
        raise ParameterDomainError(f"k must exceed d+2 = {d + 2}; got {k}")
    e1 = 1.0 - alpha * k * max(p, m) / beta
    e2 = 2.0 - alpha * k * (p + max(m - 1.0, 0.0)) / beta
    return e1, e2


@dataclass(frozen=True)
class KernelEnvelope:
    delta0: float
    alpha: float
    k: float
    p: float
    m: float
    C_tilde: float = 1.0
    fit_provenance: str = "unit"

    @property
    def beta(self) -> float:
        return self.p + 1.0 - self.m

    @property
    def exponents(self):
        return envelope_exponents(self.p, self.m, self.alpha, self.k)

    def shape(self, gap: float, y_norm) -> np.ndarray:
        """Envelope with C_tilde = 1 at time gap t - s."""
        if gap <= 0:
            raise ParameterDomainError(f"time gap must be positive; got {gap}")
        e1, e2 = self.exponents
        pre = gap**e1 + gap**e2
        y = np.asarray(y_norm, dtype=float)
        return pre * np.exp(-self.delta0 * gap**self.alpha * y**self.beta)


def eval_envelope(env: KernelEnvelope, t: float, s: float, y) -> float:
    if not s < t:
        raise ParameterDomainError(f"need s < t; got s={s}, t={t}")
    r = float(np.linalg.norm(np.asarray(y, dtype=float).reshape(-1)))
    return float(env.C_tilde * env.shape(t - s, r))


def canonical_window(s: float, t: float):
    """(a0, b, b0) with b0 - b = (t-s)/6 and t - b0 = (t-s)/2."""
    if not 0.0 < s < t:
        raise ParameterDomainError(f"need 0 < s < t; got s={s}, t={t}")
    a0 = max(s - (t - s) / 2.0, s / 2.0)
    b = s + (t - s) / 3.0
    b0 = s + (t - s) / 2.0
    return a0, b, b0


def r_exponent_table(p: float, m: float, alpha: float, k: float) -> dict:
    """Decay exponents r_j of c_j = cbar_j (t - b0)^(-r_j)."""
    beta = p + 1.0 - m
    r_m1 = alpha * max(m - 1.0, 0.0) / beta
    return {
        1: 0.0,
        2: r_m1,
        3: alpha * max(m - 2.0, 0.0) / beta,
        4: 1.0,
        5: alpha * m / beta,
        6: alpha * k * p / beta,
        7: 0.0,
        8: r_m1,
    }


@dataclass(frozen=True)
class WeightSystem:
    epsilons: tuple  # (eps0, eps1, eps2)
    delta: float
    k: float
    alpha: float
    horizon: float
    window: tuple  # (a0, a, b, b0)
    c: dict  # j -> value
    attained: dict  # j -> (s, x)
    cbar: dict
    r: dict
    c0: float
    sigma: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epsilons": list(self.epsilons),
                "delta": self.delta,
                "k": self.k,
                "alpha": self.alpha,
                "horizon": self.horizon,
                "window": list(self.window),
                "c": {str(j): v for j, v in self.c.items()},
                "cbar": {str(j): v for j, v in self.cbar.items()},
                "r": {str(j): v for j, v in self.r.items()},
                "attained": {
                    str(j): {"s": p[0], "x": list(p[1])} for j, p in self.attained.items()
                },
                "c0": self.c0,
                "sigma": self.sigma,
            },
            sort_keys=True,
            indent=2,
        )


def weight_constants(
    field: CoefficientField,
    params: GrowthParams,
    lyap: TimeDependentLyapunov,
    epsilons: Sequence[float],
    k: float,
    window: Sequence[float],
    grid: ShellGrid,
) -> WeightSystem:
    """Grid suprema of the eight weight-inequality ratios.

    lyap supplies the radial profile, alpha, horizon and delta.  All ratios
    are evaluated through the log of the weights, so the huge exponentials
    never materialize: every ratio is (polynomial factor) * exp(negative
    combination of the eps gaps), finite precisely under the ordering and
    k (eps1 - eps0) < eps2 - eps0 constraints.
    """
    eps0, eps1, eps2 = (float(e) for e in epsilons)
    delta = lyap.delta
    if not 0.0 < eps0 < eps1 < eps2 < delta:
        raise ParameterDomainError(f"need 0 < eps0 < eps1 < eps2 < delta; got {epsilons}, delta={delta}")
    if not k * (eps1 - eps0) < (eps2 - eps0):
        raise ParameterDomainError(
            f"need k (eps1 - eps0) < eps2 - eps0; got k={k}, gaps={(eps1 - eps0, eps2 - eps0)}"
        )
    a0, a, b, b0 = (float(v) for v in window)
    t = lyap.horizon
    if not 0.0 < a0 < a < b < b0 < t:
        raise ParameterDomainError(f"window must satisfy 0 < a0 < a < b < b0 < t; got {window}")
    alpha = lyap.alpha
    prof = lyap.profile

    times = [s for s in grid.times if a0 - 1e-12 <= s <= b0 + 1e-12]
    if not times:
        raise ParameterDomainError("grid contains no times inside [a0, b0]")
    X = grid.points()
    r = np.linalg.norm(X, axis=1)
    ups = prof.u(r)
    g1 = prof.du_over_r(r)
    g2 = prof.d2u(r)
    grad_sq = g1**2 * r**2
    lap = field.d * g1 + (g2 - g1)

    c = {j: 0.0 for j in range(1, 9)}
    attained = {j: (times[0], tuple(X[0])) for j in range(1, 9)}

    def note(j, vals, s):
        i = int(np.argmax(vals))
        v = float(vals[i])
        if not math.isfinite(v):
            raise CoefficientEvalError(f"non-finite c_{j} ratio at s={s}, x={X[i]}", t=s, x=X[i])
        if v > c[j]:
            c[j] = v
            attained[j] = (float(s), tuple(X[i]))

    div_cols = np.empty((len(X), field.d))
    for s in times:
        gam = (t - s) ** alpha
        Q = field.eval_Q_batch(s, X)
        F = field.eval_F_batch(s, X)
        Qx = np.einsum("nij,nj->ni", Q, X)
        Qgrad_norm = g1 * np.linalg.norm(Qx, axis=1)
        qgg = g1**2 * np.einsum("ni,ni->n", Qx, X)
        trQ = np.trace(Q, axis1=1, axis2=2)
        qxx_hat = np.where(r > 0, np.einsum("ni,ni->n", Qx, X) / np.where(r > 0, r**2, 1.0), 0.0)
        a0_ups = g1 * trQ + (g2 - g1) * qxx_hat  # sum q_ij D_ij upsilon
        for i, x in enumerate(X):
            for j in range(field.d):
                div_cols[i, j] = spatial_divergence(field, s, x, j + 1)
        div_max = np.abs(div_cols).max(axis=1)
        Fnorm = np.linalg.norm(F, axis=1)

        e01 = (eps0 - eps1) * gam * ups  # log(w/W1), <= 0
        e02 = (eps0 - eps2) * gam * ups
        e8 = (k * (eps1 - eps0) - (eps2 - eps0)) / k * gam * ups  # log of c8 weight

        note(1, np.exp(e01), s)
        note(2, eps0 * gam * Qgrad_norm * np.exp(e01 / k), s)
        note(3, np.abs(eps0 * gam * a0_ups + (eps0 * gam) ** 2 * qgg) * np.exp(2.0 * e01 / k), s)
        note(4, eps0 * alpha * (t - s) ** (alpha - 1.0) * ups * np.exp(2.0 * e01 / k), s)
        note(5, div_max * np.exp(e02 / k), s)
        note(6, Fnorm**k * np.exp(e02), s)
        note(7, np.abs(eps0 * gam * lap + (eps0 * gam) ** 2 * grad_sq) * np.exp(2.0 * e01 / k), s)
        note(8, eps1 * gam * Qgrad_norm * np.exp(e8), s)

    r_table = r_exponent_table(params.p, params.m, alpha, k)
    cbar = {j: c[j] * (t - b0) ** r_table[j] for j in c}
    sigma = 1.0 - eps2 / delta
    return WeightSystem(
        epsilons=(eps0, eps1, eps2), delta=delta, k=float(k), alpha=alpha, horizon=t,
        window=(a0, a, b, b0), c=c, attained=attained, cbar=cbar, r=r_table,
        c0=1.0, sigma=sigma,
    )


def localized_constants(c, eta: float):
    """(c2~, c3~, c5~) = (2 c2, c3 + eta c7, c5 + 4 c1 c8).

    c is either a mapping j -> c_j (j = 1..8) or a sequence (c1, ..., c8).
    """
    if isinstance(c, dict):
        c = [c[j] for j in range(1, 9)]
    c1, c2, c3, _, c5, _, c7, c8 = (float(v) for v in c)
    return 2.0 * c2, c3 + eta * c7, c5 + 4.0 * c1 * c8


def general_bound_rhs(ws, sup_zeta1: float, int_zeta1: float, int_zeta2: float, C: float):
    """Six-term weighted-density bound; returns (total, per-term breakdown).

    ws may be a WeightSystem or a mapping j -> c_j; the window supplies
    b0 - b (for a WeightSystem) or ws must be paired with one via the
    mapping key "b0_minus_b".
    """
    if isinstance(ws, WeightSystem):
        c = ws.c
        k = ws.k
        gap = ws.window[3] - ws.window[2]
    else:
        c = {j: float(ws[j]) for j in range(1, 9)}
        k = float(ws["k"])
        gap = float(ws["b0_minus_b"])
    if gap <= 0:
        raise ParameterDomainError("need b0 > b")
    terms = {
        "sup_zeta1": c[1] * sup_zeta1,
        "int_zeta2": (c[1] ** k * c[8] ** k + c[2] ** k + c[5] ** k + c[6]) * int_zeta2,
        "int_zeta1_sq": (
            k**k * c[1] ** 2 / gap**k + c[2] ** (2 * k) + c[3] ** k + c[4] ** k + c[7] ** k
        )
        * int_zeta1**2,
        "int_zeta2_sq": c[2] ** k * c[6] * int_zeta2**2,
        "int_zeta2_4k": c[2] ** 2 * c[6] ** (2.0 / k) * int_zeta2 ** (4.0 / k),
        "int_zeta1_4k": (
            k**2 * c[1] ** (4.0 / k) / gap**2 + c[2] ** 4 + c[3] ** 2 + c[4] ** 2 + c[7] ** 2
        )
        * int_zeta1 ** (4.0 / k),
    }
    total = C * sum(terms.values())
    return total, terms


def fit_tail_decay(axis: np.ndarray, values: np.ndarray, beta: float, r0: Optional[float] = None) -> dict:
    """Least squares of log rho against -|y|^beta on the tail |y| >= r0.

    Default r0 is where the slice has dropped three decades below its peak.
    Returns the fitted decay rate delta_hat, intercept, and RMS residual.
    """
    axis = np.asarray(axis, dtype=float)
    values = np.asarray(values, dtype=float)
    if axis.shape != values.shape:
        raise InputError("axis and slice must have matching shapes")
    peak = float(values.max())
    if peak <= 0:
        raise InputError("slice has no positive values")
    if r0 is None:
        above = np.abs(axis)[values >= 1e-3 * peak]
        r0 = float(np.abs(above).max()) if above.size else 0.0
    sel = (np.abs(axis) >= r0) & (values > 1e-300)
    if sel.sum() < 8:
        raise InputError(f"only {int(sel.sum())} usable tail points (need >= 8); widen the box or lower r0")
    x = np.abs(axis[sel]) ** beta
    y = np.log(values[sel])
    coef = np.polyfit(x, y, 1)
    slope, intercept = float(coef[0]), float(coef[1])
    fit = slope * x + intercept
    residual = float(np.sqrt(np.mean((y - fit) ** 2)))
    return {"delta_hat": -slope, "intercept": intercept, "residual": residual, "r0": r0, "n_points": int(sel.sum())}


def verify_envelope_domination(density: DensityField, env: KernelEnvelope) -> dict:
    """Fit C_tilde on the coarsest gap, then check pointwise domination.

    The factor per gap is sup rho / (C_tilde * shape); the check passes when
    every other gap stays within 1.1 (shape stability across gaps).
    """
    gaps = sorted((density.horizon - s for s in density.s_nodes), reverse=True)
    if len(gaps) < 1:
        raise InputError("density carries no slices")
    grids = np.meshgrid(*density.axes, indexing="ij")
    y_norm = np.sqrt(sum(g**2 for g in grids))

    def factor(gap, c_tilde):
        rho = density.slice_at(density.horizon - gap)
        shape = env.shape(gap, y_norm)
        ratio = np.where(rho > 0.0, rho / np.maximum(c_tilde * shape, 1e-300), 0.0)
        return float(np.max(ratio))

    c_tilde = factor(gaps[0], 1.0)
    rows = [{"gap": gaps[0], "factor": 1.0, "pass": True, "role": "fit"}]
    ok = True
    for g in gaps[1:]:
        f = factor(g, c_tilde)
        passed = f <= 1.1
        ok = ok and passed
        rows.append({"gap": g, "factor": f, "pass": passed, "role": "check"})
    return {"C_tilde": c_tilde, "rows": rows, "pass": ok}


def write_tail_csv(path, rows: Sequence[dict]) -> None:
    """Tail fits as CSV (gap, delta_hat, envelope_rate, margin)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gap", "delta_hat", "envelope_rate", "margin"])
        for row in rows:
            w.writerow([repr(float(row[c])) for c in ("gap", "delta_hat", "envelope_rate", "margin")])
