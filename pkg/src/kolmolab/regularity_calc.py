"""Pure-arithmetic exponent calculators.

Two families of recursions: the integrability bootstrap

    1/r_{n+1} = (1/r_n)(1 - 1/k) + 1/k - 1/(d+2)

with fixed point (d+2-k)/(d+2), and the level-set (Moser) recursion

    y_{n+1} = (4 nu_d / lbar^2) 2^{2n} y_n^{1+alpha}

whose iterates vanish once y0 is below an explicit threshold.  Rational
inputs are propagated exactly with fractions.Fraction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

from .errors import ParameterDomainError

__all__ = [
    "BootstrapTrace",
    "MoserTrace",
    "hest_exponent",
    "bootstrap_exponents",
    "moser_threshold",
    "moser_sequence",
    "write_trace_csv",
]

Number = Union[int, float, Fraction]


def _to_exact(x: Number) -> Fraction | None:
    """Fraction view of x when it is exactly representable, else None."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        # snap floats like 1.2 to the nearby small-denominator rational so
        # the recursion runs exactly; the snap is well below float noise
        f = Fraction(x)
        g = f.limit_denominator(10**9)
        return g if abs(g - f) < Fraction(1, 10**12) else f
    return None


def hest_exponent(r: Number, k: Number) -> Fraction | float:
    """p = r k / (r + k - 1); exact for rational inputs."""
    if r <= 1:
        raise ParameterDomainError(f"r must exceed 1; got {r}")
    if k <= 1:
        raise ParameterDomainError(f"k must exceed 1; got {k}")
    re, ke = _to_exact(r), _to_exact(k)
    if re is not None and ke is not None:
        return re * ke / (re + ke - 1)
    return float(r) * float(k) / (float(r) + float(k) - 1.0)


@dataclass(frozen=True)
class BootstrapTrace:
    d: int
    k: Fraction
    r_seq: tuple
    p_seq: tuple
    m: int
    limit: Fraction

    def r_floats(self) -> list[float]:
        return [float(r) for r in self.r_seq]


def bootstrap_exponents(d: int, k: Number, r1: Number, target_r: Number) -> BootstrapTrace:
    """Iterate the integrability bootstrap from r1 until r_n >= target_r.

    The reciprocal recursion has fixed point (d+2-k)/(d+2); when that limit
    is positive it caps the reachable exponents at (d+2)/(d+2-k), and
    targets at or beyond the cap are rejected.  When k > d+2 the limit is
    nonpositive and the reciprocals cross zero, so every finite target is
    reached in finitely many steps.
    """
    if d < 1:
        raise ParameterDomainError("d must be a positive integer")
    if k <= 1:
        raise ParameterDomainError(f"k must exceed 1; got {k}")
    ke = _to_exact(k)
    r1e = _to_exact(r1)
    te = _to_exact(target_r)
    if ke is None or r1e is None or te is None:
        raise ParameterDomainError("d, k, r1, target_r must be finite numbers")
    if not 1 < r1e < Fraction(d + 2, d + 1):
        raise ParameterDomainError(
            f"r1 must lie in (1, {Fraction(d + 2, d + 1)}); got {r1}"
        )
    limit = (Fraction(d + 2) - ke) / Fraction(d + 2)
    if limit > 0 and te >= Fraction(d + 2) / (Fraction(d + 2) - ke):
        raise ParameterDomainError(
            f"target_r unreachable: reciprocals converge to {limit}, capping r at {Fraction(d+2)/(Fraction(d+2)-ke)}"
        )

    r_seq = [r1e]
    p_seq = [hest_exponent(r1e, ke)]
    inv = 1 / r1e
    steps = 0
    while r_seq[-1] < te:
        inv = inv * (1 - 1 / ke) + 1 / ke - Fraction(1, d + 2)
        if inv <= 0:
            # exponent escapes to infinity; any finite target is reached
            r_seq.append(te)
            p_seq.append(hest_exponent(te, ke) if te > 1 else p_seq[-1])
            steps += 1
            break
        r_seq.append(1 / inv)
        p_seq.append(hest_exponent(1 / inv, ke))
        steps += 1
        if steps > 10_000:
            raise ParameterDomainError(
                f"target_r unreachable within 10000 steps; reciprocal limit is {limit}"
            )
    return BootstrapTrace(d=d, k=ke, r_seq=tuple(r_seq), p_seq=tuple(p_seq), m=steps, limit=limit)


def moser_threshold(nu_d: float, alpha_m: float) -> tuple[float, float, float]:
    """Level/measure threshold pair (lbar, y0*) plus the sup-norm constant C = 2 lbar."""
    if nu_d <= 0:
        raise ParameterDomainError("nu_d must be positive")
    if alpha_m <= 0:
        raise ParameterDomainError("alpha_m must be positive")
    lbar = max(1.0, 2.0 ** (1.0 + 1.0 / alpha_m) * math.sqrt(nu_d))
    base = 4.0 * nu_d / lbar**2
    y0_star = base ** (-1.0 / alpha_m) * 4.0 ** (-1.0 / alpha_m**2)
    return lbar, y0_star, 2.0 * lbar


@dataclass(frozen=True)
class MoserTrace:
    nu_d: float
    alpha_m: float
    lbar: float
    levels: tuple
    y_seq: tuple
    y0_star: float
    converged: bool


def moser_sequence(nu_d: float, alpha_m: float, y0: float, n_max: int) -> MoserTrace:
    """Worst-case level-set iterates y_{n+1} = (4 nu_d / lbar^2) 2^{2n} y_n^{1+alpha}.

    The verdict is observational: converged when the final iterate is below
    1e-12 or the tail decays geometrically, regardless of whether y0 sits
    below the sufficient threshold y0*.  Seeds above 1 are accepted so the
    divergent regime above the threshold is observable.
    """
    if not y0 >= 0.0:
        raise ParameterDomainError("y0 must be nonnegative")
    if n_max < 1:
        raise ParameterDomainError("n_max must be >= 1")
    lbar, y0_star, _ = moser_threshold(nu_d, alpha_m)
    base = 4.0 * nu_d / lbar**2
    ys = [float(y0)]
    for n in range(n_max):
        try:
            y_next = base * 2.0 ** (2 * n) * ys[-1] ** (1.0 + alpha_m)
        except OverflowError:
            y_next = math.inf
        ys.append(y_next)
        if y_next == 0.0 or y_next > 1e300:
            break
    levels = tuple(2.0 * lbar - lbar * 2.0 ** (-n) for n in range(len(ys)))
    tail = ys[-3:]
    geometric = len(tail) == 3 and tail[2] < 0.5 * tail[1] < 0.25 * tail[0] if len(ys) >= 3 else False
    converged = ys[-1] <= 1e-12 or geometric
    return MoserTrace(
        nu_d=nu_d, alpha_m=alpha_m, lbar=lbar, levels=levels,
        y_seq=tuple(ys), y0_star=y0_star, converged=converged,
    )


def write_trace_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Serialize a (n, value) style trace to CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([str(v) for v in row])
