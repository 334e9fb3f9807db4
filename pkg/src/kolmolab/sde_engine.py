"""Monte Carlo engine for the diffusion dX = F dt + sigma dB, sigma sigma^T = 2Q.

The generator sum_ij q_ij D_ij + F . grad carries no 1/2, so the SDE
diffusion factor must satisfy sigma sigma^T = 2Q; this convention is applied
in exactly one place (diffusion_factor).

Schemes: tamed Euler (default; drift increment F dt / (1 + dt |F|), stable
under superlinear dissipative drift), plain Euler (explosions recorded per
path), and a semi-implicit drift corrector.  Paths are chunked and each path
draws from its own counter-based stream keyed by (master seed, path index),
so ensembles are bitwise reproducible for any thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .errors import FactorizationError, ParameterDomainError, SimulationError
from .operator_model import CoefficientField

__all__ = [
    "SimulationPlan",
    "PathEnsemble",
    "MomentCurve",
    "diffusion_factor",
    "simulate_paths",
    "moment_curve",
    "verify_moment_bound",
    "write_ensemble_csv",
    "write_moment_csv",
]

CHUNK = 8192

_SCHEMES = ("tamed-euler", "euler", "semi-implicit-drift")


@dataclass(frozen=True)
class SimulationPlan:
    field: CoefficientField
    s: float
    t: float
    x0: np.ndarray
    N: int
    dt: float
    scheme: str = "tamed-euler"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.s < self.t <= 1.0:
            raise ParameterDomainError(f"need 0 <= s < t <= 1; got s={self.s}, t={self.t}")
        if self.N < 1:
            raise ParameterDomainError("N must be >= 1")
        if self.dt <= 0:
            raise ParameterDomainError("dt must be positive")
        if self.scheme not in _SCHEMES:
            raise ParameterDomainError(f"scheme must be one of {_SCHEMES}; got {self.scheme!r}")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        if self.x0.size != self.field.d:
            raise ParameterDomainError(f"x0 must have dimension {self.field.d}")


@dataclass(frozen=True)
class PathEnsemble:
    plan: SimulationPlan
    terminal: np.ndarray
    explosion_count: int
    max_abs: float
    slices: Optional[dict] = None

    @property
    def N(self) -> int:
        return self.terminal.shape[0]


def diffusion_factor(Qmat: np.ndarray) -> np.ndarray:
    """Lower-triangular sigma with sigma sigma^T = 2 Q."""
    Qmat = np.atleast_2d(np.asarray(Qmat, dtype=float))
    if Qmat.shape[0] != Qmat.shape[1]:
        raise FactorizationError("matrix must be square")
    if np.abs(Qmat - Qmat.T).max() > 1e-10 * max(1.0, np.abs(Qmat).max()):
        raise FactorizationError("matrix must be symmetric")
    try:
        return np.linalg.cholesky(2.0 * Qmat)
    except np.linalg.LinAlgError:
        # locate the offending leading minor for the error message
        for k in range(1, Qmat.shape[0] + 1):
            if np.linalg.det(2.0 * Qmat[:k, :k]) <= 0:
                raise FactorizationError(
                    f"matrix is not positive definite: leading {k}x{k} minor is nonpositive"
                ) from None
        raise FactorizationError("matrix is not positive definite") from None


def _batch_cholesky(Q: np.ndarray) -> np.ndarray:
    """Cholesky of 2Q for a stack of matrices; names the first bad path."""
    try:
        return np.linalg.cholesky(2.0 * Q)
    except np.linalg.LinAlgError:
        for i, q in enumerate(Q):
            try:
                np.linalg.cholesky(2.0 * q)
            except np.linalg.LinAlgError:
                raise FactorizationError(
                    f"diffusion matrix not positive definite along a path (chunk row {i})"
                ) from None
        raise


def _drift_increment(F: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    if scheme == "tamed-euler":
        norm = np.linalg.norm(F, axis=1, keepdims=True)
        return F * dt / (1.0 + dt * norm)
    return F * dt


def _simulate_chunk(plan: SimulationPlan, lo: int, hi: int, slice_times: Sequence[float]):
    """Advance paths lo..hi-1; returns (terminal, explosions, max_abs, slices)."""
    field = plan.field
    d = field.d
    n = hi - lo
    nsteps = max(1, int(round((plan.t - plan.s) / plan.dt)))
    dt = (plan.t - plan.s) / nsteps

    # one counter-based stream per path, keyed so streams never collide
    noise = np.empty((n, nsteps, d))
    for i in range(n):
        g = np.random.Generator(np.random.Philox(key=plan.seed + ((lo + i) << 64)))
        noise[i] = g.standard_normal((nsteps, d))

    X = np.tile(plan.x0, (n, 1))
    alive = np.ones(n, dtype=bool)
    max_abs = float(np.abs(X).max())
    sqdt = math.sqrt(dt)
    slice_idx = {
        st: min(nsteps, max(0, int(round((st - plan.s) / dt)))) for st in slice_times
    }
    slices = {}

    # constant diffusion (common: the oracles and the m=0 family) needs one
    # factorization; otherwise refactor every step
    probe_a = field.eval_Q_batch(plan.s, np.tile(plan.x0, (1, 1)))
    probe_b = field.eval_Q_batch(plan.t, np.tile(plan.x0 + 1.0, (1, 1)))
    q_constant = np.allclose(probe_a, probe_b, rtol=1e-13, atol=1e-13)
    sig = np.broadcast_to(_batch_cholesky(probe_a)[0], (n, d, d)) if q_constant else None
    for k in range(nsteps):
        tk = plan.s + k * dt
        F = field.eval_F_batch(tk, X)
        if not q_constant:
            sig = _batch_cholesky(field.eval_Q_batch(tk, X))
        if plan.scheme == "semi-implicit-drift":
            # damped corrector: drift evaluated at a provisional midpoint
            Xp = X + F * dt
            Fp = field.eval_F_batch(tk, Xp)
            drift = 0.5 * (F + Fp) * dt / (1.0 + dt * np.linalg.norm(Fp, axis=1, keepdims=True))
        else:
            drift = _drift_increment(F, dt, plan.scheme)
        step = drift + sqdt * np.einsum("nij,nj->ni", sig, noise[:, k, :])
        Xn = np.where(alive[:, None], X + step, X)
        finite = np.all(np.isfinite(Xn), axis=1) & (np.linalg.norm(Xn, axis=1) < 1e12)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            alive = alive & finite  # freeze exploded paths at their last finite state
            Xn = np.where(finite[:, None], Xn, X)
        X = Xn
        ma = float(np.abs(X[alive]).max()) if np.any(alive) else max_abs
        max_abs = max(max_abs, ma)
        for st, idx in slice_idx.items():
            if idx == k + 1:
                slices[st] = X.copy()
    for st, idx in slice_idx.items():
        if idx == 0:
            slices[st] = np.tile(plan.x0, (n, 1))
    explosions = int(n - alive.sum())
    return X, explosions, max_abs, slices


def simulate_paths(
    plan: SimulationPlan,
    slice_times: Sequence[float] = (),
    threads: int = 1,
) -> PathEnsemble:
    """Run the ensemble; results are a pure function of (plan, seed).

    Chunks of fixed size are processed independently (optionally across a
    thread pool) and reassembled in path order, so the thread count never
    changes the output.
    """
    bounds = [(lo, min(lo + CHUNK, plan.N)) for lo in range(0, plan.N, CHUNK)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda b: _simulate_chunk(plan, b[0], b[1], slice_times), bounds))
    else:
        results = [_simulate_chunk(plan, lo, hi, slice_times) for lo, hi in bounds]

    terminal = np.concatenate([r[0] for r in results], axis=0)
    explosions = sum(r[1] for r in results)
    max_abs = max(r[2] for r in results)
    slices = None
    if slice_times:
        slices = {
            st: np.concatenate([r[3][st] for r in results], axis=0) for st in slice_times
        }
    if explosions == plan.N:
        raise SimulationError("all paths exploded; reduce dt or switch to the tamed scheme")
    return PathEnsemble(
        plan=plan, terminal=terminal, explosion_count=explosions, max_abs=max_abs, slices=slices
    )


@dataclass(frozen=True)
class MomentCurve:
    s_list: tuple
    horizon: float
    x0: tuple
    zeta_hat: np.ndarray  # shape (n_W, n_s)
    zeta_se: np.ndarray
    labels: tuple
    v_hat: Optional[float] = None
    v_se: Optional[float] = None
    v_gap: Optional[float] = None


def _chunked_mean_se(values: np.ndarray) -> tuple[float, float]:
    """Mean and standard error with a chunk-ordered deterministic reduction."""
    n = values.size
    sums = [math.fsum(values[i : i + CHUNK]) for i in range(0, n, CHUNK)]
    mean = math.fsum(sums) / n
    sq = [math.fsum((values[i : i + CHUNK] - mean) ** 2) for i in range(0, n, CHUNK)]
    var = math.fsum(sq) / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def moment_curve(
    field: CoefficientField,
    W_list: Sequence,
    s_list: Sequence[float],
    t: float,
    x0,
    N: int,
    seed: int,
    dt: float = 1e-3,
    V=None,
    scheme: str = "tamed-euler",
    threads: int = 1,
) -> MomentCurve:
    """Estimate zeta_i(s_j) = E[W_i(s_j, X_t) | X_{s_j} = x0] by simulation.

    One ensemble per start time s_j (terminal points only); optionally also
    estimates E[V(X_t)] for the static function, recorded with the largest
    time gap t - min(s_list).
    """
    s_list = tuple(float(s) for s in s_list)
    for s in s_list:
        if s > t:
            raise ParameterDomainError(f"start time {s} exceeds horizon {t}")
    n_w = len(W_list)
    zh = np.zeros((n_w, len(s_list)))
    zse = np.zeros_like(zh)
    v_hat = v_se = v_gap = None
    for j, s in enumerate(s_list):
        if s == t:
            term = np.tile(np.asarray(x0, dtype=float).reshape(-1), (1, 1))
        else:
            plan = SimulationPlan(field=field, s=s, t=t, x0=x0, N=N, dt=dt, scheme=scheme, seed=seed)
            term = simulate_paths(plan, threads=threads).terminal
        for i, W in enumerate(W_list):
            vals = W.values(s, term) if hasattr(W, "values") else np.asarray([W(s, x) for x in term])
            zh[i, j], zse[i, j] = _chunked_mean_se(np.asarray(vals, dtype=float))
        if V is not None and s == min(s_list):
            vv = V.values(term)
            v_hat, v_se = _chunked_mean_se(vv)
            v_gap = t - s
    labels = tuple(getattr(W, "h_form", f"W{i}") for i, W in enumerate(W_list))
    return MomentCurve(
        s_list=s_list, horizon=float(t), x0=tuple(np.asarray(x0, dtype=float).reshape(-1)),
        zeta_hat=zh, zeta_se=zse, labels=labels, v_hat=v_hat, v_se=v_se, v_gap=v_gap,
    )


def verify_moment_bound(curve: MomentCurve, W, V=None, M: Optional[float] = None) -> dict:
    """Check zeta_hat(s) <= exp(int_s^t h) W(t, x0) with 3-sigma MC slack.

    Also checks the static bound E V(X_t) <= V(x0) + M (t - s) when the
    curve carries a V estimate.
    """
    x0 = np.asarray(curve.x0)
    wt = W.value(curve.horizon, x0)
    rows = []
    ok = True
    for j, s in enumerate(curve.s_list):
        zh, se = float(curve.zeta_hat[0, j]), float(curve.zeta_se[0, j])
        bound = math.exp(W.integral_h(s, curve.horizon)) * wt
        slack = 1.0 + 3.0 * (se / zh if zh > 0 else 0.0)
        passed = zh <= bound * slack
        ok = ok and passed
        rows.append({"s": s, "zeta_hat": zh, "se": se, "bound": bound, "pass": passed})
    result = {"moment_rows": rows, "pass": ok}
    if V is not None and M is not None and curve.v_hat is not None:
        vb = V.value(x0) + M * curve.v_gap
        slack = 1.0 + 3.0 * (curve.v_se / curve.v_hat if curve.v_hat > 0 else 0.0)
        v_pass = curve.v_hat <= vb * slack
        result["v_bound"] = {
            "v_hat": curve.v_hat, "se": curve.v_se, "bound": vb, "pass": v_pass,
        }
        result["pass"] = ok and v_pass
    return result


def write_ensemble_csv(path, ens: PathEnsemble) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(ens.plan.field.d)])
        for row in ens.terminal:
            w.writerow([repr(float(v)) for v in row])


def write_moment_csv(path, curve: MomentCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s", "zeta_hat", "se"])
        for j, s in enumerate(curve.s_list):
            w.writerow([repr(float(s)), repr(float(curve.zeta_hat[0, j])), repr(float(curve.zeta_se[0, j]))])
