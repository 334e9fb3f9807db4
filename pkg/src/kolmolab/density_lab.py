"""Transition-density estimation by two independent routes.

Route 1 (kde_density): Gaussian product-kernel estimate from simulated
terminal ensembles.  Route 2 (solve_fokker_planck): conservative explicit
finite differences for the forward equation

    d_t rho = sum_ij D_ij(q_ij rho) - div(F rho)

in d in {1, 2}.  Writing u = q rho per direction, the directional flux
F rho - d_x(q rho) = (F/q) u - d_x u is discretized with exponential
fitting (Bernoulli-weighted two-point fluxes), which is positivity
preserving at admissible dt and better than first-order accurate on smooth
solutions.  The Gamma functional integrates |F|^k against a density over a
time window.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

_trapz_fn = getattr(np, "trapezoid", None) or np.trapz

from .errors import ConfigurationError, InputError, ParameterDomainError
from .operator_model import CoefficientField

__all__ = [
    "DensityField",
    "GammaValue",
    "kde_density",
    "solve_fokker_planck",
    "gamma_functional",
    "compare_densities",
    "write_density_csv",
    "write_density_plt",
]

_KDE_CHUNK = 8192


@dataclass(frozen=True)
class DensityField:
    """Gridded nonnegative densities rho(s, y) with a common horizon t.

    s_nodes are kernel start times: values[i] estimates the density of the
    state at the horizon given a point start at s_nodes[i].  axes is one
    coordinate array per spatial dimension.
    """

    s_nodes: tuple
    horizon: float
    axes: tuple
    values: np.ndarray
    provenance: str
    mass: tuple
    leakage: tuple
    x0: tuple
    field_name: str

    @property
    def d(self) -> int:
        return len(self.axes)

    def slice_at(self, s: float) -> np.ndarray:
        i = int(np.argmin(np.abs(np.asarray(self.s_nodes) - s)))
        if abs(self.s_nodes[i] - s) > 1e-9:
            raise InputError(f"no slice at s={s}; available: {self.s_nodes}")
        return self.values[i]

    def slice_mass(self, arr: np.ndarray) -> float:
        m = arr
        for ax in reversed(self.axes):
            m = _trapz_fn(m, ax, axis=-1)
        return float(m)


def _trapz_nd(arr: np.ndarray, axes) -> float:
    m = arr
    for ax in reversed(axes):
        m = _trapz_fn(m, ax, axis=-1)
    return float(m)


def _scott_bandwidth(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    return sd * n ** (-1.0 / (d + 4))


def kde_density(
    ensembles: Sequence[tuple],
    axes: Sequence[np.ndarray],
    horizon: float,
    x0,
    field_name: str = "",
    bandwidth: Optional[Sequence[float] | float | str] = "scott",
) -> DensityField:
    """Gaussian product-kernel density per (s, samples) pair in ensembles.

    Per-dimension bandwidths follow Scott's rule by default.  Samples are
    processed in chunks; evaluation is exact (no binning), deterministic,
    and independent of chunking.
    """
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    d = len(axes)
    s_nodes, slices, mass = [], [], []
    for s, samples in ensembles:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] == 0:
            raise InputError(f"empty ensemble at s={s}")
        if samples.shape[1] != d:
            raise InputError(f"samples at s={s} have dimension {samples.shape[1]}, grid has {d}")
        if bandwidth == "scott" or bandwidth is None:
            h = _scott_bandwidth(samples)
        else:
            h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()
        if np.any(h <= 0):
            raise InputError("bandwidths must be positive")

        n = samples.shape[0]
        norm = 1.0 / (n * np.prod(np.sqrt(2.0 * math.pi) * h))
        grid_shape = tuple(len(a) for a in axes)
        acc = np.zeros(grid_shape)
        for lo in range(0, n, _KDE_CHUNK):
            chunk = samples[lo : lo + _KDE_CHUNK]
            # product kernel accumulated dimension by dimension
            part = np.exp(-0.5 * ((axes[0][None, :] - chunk[:, 0, None]) / h[0]) ** 2)
            if d == 1:
                acc += part.sum(axis=0)
            elif d == 2:
                part2 = np.exp(-0.5 * ((axes[1][None, :] - chunk[:, 1, None]) / h[1]) ** 2)
                acc += np.einsum("ni,nj->ij", part, part2)
            else:
                raise InputError("kde grids support d <= 2; use sample statistics beyond")
        vals = norm * acc
        s_nodes.append(float(s))
        slices.append(vals)
        mass.append(_trapz_nd(vals, axes))

    values = np.stack(slices)
    return DensityField(
        s_nodes=tuple(s_nodes), horizon=float(horizon), axes=axes, values=values,
        provenance="kde", mass=tuple(mass), leakage=tuple(1.0 - m for m in mass),
        x0=tuple(np.asarray(x0, dtype=float).reshape(-1)), field_name=field_name,
    )


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (e^z - 1), stable near 0."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-10
    out[small] = 1.0 - 0.5 * z[small]
    zb = np.clip(z[~small], -700.0, 700.0)
    out[~small] = zb / np.expm1(zb)
    return out


def _axes_for_box(box, nx) -> tuple:
    box = np.atleast_2d(np.asarray(box, dtype=float))
    nxs = np.atleast_1d(np.asarray(nx, dtype=int))
    if nxs.size == 1 and box.shape[0] > 1:
        nxs = np.full(box.shape[0], nxs[0])
    return tuple(np.linspace(lo, hi, int(k)) for (lo, hi), k in zip(box, nxs))


def solve_fokker_planck(
    field: CoefficientField,
    s_start: float,
    t_end: float,
    x0,
    box,
    nx,
    dt: float,
    boundary: str = "absorbing",
    record_gaps: Optional[Sequence[float]] = None,
) -> DensityField:
    """Forward solve from a mollified point mass at (s_start, x0).

    box is (lo, hi) in 1D or ((lox, hix), (loy, hiy)) in 2D; nx is the node
    count per axis.  The initial condition is a Gaussian of width two grid
    cells, normalized to unit discrete mass.  Slices are recorded at elapsed
    times record_gaps (default: the full span) and labeled with start times
    s = t_end - gap, which identifies elapsed time with kernel start time;
    exact when the coefficients are time-independent.
    """
    if boundary not in ("absorbing", "reflecting"):
        raise ConfigurationError(f"boundary must be absorbing or reflecting; got {boundary!r}")
    if field.d > 2:
        raise ConfigurationError("finite-difference solves support d in {1, 2}")
    if not s_start < t_end:
        raise ParameterDomainError("need s_start < t_end")
    axes = _axes_for_box(box, nx)
    if len(axes) != field.d:
        raise ConfigurationError(f"box has {len(axes)} axes, field has d={field.d}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    for ax, c in zip(axes, x0):
        if not ax[0] + 2 * (ax[1] - ax[0]) < c < ax[-1] - 2 * (ax[1] - ax[0]):
            raise ConfigurationError(f"x0={x0} too close to the box boundary")

    span = t_end - s_start
    gaps = sorted(set(float(g) for g in (record_gaps if record_gaps is not None else [span])))
    if gaps[-1] > span + 1e-12:
        raise ConfigurationError(f"record gap {gaps[-1]} exceeds the solve span {span}")

    nsteps = max(1, int(round(span / dt)))
    dt = span / nsteps
    record_step = {max(1, int(round(g / dt))): g for g in gaps}

    dxs = [ax[1] - ax[0] for ax in axes]
    rho = _gaussian_ic(axes, x0, [2.0 * dx for dx in dxs])

    if field.d == 1:
        stepper = _Stepper1D(field, axes[0], boundary)
    else:
        stepper = _Stepper2D(field, axes, boundary)

    recorded = {}
    leak = 0.0
    mass0 = _trapz_nd(rho, axes)
    for k in range(nsteps):
        tk = s_start + k * dt
        rho, lost = stepper.step(rho, tk, dt)
        leak += lost
        g = record_step.get(k + 1)
        if g is not None:
            recorded[g] = (rho.copy(), leak)

    # present slices as kernel start times s = t_end - gap, ascending in s
    items = sorted(((t_end - g, g) for g in recorded), key=lambda p: p[0])
    s_nodes = tuple(s for s, _ in items)
    values = np.stack([recorded[g][0] for _, g in items])
    mass = tuple(_trapz_nd(v, axes) for v in values)
    leakage = tuple(recorded[g][1] for _, g in items)
    return DensityField(
        s_nodes=s_nodes, horizon=float(t_end), axes=axes, values=values,
        provenance="fd", mass=mass, leakage=leakage,
        x0=tuple(x0), field_name=field.name,
    )


def _gaussian_ic(axes, x0, widths) -> np.ndarray:
    parts = []
    for ax, c, w in zip(axes, x0, widths):
        g = np.exp(-0.5 * ((ax - c) / w) ** 2)
        parts.append(g)
    if len(axes) == 1:
        rho = parts[0]
    else:
        rho = np.outer(parts[0], parts[1])
    return rho / _trapz_nd(rho, axes)


class _Stepper1D:
    def __init__(self, field: CoefficientField, ax: np.ndarray, boundary: str):
        self.field = field
        self.ax = ax
        self.dx = float(ax[1] - ax[0])
        self.boundary = boundary
        self.faces = 0.5 * (ax[:-1] + ax[1:])
        self._cache_t = None

    def _coeffs(self, t: float):
        if self._cache_t is not None and self._cache_t[0] == t:
            return self._cache_t[1:]
        X = self.ax[:, None]
        Xf = self.faces[:, None]
        q = self.field.eval_Q_batch(t, X)[:, 0, 0]
        qf = self.field.eval_Q_batch(t, Xf)[:, 0, 0]
        Ff = self.field.eval_F_batch(t, Xf)[:, 0]
        P = Ff / qf * self.dx
        bm = _bernoulli(-P)  # weights u_left
        bp = _bernoulli(P)   # weights u_right
        self._cache_t = (t, q, bm, bp)
        return q, bm, bp

    def step(self, rho: np.ndarray, t: float, dt: float):
        q, bm, bp = self._coeffs(t)
        dx = self.dx
        diag = q[1:-1] * (bp[:-1] + bm[1:])
        diag_max = float(diag.max()) if diag.size else 0.0
        admissible = dx * dx / max(diag_max, 1e-300)
        if dt > admissible * (1.0 + 1e-9):
            raise ConfigurationError(
                f"explicit step unstable: dt={dt} exceeds admissible dt={admissible:.3e}"
            )
        u = q * rho
        flux = (bm * u[:-1] - bp * u[1:]) / dx  # interior faces
        new = rho.copy()
        new[1:-1] += dt / dx * (flux[:-1] - flux[1:])
        if self.boundary == "reflecting":
            new[0] += dt / dx * (-flux[0])
            new[-1] += dt / dx * (flux[-1])
            lost = 0.0
        else:
            # Dirichlet rho = 0 at the boundary nodes; zeroed mass is the leak
            new[0] = 0.0
            new[-1] = 0.0
            lost = float(rho.sum() - new.sum()) * dx
        return np.maximum(new, 0.0), lost


class _Stepper2D:
    """Dimension-wise exponential-fitted fluxes; centered mixed term.

    The mixed derivative D_xy(2 q12 rho) is added with centered differences,
    which is accurate but only conditionally positivity preserving; diagonal
    or near-diagonal Q is the intended regime.
    """

    def __init__(self, field: CoefficientField, axes, boundary: str):
        self.field = field
        self.axes = axes
        self.boundary = boundary
        self.dx = float(axes[0][1] - axes[0][0])
        self.dy = float(axes[1][1] - axes[1][0])
        self.Xg, self.Yg = np.meshgrid(axes[0], axes[1], indexing="ij")
        self._cache = None

    def _eval_grid(self, t, Xg, Yg):
        pts = np.column_stack([Xg.ravel(), Yg.ravel()])
        Q = self.field.eval_Q_batch(t, pts)
        F = self.field.eval_F_batch(t, pts)
        shape = Xg.shape
        return (
            Q[:, 0, 0].reshape(shape), Q[:, 1, 1].reshape(shape), Q[:, 0, 1].reshape(shape),
            F[:, 0].reshape(shape), F[:, 1].reshape(shape),
        )

    def _coeffs(self, t):
        if self._cache is not None and self._cache[0] == t:
            return self._cache[1]
        ax, ay = self.axes
        q11, q22, q12, _, _ = self._eval_grid(t, self.Xg, self.Yg)
        # x-faces
        Xf, Yf = np.meshgrid(0.5 * (ax[:-1] + ax[1:]), ay, indexing="ij")
        q11f, _, _, F1f, _ = self._eval_grid(t, Xf, Yf)
        Px = F1f / q11f * self.dx
        # y-faces
        Xf2, Yf2 = np.meshgrid(ax, 0.5 * (ay[:-1] + ay[1:]), indexing="ij")
        _, q22f, _, _, F2f = self._eval_grid(t, Xf2, Yf2)
        Py = F2f / q22f * self.dy
        coeffs = (q11, q22, q12, _bernoulli(-Px), _bernoulli(Px), _bernoulli(-Py), _bernoulli(Py))
        self._cache = (t, coeffs)
        return coeffs

    def step(self, rho: np.ndarray, t: float, dt: float):
        q11, q22, q12, bxm, bxp, bym, byp = self._coeffs(t)
        dx, dy = self.dx, self.dy
        diag_x = q11[1:-1, :] * (bxp[:-1, :] + bxm[1:, :]) / dx**2
        diag_y = q22[:, 1:-1] * (byp[:, :-1] + bym[:, 1:]) / dy**2
        dmax = float(diag_x.max()) + float(diag_y.max())
        admissible = 1.0 / max(dmax, 1e-300)
        if dt > admissible * (1.0 + 1e-9):
            raise ConfigurationError(
                f"explicit step unstable: dt={dt} exceeds admissible dt={admissible:.3e}"
            )
        ux = q11 * rho
        uy = q22 * rho
        fx = (bxm * ux[:-1, :] - bxp * ux[1:, :]) / dx
        fy = (bym * uy[:, :-1] - byp * uy[:, 1:]) / dy
        new = rho.copy()
        new[1:-1, :] += dt / dx * (fx[:-1, :] - fx[1:, :])
        new[:, 1:-1] += dt / dy * (fy[:, :-1] - fy[:, 1:])
        if np.any(q12):
            u12 = 2.0 * q12 * rho
            mixed = np.zeros_like(rho)
            mixed[1:-1, 1:-1] = (
                u12[2:, 2:] - u12[2:, :-2] - u12[:-2, 2:] + u12[:-2, :-2]
            ) / (4.0 * dx * dy)
            new += dt * mixed
        if self.boundary == "reflecting":
            new[0, :] += dt / dx * (-fx[0, :])
            new[-1, :] += dt / dx * (fx[-1, :])
            new[:, 0] += dt / dy * (-fy[:, 0])
            new[:, -1] += dt / dy * (fy[:, -1])
            lost = 0.0
        else:
            new[0, :] = 0.0
            new[-1, :] = 0.0
            new[:, 0] = 0.0
            new[:, -1] = 0.0
            lost = float(rho.sum() - new.sum()) * dx * dy
        return np.maximum(new, 0.0), lost


@dataclass(frozen=True)
class GammaValue:
    k: float
    window: tuple
    raw: float
    value: float


def gamma_functional(density: DensityField, field: CoefficientField, k: float, window: tuple) -> GammaValue:
    """(integral over window x space of |F|^k rho)^(1/k); raw integral kept too."""
    a, b = float(window[0]), float(window[1])
    s_nodes = np.asarray(density.s_nodes)
    sel = (s_nodes >= a - 1e-12) & (s_nodes <= b + 1e-12)
    if sel.sum() < 1:
        raise InputError(f"window ({a}, {b}) contains no density slices; nodes: {density.s_nodes}")
    pts = np.stack(np.meshgrid(*density.axes, indexing="ij"), axis=-1).reshape(-1, density.d)
    inner = []
    for s in s_nodes[sel]:
        Fv = field.eval_F_batch(float(s), pts)
        fk = np.linalg.norm(Fv, axis=1) ** k
        integrand = fk.reshape(density.values.shape[1:]) * density.slice_at(float(s))
        inner.append(_trapz_nd(integrand, density.axes))
    if sel.sum() == 1:
        raw = inner[0] * (b - a)
    else:
        raw = float(_trapz_fn(inner, s_nodes[sel]))
    return GammaValue(k=float(k), window=(a, b), raw=raw, value=raw ** (1.0 / k))


def compare_densities(d1: DensityField, d2: DensityField, region: Optional[float] = None) -> dict:
    """sup/L1/L2 distances over shared s nodes, optionally on |y| <= region."""
    if len(d1.axes) != len(d2.axes) or any(
        a.shape != b.shape or not np.allclose(a, b) for a, b in zip(d1.axes, d2.axes)
    ):
        raise InputError("densities live on different grids; resample before comparing")
    shared = sorted(set(round(s, 12) for s in d1.s_nodes) & set(round(s, 12) for s in d2.s_nodes))
    if not shared:
        raise InputError("densities share no s nodes")
    mask = None
    if region is not None:
        grids = np.meshgrid(*d1.axes, indexing="ij")
        r = np.sqrt(sum(g**2 for g in grids))
        mask = r <= region
    sup = l1 = l2 = 0.0
    for s in shared:
        a = d1.slice_at(s)
        b = d2.slice_at(s)
        diff = a - b
        if mask is not None:
            diff = np.where(mask, diff, 0.0)
        sup = max(sup, float(np.abs(diff).max()))
        l1 = max(l1, _trapz_nd(np.abs(diff), d1.axes))
        l2 = max(l2, math.sqrt(_trapz_nd(diff**2, d1.axes)))
    return {"sup": sup, "l1": l1, "l2": l2, "s_nodes": shared}


def write_density_csv(path, density: DensityField) -> None:
    """CSV columns s, y..., rho plus a JSON sidecar with grid and provenance."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s"] + [f"y{i}" for i in range(density.d)] + ["rho"])
        grids = np.meshgrid(*density.axes, indexing="ij")
        coords = np.column_stack([g.ravel() for g in grids])
        for i, s in enumerate(density.s_nodes):
            vals = density.values[i].ravel()
            for c, v in zip(coords, vals):
                w.writerow([repr(float(s))] + [repr(float(x)) for x in c] + [repr(float(v))])
    sidecar = {
        "provenance": density.provenance,
        "horizon": density.horizon,
        "s_nodes": list(density.s_nodes),
        "axes": [[float(a[0]), float(a[-1]), len(a)] for a in density.axes],
        "mass": list(density.mass),
        "leakage": list(density.leakage),
        "x0": list(density.x0),
        "field": density.field_name,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)


def write_density_plt(path, csv_name: str, density: DensityField) -> None:
    """Gnuplot script for density slices and log-density tails."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title 'density slices ({density.provenance})'",
    ]
    if density.d == 1:
        conds = " , ".join(
            f"'{csv_name}' using 2:($1=={s!r} ? $3 : 1/0) with lines title 's={s:g}'"
            for s in density.s_nodes
        )
        lines.append(f"plot {conds}")
        lines.append("set logscale y")
        lines.append(f"replot")
    else:
        lines.append(f"splot '{csv_name}' using 2:3:4 with pm3d")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
