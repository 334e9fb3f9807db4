"""End-to-end acceptance criteria at their pinned tolerances.

Each criterion is one test, so `pytest -v` prints one pass/fail line per
criterion.  Heavy Monte-Carlo and PDE runs share module-scoped fixtures.
"""

import json
import math
import os
import time

import numpy as np
import pytest
from scipy.stats import norm

from kolmolab import (
    bound_envelope as be,
    cli,
    coefficient_approx as ca,
    density_lab as dl,
    lyapunov as ly,
    operator_model as om,
    regularity_calc as rc,
    sde_engine as se,
)

SEED = 20260823
LN2 = math.log(2.0)


def brownian_field(q):
    return cli.build_field({"family": "brownian", "d": 1, "q": q})[0]


def ou_field(q=1.0):
    return cli.build_field({"family": "ou", "d": 1, "q": q})[0]


@pytest.fixture(scope="module")
def certified():
    """Static and time-dependent weights on the pinned certification grid."""
    field = om.make_example54(d=1, m=0.0, p=3.0)
    params = om.GrowthParams(m=0.0, p=3.0, Lambda=1.0, kappa=1.0, K=1.0, b=om.constant_b(1.0))
    times = np.round(np.arange(0.0, 0.99 + 0.005, 0.01), 10)
    radii = np.round(np.arange(0.05, 10.0 + 0.025, 0.05), 10)
    grid = om.shell_grid(d=1, times=times, radii=radii)
    V = ly.derive_static(field, params, delta_frac=0.8, grid=grid)
    W = ly.derive_time_dependent(V, field, params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=grid)
    return field, params, grid, V, W


@pytest.fixture(scope="module")
def example_density():
    """FD transition densities of the cubic-drift operator at three gaps."""
    field = om.make_example54(d=1, m=0.0, p=3.0)
    return dl.solve_fokker_planck(
        field, 0.25, 1.0, [0.0], (-9.0, 9.0), 1201, 1e-5, record_gaps=[0.25, 0.5, 0.75]
    )


def test_criterion_1_fd_oracle_densities():
    # Brownian (q = 1/2) and OU (q = 1) sup-norm <= 1e-3 at gaps {ln 2, 0.5},
    # box [-6, 6], nx = 1201, each solve within 60 s
    cases = [
        ("brownian", 0.5, lambda x, g: norm.pdf(x, scale=math.sqrt(2 * 0.5 * g))),
        ("ou", 1.0, lambda x, g: norm.pdf(x, scale=math.sqrt(1.0 - math.exp(-2.0 * g)))),
    ]
    for name, q, oracle in cases:
        field = brownian_field(q) if name == "brownian" else ou_field(q)
        t0 = time.time()
        df = dl.solve_fokker_planck(
            field, 0.0, 1.0, [0.0], (-6.0, 6.0), 1201, 1e-5, record_gaps=[0.5, LN2]
        )
        elapsed = time.time() - t0
        assert elapsed <= 60.0, f"{name}: {elapsed:.1f}s"
        x = df.axes[0]
        for gap in (LN2, 0.5):
            err = np.abs(df.slice_at(1.0 - gap) - oracle(x, gap)).max()
            assert err <= 1e-3, f"{name} gap={gap}: sup error {err:.2e}"


def test_criterion_2_kde_oracle_density():
    # KDE from 1e6 tamed-Euler OU paths, pinned seed: L1 <= 0.05, no explosions
    plan = se.SimulationPlan(
        field=ou_field(), s=0.0, t=LN2, x0=[0.0], N=1_000_000, dt=1e-3, seed=SEED
    )
    ens = se.simulate_paths(plan, threads=4)
    assert ens.explosion_count == 0
    ax = np.linspace(-5.0, 5.0, 801)
    kde = dl.kde_density([(0.0, ens.terminal)], [ax], LN2, [0.0])
    exact = norm.pdf(ax, scale=math.sqrt(1.0 - math.exp(-2.0 * LN2)))
    l1 = np.trapezoid(np.abs(kde.slice_at(0.0) - exact), ax)
    assert l1 <= 0.05, f"L1 = {l1:.4f}"


def test_criterion_3_lyapunov_certification(certified):
    field, params, grid, V, W = certified
    assert V.delta == pytest.approx(0.2)
    assert W.epsilon == pytest.approx(0.1)
    assert W.alpha == 2.5
    rep = ly.verify_lyapunov(W, field, grid)
    assert rep.violation_count == 0
    total = W.integral_h(0.0, 1.0)
    assert np.isfinite(total)
    # quadrature stability: recompute the empirical rate on a halved time mesh
    times2 = np.round(np.arange(0.0, 0.99 + 0.0025, 0.005), 10)
    grid2 = om.shell_grid(d=1, times=times2, radii=grid.radii)
    W2 = ly.derive_time_dependent(V, field, params, 1.0, 0.5, 2.5, grid2)
    total2 = W2.integral_h(0.0, 1.0)
    assert abs(total - total2) / total <= 0.01, (total, total2)


def test_criterion_4_moment_bounds(certified):
    field, params, grid, V, W = certified
    curve = se.moment_curve(
        field, [W], [0.25, 0.5, 0.75], 1.0, [0.0], N=100_000, seed=SEED, dt=1e-3,
        V=V, threads=4,
    )
    res = se.verify_moment_bound(curve, W, V=V, M=V.M)
    for row in res["moment_rows"]:
        assert row["pass"], row
    assert res["v_bound"]["pass"], res["v_bound"]
    assert res["pass"]


def test_criterion_5_kernel_tail(example_density, certified):
    _, params, _, _, _ = certified
    density = example_density
    delta0 = 0.8 * params.kappa / (params.Lambda * params.beta)
    assert delta0 == pytest.approx(0.2)
    env = be.KernelEnvelope(delta0=delta0, alpha=2.5, k=4.0, p=3.0, m=0.0)
    for gap in (0.25, 0.5, 0.75):
        fit = be.fit_tail_decay(density.axes[0], density.slice_at(1.0 - gap), params.beta)
        floor = 0.9 * delta0 * gap**2.5
        assert fit["delta_hat"] >= floor, (gap, fit["delta_hat"], floor)
    res = be.verify_envelope_domination(density, env)
    assert res["rows"][0]["role"] == "fit"
    assert res["rows"][0]["gap"] == 0.75  # C_tilde fitted on the coarsest gap
    for row in res["rows"][1:]:
        assert row["factor"] <= 1.1, row
    assert res["pass"]


def test_criterion_6_coefficient_approximation(certified):
    field, params, grid, V, W = certified
    cutoff = ca.make_cutoff()
    box, nx, dt = (-3.4, 3.4), 681, 2e-5
    gaps = [0.25, 0.5, 0.75]
    base = dl.solve_fokker_planck(field, 0.25, 1.0, [0.0], box, nx, dt, record_gaps=gaps)
    sups = []
    for n in (10, 100, 1000):
        scheme = ca.ApproximationScheme(n=n, base=field, W1=W, cutoff=cutoff)
        field_n = ca.truncated_field(scheme)
        dens_n = dl.solve_fokker_planck(field_n, 0.25, 1.0, [0.0], box, nx, dt, record_gaps=gaps)
        sups.append(dl.compare_densities(base, dens_n, region=3.0)["sup"])
        # ellipticity of the blended diffusion at every probe
        for s in (0.25, 0.5, 0.75):
            for xv in base.axes[0][::20]:
                assert ca.approx_coefficients(scheme, s, [xv])[0, 0] >= field.eta - 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(sups, sups[1:])), sups
    # at n = 1000 the active cutoff shell lies outside the FD box
    assert sups[-1] <= 1e-3, sups


def test_criterion_7_exponent_calculators():
    tr = rc.bootstrap_exponents(1, 2, 1.2, 2.1818)
    assert abs(float(tr.r_seq[1]) - 12.0 / 7.0) <= 1e-12
    assert abs(float(tr.r_seq[2]) - 24.0 / 11.0) <= 1e-12
    assert abs(float(tr.limit) - 1.0 / 3.0) <= 1e-12
    lbar, y0_star, _ = rc.moser_threshold(1, 1)
    assert (lbar, y0_star) == (4.0, 1.0)
    ms = rc.moser_sequence(1, 1, 1, 10)
    assert ms.y_seq[1:4] == (0.25, 0.0625, 0.015625)
    assert be.envelope_exponents(3, 0, 2.5, 4) == (-6.5, -5.5)
    assert be.localized_constants([1.0] * 8, 1.0) == (2.0, 2.0, 5.0)
    total, _ = be.general_bound_rhs(
        {**{j: 1.0 for j in range(1, 9)}, "k": 4.0, "b0_minus_b": 1.0 / 6.0},
        1.0, 1.0, 1.0, 1.0,
    )
    assert total == pytest.approx(332367.0, abs=1e-6)


def test_criterion_8_deterministic_report(tmp_path):
    cfg_path = os.path.join(os.path.dirname(__file__), "..", "scenarios", "acceptance.json")
    blobs = []
    for tag, threads in (("run1", 1), ("run2", 4)):
        out = str(tmp_path / tag)
        code = cli.main(["run", "--config", cfg_path, "--out", out, "--threads", str(threads)])
        assert code == 0
        with open(os.path.join(out, "report.json"), "rb") as f:
            blobs.append(f.read())
    assert blobs[0] == blobs[1]
    # sanity: the report carries every requested check
    doc = json.loads(blobs[0])
    assert doc["pass"] is True
    assert set(doc["checks"]) == {
        "hypothesis_grid", "lyapunov_certificate", "v_moment_bound",
        "tail_decay_thm53", "envelope_domination", "exponent_identities",
    }
