"""Density construction: FD solves vs closed forms, KDE, functionals."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from kolmolab import density_lab as dl, operator_model as om, sde_engine as se
from kolmolab.errors import ConfigurationError, InputError


def brownian_field(q=0.5):
    return om.CoefficientField(
        d=1,
        Q=lambda t, x: q * np.eye(1),
        F=lambda t, x: np.zeros(1),
        eta=q,
        Q_batch=lambda t, X: np.broadcast_to(q * np.eye(1), (np.atleast_2d(X).shape[0], 1, 1)),
        F_batch=lambda t, X: np.zeros_like(np.atleast_2d(np.asarray(X, dtype=float))),
        name="brownian",
    )


def ou_field():
    return om.CoefficientField(
        d=1,
        Q=lambda t, x: np.eye(1),
        F=lambda t, x: -np.asarray(x, dtype=float),
        eta=1.0,
        Q_batch=lambda t, X: np.broadcast_to(np.eye(1), (np.atleast_2d(X).shape[0], 1, 1)),
        F_batch=lambda t, X: -np.atleast_2d(np.asarray(X, dtype=float)),
        name="ou",
    )


def heat_kernel(x, x0, q, tau):
    var = 2.0 * q * tau
    return norm.pdf(x, loc=x0, scale=math.sqrt(var))


def ou_kernel(x, x0, tau):
    mean = x0 * math.exp(-tau)
    var = 1.0 - math.exp(-2.0 * tau)
    return norm.pdf(x, loc=mean, scale=math.sqrt(var))


class TestFokkerPlanck1D:
    def test_brownian_matches_heat_kernel(self):
        df = dl.solve_fokker_planck(
            brownian_field(), 0.0, 1.0, [0.0], (-6.0, 6.0), 1201, 2e-5, record_gaps=[0.5, 1.0]
        )
        x = df.axes[0]
        for gap in (0.5, 1.0):
            rho = df.slice_at(1.0 - gap)
            assert np.abs(rho - heat_kernel(x, 0.0, 0.5, gap)).max() <= 1e-3

    def test_ou_matches_closed_form(self):
        tau = math.log(2.0)
        df = dl.solve_fokker_planck(
            ou_field(), 0.0, tau, [1.0], (-6.0, 6.0), 1201, 2e-5, record_gaps=[tau]
        )
        x = df.axes[0]
        rho = df.slice_at(0.0)
        assert np.abs(rho - ou_kernel(x, 1.0, tau)).max() <= 1e-3

    def test_reflecting_boundary_conserves_mass(self):
        df = dl.solve_fokker_planck(
            brownian_field(), 0.0, 0.5, [0.0], (-4.0, 4.0), 401, 5e-5,
            boundary="reflecting", record_gaps=[0.5],
        )
        # the scheme conserves the discrete sum; trapezoid mass differs at O(dx^2)
        assert df.mass[0] == pytest.approx(1.0, abs=1e-7)
        assert df.leakage[0] == 0.0

    def test_absorbing_boundary_reports_leak(self):
        # wide kernel on a tight box loses visible mass through the walls
        df = dl.solve_fokker_planck(
            brownian_field(q=2.0), 0.0, 1.0, [0.0], (-3.0, 3.0), 301, 5e-5, record_gaps=[1.0]
        )
        assert df.leakage[0] > 1e-3
        assert df.mass[0] + df.leakage[0] == pytest.approx(1.0, abs=1e-6)

    def test_density_nonnegative(self):
        df = dl.solve_fokker_planck(
            ou_field(), 0.0, 0.5, [1.0], (-5.0, 5.0), 501, 5e-5, record_gaps=[0.25, 0.5]
        )
        for s in df.s_nodes:
            assert np.all(df.slice_at(s) >= 0.0)

    def test_refinement_improves_accuracy(self):
        errs = []
        for nx, dt in ((151, 8e-4), (601, 5e-5)):
            df = dl.solve_fokker_planck(
                brownian_field(), 0.0, 0.5, [0.0], (-6.0, 6.0), nx, dt, record_gaps=[0.5]
            )
            x = df.axes[0]
            errs.append(np.abs(df.slice_at(0.0) - heat_kernel(x, 0.0, 0.5, 0.5)).max())
        assert errs[1] <= errs[0] / 3.0

    def test_inadmissible_dt_rejected_with_suggestion(self):
        with pytest.raises(ConfigurationError) as ei:
            dl.solve_fokker_planck(
                brownian_field(), 0.0, 0.5, [0.0], (-6.0, 6.0), 1201, 1e-3, record_gaps=[0.5]
            )
        assert "dt" in str(ei.value)

    def test_x0_near_boundary_rejected(self):
        with pytest.raises(ConfigurationError):
            dl.solve_fokker_planck(
                brownian_field(), 0.0, 0.5, [5.99], (-6.0, 6.0), 601, 1e-4, record_gaps=[0.5]
            )


class TestFokkerPlanck2D:
    def test_isotropic_brownian_2d(self):
        q = 0.5
        field = om.CoefficientField(
            d=2,
            Q=lambda t, x: q * np.eye(2),
            F=lambda t, x: np.zeros(2),
            eta=q,
        )
        df = dl.solve_fokker_planck(
            field, 0.0, 0.25, [0.0, 0.0], ((-3.0, 3.0), (-3.0, 3.0)), 121, 2e-4, record_gaps=[0.25]
        )
        X, Y = np.meshgrid(df.axes[0], df.axes[1], indexing="ij")
        # the initial condition is a Gaussian of width two cells, so the exact
        # solution is the heat kernel with that variance added per axis
        dx = df.axes[0][1] - df.axes[0][0]
        var = 2.0 * q * 0.25 + (2.0 * dx) ** 2
        exact = np.exp(-(X**2 + Y**2) / (2 * var)) / (2 * np.pi * var)
        assert np.abs(df.slice_at(0.0) - exact).max() <= 5e-3


class TestKde:
    def test_matches_ou_closed_form_in_l1(self):
        tau = math.log(2.0)
        plan = se.SimulationPlan(field=ou_field(), s=0.0, t=tau, x0=[0.0], N=100_000, dt=1e-3, seed=17)
        ens = se.simulate_paths(plan, threads=4)
        axes = [np.linspace(-5.0, 5.0, 801)]
        df = dl.kde_density([(0.0, ens.terminal)], axes, tau, [0.0])
        rho = df.slice_at(0.0)
        exact = ou_kernel(axes[0], 0.0, tau)
        l1 = np.trapezoid(np.abs(rho - exact), axes[0])
        assert l1 <= 0.05
        assert abs(df.mass[0] - 1.0) <= 0.01

    def test_provenance_tag(self):
        samples = np.random.default_rng(0).normal(size=(2000, 1))
        df = dl.kde_density([(0.0, samples)], [np.linspace(-4, 4, 201)], 1.0, [0.0])
        assert df.provenance == "kde"


class TestCompare:
    def test_fd_vs_kde_brownian(self):
        fd = dl.solve_fokker_planck(
            brownian_field(), 0.0, 1.0, [0.0], (-6.0, 6.0), 601, 1e-4, record_gaps=[1.0]
        )
        plan = se.SimulationPlan(
            field=brownian_field(), s=0.0, t=1.0, x0=[0.0], N=100_000, dt=1e-3, seed=23
        )
        ens = se.simulate_paths(plan, threads=4)
        kde = dl.kde_density([(0.0, ens.terminal)], fd.axes, 1.0, [0.0])
        res = dl.compare_densities(fd, kde)
        assert res["l1"] <= 0.05

    def test_grid_mismatch_rejected(self):
        fd = dl.solve_fokker_planck(
            brownian_field(), 0.0, 0.5, [0.0], (-6.0, 6.0), 301, 2e-4, record_gaps=[0.5]
        )
        kde = dl.kde_density(
            [(0.0, np.zeros((100, 1)))], [np.linspace(-6, 6, 401)], 0.5, [0.0]
        )
        with pytest.raises(InputError):
            dl.compare_densities(fd, kde)


class TestGammaFunctional:
    def test_ou_drift_second_moment(self):
        # F = -y, k = 2: Gamma(2,a,b)^2 = int_a^b E[Y_s^2] ds with the FD density
        field = ou_field()
        df = dl.solve_fokker_planck(
            field, 0.0, 0.75, [0.0], (-6.0, 6.0), 601, 1e-4,
            record_gaps=[0.25, 0.35, 0.45, 0.5],
        )
        gv = dl.gamma_functional(df, field, 2.0, (0.25, 0.5))
        # E Y^2 at elapsed time tau is 1 - e^{-2 tau}; integrate over the window
        from scipy.integrate import quad

        ref, _ = quad(lambda s: 1.0 - math.exp(-2.0 * (0.75 - s)), 0.25, 0.5)
        assert gv.raw == pytest.approx(ref, rel=1e-2)
        assert gv.value == pytest.approx(math.sqrt(ref), rel=1e-2)

    def test_window_outside_grid_rejected(self):
        field = ou_field()
        df = dl.solve_fokker_planck(
            field, 0.0, 0.5, [0.0], (-5.0, 5.0), 301, 2e-4, record_gaps=[0.25]
        )
        with pytest.raises(InputError):
            dl.gamma_functional(df, field, 2.0, (0.9, 0.95))
