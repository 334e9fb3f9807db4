"""Lyapunov weights: profile smoothness, generator action, certification."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kolmolab import lyapunov as ly, operator_model as om
from kolmolab.errors import CertificationError, ParameterDomainError


def example_field(m=0.0, p=3.0, d=1):
    return om.make_example54(d=d, m=m, p=p)


def example_params(m=0.0, p=3.0):
    return om.GrowthParams(m=m, p=p, Lambda=1.0, kappa=1.0, K=1.0, b=om.constant_b(1.0))


def cert_grid(d=1, r_max=10.0, r_step=0.05, t_step=0.01):
    return om.shell_grid(
        d=d, times=np.arange(0.0, 1.0, t_step), radii=np.arange(r_step, r_max + r_step / 2, r_step)
    )


def fd_gradient(fn, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def fd_hessian(fn, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (
                fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)
            ) / (4 * h * h)
    return H


class TestRadialProfile:
    def test_matches_power_outside_unit_ball(self):
        prof = ly.smooth_radial_power(4.0)
        r = np.array([1.0, 1.5, 3.0, 10.0])
        assert np.allclose(prof.u(r), r**4)

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ParameterDomainError):
            ly.smooth_radial_power(0.0)
        with pytest.raises(ParameterDomainError):
            ly.smooth_radial_power(-1.0)

    def test_rejects_beta_with_negative_inner_quartic(self):
        # the unique C2-matching quartic dips below zero for beta in (2, 4)
        with pytest.raises(ParameterDomainError):
            ly.smooth_radial_power(3.0)

    @given(beta=st.sampled_from([0.5, 1.0, 1.5, 2.0, 4.0, 5.0, 6.0, 8.0]))
    @settings(max_examples=30, deadline=None)
    def test_c2_match_at_unit_sphere(self, beta):
        # value, first and second derivative all continuous at r = 1
        prof = ly.smooth_radial_power(beta)
        h = 1e-7
        assert prof.u(1.0) == pytest.approx(1.0, rel=1e-9)
        inner = (prof.u(1.0) - prof.u(1.0 - h)) / h
        outer = (prof.u(1.0 + h) - prof.u(1.0)) / h
        assert inner == pytest.approx(beta, rel=1e-5)
        assert outer == pytest.approx(beta, rel=1e-5)
        assert prof.d2u(1.0 - 1e-12) == pytest.approx(beta * (beta - 1.0), rel=1e-6, abs=1e-9)

    @given(beta=st.sampled_from([0.5, 1.0, 2.0, 4.0, 6.0, 8.0]), r=st.floats(min_value=0.0, max_value=0.999))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_inside(self, beta, r):
        prof = ly.smooth_radial_power(beta)
        assert prof.u(r) >= 0.0

    def test_gradient_and_hessian_against_fd(self):
        prof = ly.smooth_radial_power(4.0)
        for x in ([1.7, -0.3], [0.4, 0.2], [2.5, 1.5]):
            x = np.asarray(x)
            fn = lambda y: prof.value(y)
            assert np.allclose(prof.grad(x), fd_gradient(fn, x), rtol=1e-5, atol=1e-7)
            assert np.allclose(prof.hessian(x), fd_hessian(fn, x), rtol=1e-4, atol=1e-5)


class TestApplyGenerator:
    def test_matches_fd_composition_small_delta(self):
        # independent oracle: apply A to exp(delta upsilon) by raw central FD
        field = example_field()
        prof = ly.smooth_radial_power(4.0)
        delta = 0.01  # small so the FD of the exponential stays conditioned
        V = ly.StaticLyapunov(profile=prof, delta=delta, M=0.0, R_cert=1.0)
        t = 0.3
        for xv in (0.7, 1.4, 2.0):
            x = np.array([xv])
            fn = lambda y: float(np.exp(delta * prof.value(y)))
            Q, F = om.eval_coefficients(field, t, x)
            H = fd_hessian(fn, x, h=1e-4)
            g = fd_gradient(fn, x, h=1e-6)
            oracle = float(np.sum(Q * H) + F @ g)
            got = ly.apply_generator(field, V, t, x)
            assert got == pytest.approx(oracle, rel=1e-5)

    def test_hand_value_on_polynomial_family(self):
        # d=1, m=0, p=3, delta=0.2, upsilon=x^4 at x=2:
        # A V / V = delta(12 x^2 - 4 x^6) + delta^2 16 x^6
        field = example_field()
        V = ly.StaticLyapunov(profile=ly.smooth_radial_power(4.0), delta=0.2, M=0.0, R_cert=1.0)
        x = np.array([2.0])
        expect = (0.2 * (12 * 4 - 4 * 64) + 0.04 * 16 * 64) * math.exp(0.2 * 16.0)
        assert ly.apply_generator(field, V, 0.0, x) == pytest.approx(expect, rel=1e-12)


class TestDeriveStatic:
    def test_acceptance_scenario_constants(self):
        field, params = example_field(), example_params()
        V = ly.derive_static(field, params, delta_frac=0.8, grid=cert_grid())
        assert V.delta == pytest.approx(0.2)
        assert V.M > 0
        assert np.isfinite(V.R_cert)

    def test_certified_drift_condition_outside_r(self):
        # outside R_cert the log-space ratio A V / V must be nonpositive;
        # checking the ratio avoids materializing exp(delta r^beta)
        field, params = example_field(), example_params()
        V = ly.derive_static(field, params, delta_frac=0.8, grid=cert_grid())
        for xv in (V.R_cert, V.R_cert + 1.0, 2 * V.R_cert):
            ratio = float(
                ly.generator_ratio(field, V.profile, V.delta, 0.5, np.array([[xv]]), form="full")[0]
            )
            assert ratio <= 1e-9

    def test_generator_bound_everywhere_on_grid(self):
        field, params = example_field(), example_params()
        V = ly.derive_static(field, params, delta_frac=0.8, grid=cert_grid())
        for xv in np.arange(0.05, 6.0, 0.05):
            av = ly.apply_generator(field, V, 0.25, np.array([xv]))
            assert av <= V.M * (1 + 1e-9) + 1e-12

    def test_rejects_delta_frac_out_of_range(self):
        field, params = example_field(), example_params()
        for bad in (0.0, 1.0, 1.5, -0.2):
            with pytest.raises(ParameterDomainError):
                ly.derive_static(field, params, delta_frac=bad, grid=cert_grid())


class TestDeriveTimeDependent:
    def setup_method(self):
        self.field, self.params = example_field(), example_params()
        self.grid = cert_grid()
        self.V = ly.derive_static(self.field, self.params, delta_frac=0.8, grid=self.grid)

    def test_acceptance_scenario_constants(self):
        W = ly.derive_time_dependent(
            self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=self.grid
        )
        assert W.epsilon == pytest.approx(0.1)
        assert W.alpha == 2.5
        assert W.analytic_exponent == pytest.approx(-0.5)

    def test_alpha_below_threshold_rejected(self):
        # threshold (p + 1 - m)/(p - 1) = 2 for m=0, p=3
        with pytest.raises(ParameterDomainError):
            ly.derive_time_dependent(
                self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=1.5, grid=self.grid
            )

    def test_rate_integrable_and_additive(self):
        W = ly.derive_time_dependent(
            self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=self.grid
        )
        total = W.integral_h(0.0, 1.0)
        assert np.isfinite(total) and total > 0
        assert W.h(0.5) >= 0.0
        mid = W.integral_h(0.0, 0.4) + W.integral_h(0.4, 1.0)
        assert mid == pytest.approx(total, rel=1e-12)
        # recorded worst-case growth exponent of sup_x ratio stays integrable
        assert W.analytic_exponent > -1.0

    def test_verify_reports_zero_violations(self):
        W = ly.derive_time_dependent(
            self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=self.grid
        )
        rep = ly.verify_lyapunov(W, self.field, self.grid)
        assert rep.violation_count == 0
        assert rep.worst_margin <= 0.0

    def test_verify_detects_understated_rate(self):
        W = ly.derive_time_dependent(
            self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=self.grid
        )
        rep = ly.verify_lyapunov(W, self.field, self.grid, h=lambda s: 0.0)
        assert rep.violation_count > 0

    def test_weight_monotone_in_s(self):
        W = ly.derive_time_dependent(
            self.V, self.field, self.params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=self.grid
        )
        x = np.array([2.0])
        vals = [W.value(s, x) for s in (0.1, 0.4, 0.7, 0.95)]
        # (t - s)^alpha decreasing in s: the weight relaxes toward 1
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert W.value(1.0, x) == pytest.approx(1.0)


class TestAnalyticIntegral:
    @given(
        C=st.floats(min_value=0.1, max_value=10.0),
        e=st.floats(min_value=-0.9, max_value=2.0),
    )
    @settings(max_examples=30, deadline=None)
    def test_matches_quadrature(self, C, e):
        from scipy.integrate import quad

        s, t = 0.25, 1.0
        got = ly.analytic_h_integral(C, e, s, t)
        ref, _ = quad(lambda u: C * (t - u) ** e, s, t)
        assert got == pytest.approx(ref, rel=1e-6)
