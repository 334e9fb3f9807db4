"""Truncated coefficient families: cutoff shape and scheme invariants."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kolmolab import coefficient_approx as ca, lyapunov as ly, operator_model as om


def make_setup():
    field = om.make_example54(d=1, m=0.0, p=3.0)
    params = om.GrowthParams(m=0.0, p=3.0, Lambda=1.0, kappa=1.0, K=1.0, b=om.constant_b(1.0))
    grid = om.shell_grid(d=1, times=np.arange(0.0, 1.0, 0.02), radii=np.arange(0.05, 10.0, 0.05))
    V = ly.derive_static(field, params, delta_frac=0.8, grid=grid)
    W = ly.derive_time_dependent(V, field, params, horizon=1.0, eps_frac=0.5, alpha=2.5, grid=grid)
    return field, params, V, W


class TestCutoff:
    def setup_method(self):
        self.phi = ca.make_cutoff()

    def test_plateau_and_support_exact(self):
        tau = np.linspace(0.0, 2.5, 10001)
        v = self.phi(tau)
        assert np.all(v[tau <= 1.0] == 1.0)
        assert np.all(v[tau >= 2.0] == 0.0)

    def test_even(self):
        tau = np.linspace(0.0, 2.5, 101)
        assert np.array_equal(self.phi(tau), self.phi(-tau))

    def test_range_and_monotone(self):
        tau = np.linspace(0.0, 2.5, 10001)
        v = self.phi(tau)
        assert np.all((0.0 <= v) & (v <= 1.0))
        assert np.all(np.diff(v) <= 1e-12)

    def test_scaled_slope_bound(self):
        tau = np.linspace(1e-6, 2.5, 100001)
        v = self.phi(tau)
        dv = np.gradient(v, tau)
        assert np.abs(tau * dv).max() <= 2.0
        assert self.phi.slope_bound <= 2.0


class TestScheme:
    def setup_method(self):
        self.field, self.params, self.V, self.W = make_setup()

    def scheme(self, n):
        return ca.ApproximationScheme(n=n, base=self.field, W1=self.W, cutoff=ca.make_cutoff())

    def test_phi_n_in_unit_interval(self):
        sch = self.scheme(100)
        for s in (0.0, 0.5, 0.9):
            for xv in (0.0, 1.0, 3.0, 8.0):
                v = sch.phi_n(s, np.array([[xv]]))[0]
                assert 0.0 <= v <= 1.0

    def test_blend_interpolates_q_and_eta(self):
        # where W1 <= n the original coefficient survives; far out the blend
        # collapses to the constant elliptic floor
        sch = self.scheme(10)
        Qn_near = ca.approx_coefficients(sch, 0.0, [0.5])
        Q_near, _ = om.eval_coefficients(self.field, 0.0, [0.5])
        assert np.allclose(Qn_near, Q_near)
        Qn_far = ca.approx_coefficients(sch, 0.0, [9.0])
        assert np.allclose(Qn_far, self.field.eta * np.eye(1))

    @settings(max_examples=10, deadline=None)
    @given(n=st.sampled_from([10, 100, 1000]), s=st.sampled_from([0.0, 0.25, 0.5]))
    def test_ellipticity_preserved_for_all_n(self, n, s):
        sch = self.scheme(n)
        for xv in np.linspace(-9.0, 9.0, 181):
            Qn = ca.approx_coefficients(sch, s, [xv])
            assert Qn[0, 0] >= self.field.eta - 1e-12

    def test_truncated_q_bounded(self):
        # with the cutoff active, sup_x |Q_n| is finite even at huge radii
        sch = self.scheme(10)
        qs = [ca.approx_coefficients(sch, 0.0, [xv])[0, 0] for xv in np.linspace(-50.0, 50.0, 501)]
        assert np.isfinite(qs).all()
        assert max(qs) <= max(
            self.field.eta, om.eval_coefficients(self.field, 0.0, [0.0])[0][0, 0]
        ) * 20

    def test_truncated_field_keeps_drift(self):
        sch = self.scheme(100)
        fn = ca.truncated_field(sch)
        _, F0 = om.eval_coefficients(self.field, 0.3, [2.0])
        _, Fn = om.eval_coefficients(fn, 0.3, [2.0])
        assert np.allclose(F0, Fn)

    def test_verify_approx_passes_on_family(self):
        for n in (10, 100, 1000):
            sch = self.scheme(n)
            grid = om.shell_grid(d=1, times=[0.25, 0.5], radii=np.arange(0.05, 3.45, 0.05))
            rep = ca.verify_approx(sch, self.V, grid)
            assert rep["pass"], rep

    def test_report_json_roundtrip(self):
        import json

        sch = self.scheme(10)
        grid = om.shell_grid(d=1, times=[0.5], radii=np.arange(0.05, 3.0, 0.05))
        rep = ca.verify_approx(sch, self.V, grid)
        doc = json.loads(ca.report_json(rep))
        assert doc["n"] == 10
