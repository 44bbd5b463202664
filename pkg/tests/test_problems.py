import dataclasses

import numpy as np
import pytest

from jumpobstacle.levy import atomic_measure, power_density_measure, truncate
from jumpobstacle.problems import (
    CATALOG_NAMES,
    DriverMode,
    catalog,
    driver,
    probe_growth,
    probe_lipschitz,
    terminal_consistency_gap,
)


def rng():
    return np.random.default_rng(42)


class TestCatalog:
    def test_unknown_name_lists_valid(self):
        with pytest.raises(ValueError, match="CONSTANT"):
            catalog("NO_SUCH_PROBLEM")

    def test_unknown_param_rejected(self):
        with pytest.raises(ValueError, match="volatility"):
            catalog("AMERICAN_PUT_STYLE", volatility=0.3)

    def test_constant_is_degenerate(self):
        spec = catalog("CONSTANT", level=2.0)
        x = np.array([[0.3], [-1.0]])
        assert np.all(spec.b(0.1, x) == 0.0)
        assert np.all(spec.sigma(0.1, x) == 0.0)
        assert np.all(spec.g[0](x) == 2.0)
        assert np.all(spec.obstacle(0.5, x) == 1.0)

    def test_put_payoff(self):
        spec = catalog("AMERICAN_PUT_STYLE", strike=1.0)
        x = np.array([[0.4], [1.5]])
        assert spec.g[0](x) == pytest.approx([0.6, 0.0])
        assert spec.obstacle(0.3, x) == pytest.approx([0.6, 0.0])

    def test_coupled_system_shapes(self):
        spec = catalog("COUPLED_SYSTEM_M2")
        assert spec.m == 2
        x = np.zeros((5, 1)) + 1.0
        y = np.ones((5, 2))
        z = np.zeros((5, 1))
        q = np.linspace(-1, 1, 5)
        for i in range(2):
            assert spec.h[i](0.0, x, y, z, q).shape == (5,)

    def test_coupled_gamma_changes_sign(self):
        spec = catalog("COUPLED_SYSTEM_M2")
        x = np.zeros((1, 1))
        assert spec.gamma[0](0.0, x, -0.5) < 0 < spec.gamma[0](0.0, x, 0.5)
        assert spec.gamma[1](0.0, x, -0.5) > 0

    def test_coupled_driver_non_monotone_in_q(self):
        spec = catalog("COUPLED_SYSTEM_M2")
        x, y, z = np.zeros((1, 1)), np.zeros((1, 2)), np.zeros((1, 1))
        qs = np.linspace(0, 2 * np.pi, 40)
        vals = np.array([spec.h[0](0.0, x, y, z, np.array([q]))[0] for q in qs])
        diffs = np.diff(vals)
        assert (diffs > 0).any() and (diffs < 0).any()

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_terminal_consistency(self, name):
        spec = catalog(name)
        assert terminal_consistency_gap(spec, 500, rng()) >= -1e-12


class TestProbeLipschitz:
    def test_linear_drift_quotient(self):
        spec = catalog("LINEAR_DRIFT", mu=0.1)
        rep = probe_lipschitz(spec, 200, rng())
        assert rep.record("b_lipschitz").max_ratio == pytest.approx(0.1, abs=1e-12)
        assert rep.record("b_lipschitz").passed

    def test_put_driver_quotients(self):
        spec = catalog("AMERICAN_PUT_STYLE", rate=0.05)
        rep = probe_lipschitz(spec, 200, rng())
        assert rep.record("h_lipschitz_y").max_ratio == pytest.approx(0.05, abs=1e-12)
        assert rep.record("h_lipschitz_z").max_ratio == 0.0
        assert rep.record("h_lipschitz_q").max_ratio == 0.0

    def test_scaled_state_jump_quotient(self):
        # beta = 0.3 x min(1,|e|): dividing the mark factor leaves 0.3
        base = catalog("MERTON_STYLE")
        beta = lambda t, x, e: 0.3 * x * np.minimum(1.0, np.abs(np.asarray(e, float)))[..., None]
        spec = dataclasses.replace(base, beta=beta,
                                   declared={**base.declared, "beta": 0.3})
        rep = probe_lipschitz(spec, 200, rng())
        assert rep.record("beta_lipschitz").max_ratio == pytest.approx(0.3, abs=1e-10)
        assert rep.record("beta_lipschitz").passed

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_catalog_instances_pass(self, name):
        rep = probe_lipschitz(catalog(name), 300, rng())
        assert rep.all_passed, rep.to_json()

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            probe_lipschitz(catalog("CONSTANT"), 1, rng())


class TestProbeGrowth:
    def test_quadratic_terminal(self):
        base = catalog("LINEAR_DRIFT")
        spec = dataclasses.replace(base, g=(lambda x: x[..., 0] ** 2,))
        rep = probe_growth(spec, 40, rng())
        assert rep.record("g0_growth").fitted_p == pytest.approx(2.0, abs=0.1)

    def test_constant_obstacle(self):
        rep = probe_growth(catalog("CONSTANT"), 40, rng())
        assert rep.record("obstacle_growth").fitted_p == pytest.approx(0.0, abs=0.1)

    def test_put_payoff_sublinear(self):
        rep = probe_growth(catalog("AMERICAN_PUT_STYLE"), 40, rng())
        assert rep.record("g0_growth").fitted_p <= 1.0 + 1e-9

    def test_nonfinite_named(self):
        base = catalog("LINEAR_DRIFT")
        bad = lambda x: np.where(x[..., 0] > 100.0, np.inf, 1.0)
        spec = dataclasses.replace(base, g=(bad,))
        with pytest.raises(ValueError, match="g0"):
            probe_growth(spec, 40, rng())

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_catalog_fits_finite(self, name):
        rep = probe_growth(catalog(name), 40, rng())
        for r in rep.records:
            assert np.isfinite(r.fitted_c) and np.isfinite(r.fitted_p)

    def test_report_serializes(self):
        rep = probe_growth(catalog("CONSTANT"), 10, rng())
        assert "records" in rep.to_json()


class TestDriver:
    def setup_method(self):
        self.m4 = truncate(power_density_measure(1.0, 0.5), 4)

    def test_zero_zeta_equals_plain_h(self):
        for mode in ("NONLOCAL_LINEAR", "NONLOCAL_NORM"):
            spec = catalog("INFINITE_ACTIVITY_PUT", q_coef=0.7, driver_mode=mode)
            x, y, z = np.array([0.8]), np.array([0.4]), np.array([0.1])
            got = driver(spec, 0, 0.2, x, y, z, lambda e: 0.0 * e, self.m4)
            want = spec.h[0](0.2, x[None, :], y[None, :], z[None, :], 0.0)[0]
            assert got == want

    def test_linear_mode_uses_gamma_weight(self):
        spec = catalog("INFINITE_ACTIVITY_PUT", q_coef=1.0)
        x, y, z = np.array([0.8]), np.array([0.0]), np.array([0.0])
        got = driver(spec, 0, 0.0, x, y, z, lambda e: np.abs(e), self.m4)
        q = self.m4.integrate(lambda e: 0.5 * np.minimum(1, np.abs(e)) * np.abs(e))
        assert got == pytest.approx(q, rel=1e-12)

    def test_norm_mode_is_l2_norm(self):
        spec = catalog("INFINITE_ACTIVITY_PUT", q_coef=1.0,
                       driver_mode="NONLOCAL_NORM")
        assert spec.driver_mode is DriverMode.NONLOCAL_NORM
        x, y, z = np.array([0.8]), np.array([0.0]), np.array([0.0])
        got = driver(spec, 0, 0.0, x, y, z, lambda e: e, self.m4)
        assert got == pytest.approx(np.sqrt(self.m4.integrate(lambda e: e ** 2)),
                                    rel=1e-12)

    def test_atomic_measure_drift(self):
        t = truncate(atomic_measure([1.0, -1.0], [2.0, 1.0]), 2)
        spec = catalog("MERTON_STYLE")
        got = driver(spec, 0, 0.0, np.array([0.0]), np.array([0.0]),
                     np.array([0.0]), lambda e: e, t)
        assert got == 0.0  # h ignores q for this instance
