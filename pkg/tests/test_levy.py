import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2

from jumpobstacle.levy import (
    EvaluationError,
    LevyMeasure,
    MeasureKind,
    atomic_measure,
    mass_above,
    power_density_measure,
    truncate,
)

QUAD_TOL = 1e-10


def power_mass(a, b, alpha=0.5, c=1.0):
    # closed-form antiderivative of c*e^(-1-alpha) on 0 < a < b
    return c * (a ** (-alpha) - b ** (-alpha)) / alpha


class TestConstruction:
    def test_power_density_is_infinite_activity(self):
        m = power_density_measure(intensity=1.0, alpha=0.5)
        assert m.total_mass == np.inf
        assert m.kind is MeasureKind.INFINITE_DENSITY

    def test_declared_finite_but_divergent_fails(self):
        with pytest.raises(ValueError):
            LevyMeasure(MeasureKind.FINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])

    def test_declared_infinite_but_finite_fails(self):
        with pytest.raises(ValueError):
            LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: 1.0,
                        support=[(0.0, 1.0)])

    def test_square_nonintegrable_fails(self):
        # alpha = 2 boundary case: e^2 * e^(-3) = 1/e is not integrable at 0
        with pytest.raises(ValueError):
            LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -3.0,
                        support=[(0.0, 1.0)])

    def test_atoms_at_zero_or_nonpositive_weight_fail(self):
        with pytest.raises(ValueError):
            atomic_measure([0.0, 1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            atomic_measure([1.0], [0.0])

    def test_straddling_support_fails(self):
        with pytest.raises(ValueError):
            LevyMeasure(MeasureKind.FINITE_DENSITY,
                        density=lambda e: 1.0, support=[(-1.0, 1.0)])


class TestMassAbove:
    def test_power_density_closed_form(self):
        m = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])
        # oracle: antiderivative -2 e^(-1/2)
        assert mass_above(m, 0.5) == pytest.approx(2.0 * (np.sqrt(2.0) - 1.0),
                                                   abs=QUAD_TOL)

    def test_atoms_above_half(self):
        m = atomic_measure([-1.0, 1.0], [0.5, 0.5])
        assert mass_above(m, 0.5) == 1.0

    def test_above_sup_support_is_zero(self):
        assert mass_above(atomic_measure([-1.0, 1.0], [0.5, 0.5]), 2.0) == 0.0
        assert mass_above(power_density_measure(), 2.0) == 0.0

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ValueError):
            mass_above(power_density_measure(), 0.0)

    def test_monotone_in_eps(self):
        m = power_density_measure(intensity=0.7, alpha=0.8)
        eps = np.geomspace(1e-3, 2.0, 25)
        masses = [mass_above(m, e) for e in eps]
        assert all(a >= b - 1e-12 for a, b in zip(masses[:-1], masses[1:]))


class TestTruncate:
    def test_cutoff_below_atoms_is_identity(self):
        m = atomic_measure([-0.4, 0.3, 0.9], [1.0, 2.0, 0.5])
        t = truncate(m, 10)
        assert t.total_mass == pytest.approx(3.5)
        assert np.array_equal(np.sort(np.abs(t.rule.nodes)), [0.3, 0.4, 0.9])

    def test_power_density_k4_mass(self):
        m = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])
        t = truncate(m, 4)
        assert t.total_mass == pytest.approx(power_mass(0.25, 1.0), abs=QUAD_TOL)
        assert t.total_mass == pytest.approx(2.0, abs=QUAD_TOL)

    def test_k1_on_unit_support_is_empty(self):
        m = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])
        assert truncate(m, 1).total_mass == pytest.approx(0.0, abs=1e-12)

    def test_k0_rejected(self):
        with pytest.raises(ValueError):
            truncate(power_density_measure(), 0)

    def test_mass_nondecreasing_in_k(self):
        m = power_density_measure(intensity=1.0, alpha=0.5)
        masses = [truncate(m, k).total_mass for k in (1, 2, 4, 8, 16, 32)]
        assert all(a <= b + 1e-12 for a, b in zip(masses[:-1], masses[1:]))


class TestIntegrate:
    def setup_method(self):
        one_sided = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                                density=lambda e: abs(e) ** -1.5,
                                support=[(0.0, 1.0)])
        self.t4 = truncate(one_sided, 4)
        self.sym = truncate(power_density_measure(intensity=1.0, alpha=0.5), 4)

    def test_zero_function(self):
        assert self.t4.integrate(lambda e: 0.0 * e) == 0.0

    def test_odd_function_symmetric_measure(self):
        assert abs(self.sym.integrate(lambda e: e)) < 1e-10

    def test_square_against_antiderivative(self):
        # integral of e^2 * e^(-1.5) over [1/4, 1] = (2/3)(1 - 1/8)
        assert self.t4.integrate(lambda e: e ** 2) == pytest.approx(
            (2.0 / 3.0) * (1.0 - 0.125), abs=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        phi = lambda e: np.sin(3.0 * e)
        psi = lambda e: e ** 2 - 0.3 * e
        for a, b in rng.normal(size=(5, 2)):
            lhs = self.sym.integrate(lambda e: a * phi(e) + b * psi(e))
            rhs = a * self.sym.integrate(phi) + b * self.sym.integrate(psi)
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_nonfinite_integrand_named(self):
        with pytest.raises(EvaluationError, match="node"):
            self.t4.integrate(lambda e: np.where(e > 0.5, np.inf, 1.0))

    def test_min_one_square_matches_adaptive_quadrature(self):
        for k in (2, 8, 32):
            t = truncate(power_density_measure(intensity=0.8, alpha=0.7), k)
            approx = t.integrate(lambda e: np.minimum(1.0, e ** 2))
            exact = 2.0 * quad(lambda u: min(1.0, u * u) * 0.8 * u ** -1.7,
                               1.0 / k, 1.0, limit=200)[0]
            assert approx == pytest.approx(exact, rel=1e-6)

    def test_compensator_drift_on_atoms(self):
        t = truncate(atomic_measure([1.0, -1.0], [2.0, 1.0]), 4)
        assert t.compensator_drift(lambda e: e) == pytest.approx(1.0)
        assert t.compensator_drift(lambda e: 0.0 * e) == 0.0


class TestSampling:
    def test_zero_mass_returns_empty(self):
        m = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])
        t = truncate(m, 1)
        assert t.sample_jumps(1.0, np.random.default_rng(0)).size == 0

    def test_atomic_rates_and_ratio(self):
        # atoms {+1: 2, -1: 1}: Poisson(3*dt) counts, 2:1 mark split
        t = truncate(atomic_measure([1.0, -1.0], [2.0, 1.0]), 2)
        rng = np.random.default_rng(123)
        slices = 100_000
        counts = rng.poisson(t.total_mass * 1.0, size=slices)
        total = int(counts.sum())
        marks = t.sample_marks(total, rng)
        mean_count = counts.mean()
        se_count = counts.std(ddof=1) / np.sqrt(slices)
        assert abs(mean_count - 3.0) < 3.0 * se_count
        p_plus = (marks > 0).mean()
        se_p = np.sqrt(p_plus * (1 - p_plus) / total)
        assert abs(p_plus - 2.0 / 3.0) < 3.0 * se_p

    def test_power_density_mean_count(self):
        m = LevyMeasure(MeasureKind.INFINITE_DENSITY,
                        density=lambda e: abs(e) ** -1.5,
                        support=[(0.0, 1.0)])
        t = truncate(m, 4)  # mass exactly 2.0
        rng = np.random.default_rng(99)
        slices = 1_000_000
        counts = rng.poisson(t.total_mass * 0.01, size=slices)
        se = counts.std(ddof=1) / np.sqrt(slices)
        assert abs(counts.mean() - 0.02) < 3.0 * se

    def test_chi_square_goodness_of_fit(self):
        m = power_density_measure(intensity=1.0, alpha=0.5)
        t = truncate(m, 8)
        rng = np.random.default_rng(2024)
        n = 1_000_000
        marks = t.sample_marks(n, rng)
        # 20 bins: 10 geometric per side; expected masses by adaptive quadrature
        edges_pos = np.geomspace(1.0 / 8.0, 1.0, 11)
        bins = np.concatenate([-edges_pos[::-1], edges_pos])
        observed, _ = np.histogram(marks, bins=bins)
        observed = np.concatenate([observed[:10], observed[-10:]])
        expected = []
        for a, b in zip(edges_pos[:-1], edges_pos[1:]):
            p, _ = quad(lambda u: u ** -1.5, a, b)
            expected.append(p)
        expected = np.asarray(expected)
        expected = np.concatenate([expected[::-1], expected])
        expected = expected / expected.sum() * n
        stat = np.sum((observed - expected) ** 2 / expected)
        assert stat < chi2.ppf(1.0 - 0.001, df=19)

    def test_marks_respect_cutoff(self):
        t = truncate(power_density_measure(), 16)
        marks = t.sample_marks(10_000, np.random.default_rng(5))
        assert np.all(np.abs(marks) >= 1.0 / 16.0 - 1e-12)
        assert np.all(np.abs(marks) <= 1.0)
