"""Jump measures on the punctured real line, their truncations and quadrature.

A jump measure here is either a finite collection of weighted atoms or a
density on a union of bounded intervals of R\\{0}.  Infinite-activity
densities (non-integrable at the origin) are supported as long as they
integrate min(1, e^2).  Truncating at level 1/k removes all marks with
|e| < 1/k and always yields a finite measure, which is what both the
Monte Carlo simulator and the grid solver consume.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad


class MeasureKind(enum.Enum):
    FINITE_ATOMIC = "FINITE_ATOMIC"
    FINITE_DENSITY = "FINITE_DENSITY"
    INFINITE_DENSITY = "INFINITE_DENSITY"


class EvaluationError(RuntimeError):
    """An integrand returned a non-finite value at a quadrature node."""


_SHELLS = 200          # geometric shells used to probe integrability at 0
_SHELL_TOL = 1e-13     # shell contribution considered converged below this
_GL_ORDER = 8          # Gauss-Legendre points per subinterval
_CDF_POINTS = 4096     # tabulation size for inverse-CDF sampling


def _validate_support(support):
    pieces = []
    for lo, hi in support:
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("support intervals must be bounded")
        if not lo < hi:
            raise ValueError(f"empty support interval ({lo}, {hi})")
        if lo < 0.0 < hi:
            raise ValueError("support interval may not straddle 0; split it")
        pieces.append((lo, hi))
    if not pieces:
        raise ValueError("support must contain at least one interval")
    return sorted(pieces)


def _shell_integrals(rho, piece, integrand):
    """Contributions of geometric shells of `piece` shrinking toward 0.

    Yields quad values of integrand(e)*rho(e) over [r/2, r], [r/4, r/2], ...
    on the side of `piece` that touches 0.  Used to decide integrability.
    """
    lo, hi = piece
    if lo >= 0:
        inner, outer, sign = lo, hi, 1.0
    else:
        inner, outer, sign = -hi, -lo, -1.0
    r = outer
    for _ in range(_SHELLS):
        nxt = max(inner, r / 2.0)
        if nxt >= r:
            return
        val, _err = quad(lambda u: integrand(u) * rho(sign * u), nxt, r, limit=200)
        yield val
        r = nxt
        if r <= inner:
            return


def _near_origin_sum(rho, pieces, integrand):
    """Sum of integrand*rho over all pieces, or inf if the shell sums diverge."""
    total = 0.0
    for piece in pieces:
        prev = None
        for val in _shell_integrals(rho, piece, integrand):
            total += val
            if prev is not None and prev > _SHELL_TOL and val >= 0.999 * prev:
                return math.inf
            if val < _SHELL_TOL:
                break
            prev = val
        else:
            # shells exhausted without the contribution dying out
            if prev is not None and prev > 1e-9:
                return math.inf
    return total


class LevyMeasure:
    """A sigma-finite jump measure with atoms or a density on R\\{0}.

    Construction verifies numerically that min(1, e^2) is integrable and
    that the declared kind matches the actual activity of the density.
    """

    def __init__(self, kind, atoms=None, weights=None, density=None,
                 support=None, density_params=None):
        self.kind = MeasureKind(kind)
        self.density_params = dict(density_params or {})
        if self.kind is MeasureKind.FINITE_ATOMIC:
            atoms = np.asarray([] if atoms is None else atoms, dtype=float)
            weights = np.asarray([] if weights is None else weights, dtype=float)
            if atoms.ndim != 1 or atoms.shape != weights.shape:
                raise ValueError("atoms and weights must be 1-d arrays of equal length")
            if np.any(atoms == 0.0):
                raise ValueError("atoms must avoid 0")
            if np.any(weights <= 0.0):
                raise ValueError("atom weights must be positive")
            order = np.argsort(atoms)
            self.atoms = atoms[order]
            self.weights = weights[order]
            self.density = None
            self.support = None
            self._mass = float(self.weights.sum())
        else:
            if density is None or support is None:
                raise ValueError("density kinds need a density callable and a support")
            self.atoms = None
            self.weights = None
            self.density = density
            self.support = _validate_support(support)
            sq = _near_origin_sum(density, self.support, lambda u: min(1.0, u * u))
            if not math.isfinite(sq):
                raise ValueError("density does not integrate min(1, e^2) near 0")
            mass = _near_origin_sum(density, self.support, lambda u: 1.0)
            if self.kind is MeasureKind.FINITE_DENSITY:
                if not math.isfinite(mass):
                    raise ValueError("declared FINITE_DENSITY but total mass diverges")
                self._mass = mass
            else:
                if math.isfinite(mass):
                    raise ValueError("declared INFINITE_DENSITY but total mass is finite")
                self._mass = math.inf

    @property
    def total_mass(self):
        return self._mass

    def sup_support(self):
        """Largest |e| carrying mass."""
        if self.kind is MeasureKind.FINITE_ATOMIC:
            return float(np.max(np.abs(self.atoms))) if self.atoms.size else 0.0
        return max(max(abs(lo), abs(hi)) for lo, hi in self.support)

    def __repr__(self):
        return f"LevyMeasure(kind={self.kind.value}, mass={self._mass})"


def power_density_measure(intensity=1.0, alpha=0.5, two_sided=True):
    """Measure with density intensity*|e|^(-1-alpha) on 0 < |e| <= 1.

    For alpha in (0, 2) this has infinite total mass but integrates
    min(1, e^2); it is the stock infinite-activity example.
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    if intensity <= 0.0:
        raise ValueError("intensity must be positive")
    c, a = float(intensity), float(alpha)
    rho = lambda e: c * abs(e) ** (-1.0 - a)
    support = [(-1.0, 0.0), (0.0, 1.0)] if two_sided else [(0.0, 1.0)]
    return LevyMeasure(MeasureKind.INFINITE_DENSITY, density=rho, support=support,
                       density_params={"intensity": c, "alpha": a})


def atomic_measure(atoms, weights):
    return LevyMeasure(MeasureKind.FINITE_ATOMIC, atoms=atoms, weights=weights)


def mass_above(measure: LevyMeasure, eps: float) -> float:
    """Mass of {|e| >= eps}; finite for every eps > 0."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if measure.kind is MeasureKind.FINITE_ATOMIC:
        return float(measure.weights[np.abs(measure.atoms) >= eps].sum())
    total = 0.0
    for lo, hi in measure.support:
        if lo >= 0:
            a, b = max(lo, eps), hi
        else:
            a, b = lo, min(hi, -eps)
        if a < b:
            val, _ = quad(measure.density, a, b, limit=200)
            total += val
    return total


def _geometric_subintervals(inner, outer):
    """Boundaries of ratio-2 subintervals of [inner, outer], refined toward inner."""
    pts = [outer]
    while pts[-1] / 2.0 > inner * (1.0 + 1e-12):
        pts.append(pts[-1] / 2.0)
    pts.append(inner)
    return pts[::-1]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights approximating integrals against a truncated measure."""

    nodes: np.ndarray
    weights: np.ndarray
    scheme: str
    verification: dict = field(default_factory=dict, compare=False)

    @property
    def node_count(self):
        return self.nodes.size


def _build_rule(base: LevyMeasure, cutoff: float) -> QuadratureRule:
    if base.kind is MeasureKind.FINITE_ATOMIC:
        keep = np.abs(base.atoms) >= cutoff
        return QuadratureRule(base.atoms[keep], base.weights[keep], "atoms")
    gl_x, gl_w = np.polynomial.legendre.leggauss(_GL_ORDER)
    nodes, weights = [], []
    for lo, hi in base.support:
        if lo >= 0:
            inner, outer, sign = max(lo, cutoff), hi, 1.0
        else:
            inner, outer, sign = max(-hi, cutoff), -lo, -1.0
        if inner >= outer:
            continue
        bounds = _geometric_subintervals(inner, outer)
        for a, b in zip(bounds[:-1], bounds[1:]):
            half, mid = 0.5 * (b - a), 0.5 * (a + b)
            xs = sign * (mid + half * gl_x)
            ws = half * gl_w * np.asarray([base.density(x) for x in xs])
            nodes.append(xs)
            weights.append(ws)
    if not nodes:
        return QuadratureRule(np.empty(0), np.empty(0), "gauss-legendre-geometric")
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    order = np.argsort(nodes)
    return QuadratureRule(nodes[order], weights[order], "gauss-legendre-geometric")


class TruncatedMeasure:
    """Restriction of a jump measure to {|e| >= 1/k}; always finite."""

    def __init__(self, base: LevyMeasure, k: int):
        if k < 1:
            raise ValueError("truncation index k must be >= 1")
        self.base = base
        self.k = int(k)
        self.cutoff = 1.0 / k
        self.total_mass = mass_above(base, self.cutoff)
        self.rule = _build_rule(base, self.cutoff)
        self._verify_rule()
        self._cdf_grid = None
        self._cdf_vals = None

    def _verify_rule(self):
        """Check the rule against adaptive quadrature on 1, e, e^2."""
        checks = {}
        for name, phi in (("one", lambda e: 1.0), ("e", lambda e: e),
                          ("e2", lambda e: e * e)):
            approx = float(np.dot(self.rule.weights,
                                  [phi(e) for e in self.rule.nodes]))
            if self.base.kind is MeasureKind.FINITE_ATOMIC:
                exact = approx
            else:
                exact = 0.0
                for lo, hi in self.base.support:
                    a = max(lo, self.cutoff) if lo >= 0 else lo
                    b = hi if lo >= 0 else min(hi, -self.cutoff)
                    if a < b:
                        val, _ = quad(lambda u: phi(u) * self.base.density(u),
                                      a, b, limit=200)
                        exact += val
            err = abs(approx - exact)
            scale = max(1.0, abs(exact))
            if err > 1e-8 * scale:
                raise RuntimeError(
                    f"quadrature rule fails verification on phi={name}: "
                    f"|{approx} - {exact}| = {err}")
            checks[name] = err
        self.rule.verification.update(checks)

    # -- integration ----------------------------------------------------

    def integrate(self, phi) -> float:
        """Sum of w_j * phi(e_j) over the rule; deterministic for a fixed rule."""
        nodes = self.rule.nodes
        if nodes.size == 0:
            return 0.0
        vals = np.asarray(phi(nodes), dtype=float)
        if vals.shape != nodes.shape:
            vals = np.asarray([phi(e) for e in nodes], dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            j = int(np.argmax(bad))
            raise EvaluationError(
                f"integrand returned non-finite value at node e={nodes[j]!r}")
        return float(np.dot(self.rule.weights, vals))

    def compensator_drift(self, phi) -> float:
        """Per-unit-time drift removed by compensating jumps of size phi."""
        return self.integrate(phi)

    # -- sampling --------------------------------------------------------

    def _ensure_cdf(self):
        if self._cdf_grid is not None or self.total_mass == 0.0:
            return
        if self.base.kind is MeasureKind.FINITE_ATOMIC:
            self._cdf_grid = self.rule.nodes
            self._cdf_vals = np.cumsum(self.rule.weights)
            return
        chunks = []
        for lo, hi in self.base.support:
            if lo >= 0:
                inner, outer, sign = max(lo, self.cutoff), hi, 1.0
            else:
                inner, outer, sign = max(-hi, self.cutoff), -lo, -1.0
            if inner >= outer:
                continue
            # log spacing concentrates points where the density peaks
            chunks.append(np.sort(sign * np.geomspace(inner, outer, _CDF_POINTS)))
        chunks.sort(key=lambda g: g[0])
        grid = np.concatenate(chunks)
        dens = np.asarray([self.base.density(e) for e in grid])
        mids = 0.5 * (dens[1:] + dens[:-1]) * np.diff(grid)
        # cells bridging two support pieces carry no mass
        edge = (np.cumsum([c.size for c in chunks[:-1]]) - 1).astype(int)
        mids[edge] = 0.0
        cdf = np.zeros_like(grid)
        cdf[1:] = np.cumsum(mids)
        self._cdf_grid = grid
        self._cdf_vals = cdf

    def marks_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map uniform(0,1) draws through the tabulated inverse CDF."""
        u = np.asarray(u, dtype=float)
        if u.size == 0:
            return np.empty(0)
        if self.total_mass == 0.0:
            raise ValueError("cannot sample marks from a zero-mass measure")
        self._ensure_cdf()
        scaled = u * self._cdf_vals[-1]
        if self.base.kind is MeasureKind.FINITE_ATOMIC:
            idx = np.searchsorted(self._cdf_vals, scaled, side="left")
            return self._cdf_grid[np.minimum(idx, self._cdf_grid.size - 1)]
        return np.interp(scaled, self._cdf_vals, self._cdf_grid)

    def sample_marks(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n i.i.d. marks from the normalized truncated measure."""
        if n == 0:
            return np.empty(0)
        return self.marks_from_uniforms(rng.random(n))

    def sample_jumps(self, dt: float, rng: np.random.Generator) -> np.ndarray:
        """Marks of a Poisson slice of length dt; empty if the mass is 0."""
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.total_mass == 0.0:
            return np.empty(0)
        n = rng.poisson(self.total_mass * dt)
        return self.sample_marks(int(n), rng)

    def __repr__(self):
        return (f"TruncatedMeasure(k={self.k}, cutoff={self.cutoff:g}, "
                f"mass={self.total_mass:.6g}, nodes={self.rule.node_count})")


def truncate(measure: LevyMeasure, k: int) -> TruncatedMeasure:
    """Restrict `measure` to marks with |e| >= 1/k."""
    return TruncatedMeasure(measure, k)
