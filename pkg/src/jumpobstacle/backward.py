"""Backward regression solver for the discretized reflected system with jumps.

The scheme runs backward over the simulated paths.  At each step it fits
the value function at the next time from the cross-section, estimates
the jump component through the fitted-value increment at shifted states,
builds the scalar driver argument by quadrature against the truncated
measure, applies the driver explicitly with the regression-predicted
conditional means, and finally projects onto the obstacle.  Projection
makes the discrete Skorokhod identity (Y - obstacle) * dK = 0 exact per
path and per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problems import DriverMode, driver_q, fit_power_bound

_DEGENERATE_SPREAD = 1e-10


class RegressionError(RuntimeError):
    """The regression design lost rank on a non-degenerate sample."""


class DriverError(RuntimeError):
    """The driver returned a non-finite value."""


@dataclass
class FitResult:
    kind: str
    coef: np.ndarray
    meta: dict
    residual: float
    cond: float

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        if self.kind == "constant":
            out = np.full(flat.shape[0], self.coef[0])
        elif self.kind == "poly":
            design = _poly_design(flat, self.meta["degree"],
                                  self.meta["mu"], self.meta["sd"])
            out = design @ self.coef
        else:  # pwlinear
            edges = self.meta["edges"]
            xs = flat[:, 0]
            bins = np.clip(np.searchsorted(edges[1:-1], xs, side="right"),
                           0, len(edges) - 2)
            out = self.coef[bins, 0] + self.coef[bins, 1] * xs
        return out.reshape(batch)


def _poly_design(flat, degree, mu, sd):
    z = (flat - mu) / sd
    cols = [np.ones(flat.shape[0])]
    # total-degree monomials; plain powers when the state is scalar
    if flat.shape[1] == 1:
        for p in range(1, degree + 1):
            cols.append(z[:, 0] ** p)
    else:
        from itertools import combinations_with_replacement
        for deg in range(1, degree + 1):
            for combo in combinations_with_replacement(range(flat.shape[1]), deg):
                col = np.ones(flat.shape[0])
                for j in combo:
                    col = col * z[:, j]
                cols.append(col)
    return np.column_stack(cols)


class RegressionBasis:
    """Least-squares family for conditional expectations: polynomial or
    piecewise-linear on quantile bins.  Tracks the worst conditioning seen."""

    def __init__(self, family="poly", degree=4, bins=64):
        if family not in ("poly", "pwlinear"):
            raise ValueError("family must be 'poly' or 'pwlinear'")
        self.family = family
        self.degree = int(degree)
        self.bins = int(bins)
        self.max_cond = 1.0

    def fit(self, x, y) -> FitResult:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        spread = float(np.ptp(x, axis=0).max())
        scale = 1.0 + float(np.abs(x).max(initial=0.0))
        if spread < _DEGENERATE_SPREAD * scale:
            c = float(y.mean())
            return FitResult("constant", np.array([c]), {},
                             float(((y - c) ** 2).sum()), 1.0)
        if self.family == "poly":
            return self._fit_poly(x, y)
        if x.shape[1] != 1:
            raise ValueError("pwlinear basis requires a scalar state")
        return self._fit_pwlinear(x, y)

    def _fit_poly(self, x, y):
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd < _DEGENERATE_SPREAD, 1.0, sd)
        design = _poly_design(x, self.degree, mu, sd)
        coef, res, rank, sv = np.linalg.lstsq(design, y, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if rank < design.shape[1]:
            raise RegressionError(
                f"rank-deficient polynomial design: rank {rank} < "
                f"{design.shape[1]}, condition number {cond:.3e}")
        self.max_cond = max(self.max_cond, cond)
        sse = float(res[0]) if res.size else float(((design @ coef - y) ** 2).sum())
        return FitResult("poly", coef, {"degree": self.degree, "mu": mu, "sd": sd},
                         sse, cond)

    def _fit_pwlinear(self, x, y):
        xs = x[:, 0]
        edges = np.quantile(xs, np.linspace(0.0, 1.0, self.bins + 1))
        bins = np.clip(np.searchsorted(edges[1:-1], xs, side="right"),
                       0, self.bins - 1)
        coef = np.zeros((self.bins, 2))
        sse = 0.0
        for b in range(self.bins):
            mask = bins == b
            if not mask.any():
                continue
            xb, yb = xs[mask], y[mask]
            if xb.size >= 2 and np.ptp(xb) > _DEGENERATE_SPREAD * (1 + np.abs(xb).max()):
                slope = np.cov(xb, yb, bias=True)[0, 1] / xb.var()
                intercept = yb.mean() - slope * xb.mean()
            else:
                slope, intercept = 0.0, yb.mean()
            coef[b] = (intercept, slope)
            sse += float(((intercept + slope * xb - yb) ** 2).sum())
        return FitResult("pwlinear", coef, {"edges": edges}, sse, 1.0)


@dataclass
class BackwardSolution:
    """Per-step estimates of the backward quadruple plus the fitted functions."""

    spec: object
    m_trunc: object
    grid: object
    u0: np.ndarray                 # (m,)
    u0_stderr: np.ndarray          # (m,)
    Y: np.ndarray                  # (n_steps+1, P, m)
    Z: np.ndarray                  # (n_steps, P, m, d)
    q: np.ndarray                  # (n_steps, P, m) nonlocal driver argument
    dK: np.ndarray                 # (n_steps, P, m) >= 0
    value_fits: list               # value_fits[n][i]: fitted value fn at t_n
    cont_fits: list                # cont_fits[n][i]: continuation fn at t_n
    states: np.ndarray = None      # reference to the bundle's states
    mode: str = "reflected"

    def k_total(self):
        return self.dK.sum(axis=0).mean(axis=0)

    def skorokhod_gap(self):
        """max over paths/components of |sum_n (Y_n - obstacle_n) dK_n|."""
        nodes = self.grid.nodes
        total = np.zeros(self.Y.shape[1:])
        for n in range(self.dK.shape[0]):
            ell = self.spec.obstacle(float(nodes[n]), self.states[n])
            total += (self.Y[n] - ell[:, None]) * self.dK[n]
        return float(np.abs(total).max())

    def obstacle_slack(self):
        """min over steps/paths/components of Y - obstacle (>= 0 when reflected)."""
        nodes = self.grid.nodes
        worst = np.inf
        for n in range(self.Y.shape[0]):
            ell = self.spec.obstacle(float(nodes[n]), self.states[n])
            worst = min(worst, float((self.Y[n] - ell[:, None]).min()))
        return worst


def _jump_increments(spec, fit, t, x, m_trunc):
    """Fitted-value increments at jump-shifted states: (P, n_quad)."""
    nodes = m_trunc.rule.nodes
    if nodes.size == 0:
        return np.zeros((x.shape[0], 0))
    shift = np.asarray(spec.beta(t, x[:, None, :], nodes))
    shifted = x[:, None, :] + np.broadcast_to(shift,
                                              (x.shape[0], nodes.size, x.shape[1]))
    return fit.predict(shifted) - fit.predict(x)[:, None]


def _backward_pass(spec, bundle, m_trunc, basis, projection):
    """Shared backward loop; `projection(ytilde, ell)` returns (Y, dK)."""
    grid = bundle.grid
    X = bundle.states
    N, P = grid.n_steps, bundle.n_paths
    m, d = spec.m, spec.d
    dt = grid.dt
    nodes_t = grid.nodes

    Y = np.empty((N + 1, P, m))
    Z = np.zeros((N, P, m, d))
    qarr = np.zeros((N, P, m))
    dK = np.zeros((N, P, m))
    value_fits = [None] * (N + 1)
    cont_fits = [None] * N

    for i in range(m):
        Y[N, :, i] = spec.g[i](X[N])

    for n in range(N - 1, -1, -1):
        t = float(nodes_t[n])
        Xn, Xn1 = X[n], X[n + 1]
        fits_v = [basis.fit(Xn1, Y[n + 1, :, i]) for i in range(m)]
        value_fits[n + 1] = fits_v

        fits_c = [basis.fit(Xn, Y[n + 1, :, i]) for i in range(m)]
        cont_fits[n] = fits_c
        yhat = np.column_stack([f.predict(Xn) for f in fits_c])

        for i in range(m):
            for l in range(d):
                target = Y[n + 1, :, i] * bundle.brownian[n, :, l] / dt
                Z[n, :, i, l] = basis.fit(Xn, target).predict(Xn)

        if m_trunc.rule.nodes.size:
            for i in range(m):
                inc = _jump_increments(spec, fits_v[i], t, Xn, m_trunc)
                qarr[n, :, i] = driver_q(spec, i, t, Xn, inc, m_trunc)

        ell = spec.obstacle(t, Xn)
        for i in range(m):
            hval = spec.h[i](t, Xn, yhat, Z[n, :, i, :], qarr[n, :, i])
            if not np.all(np.isfinite(hval)):
                raise DriverError(f"driver {i} returned non-finite value at step {n}")
            ytilde = yhat[:, i] + dt * hval
            Y[n, :, i], dK[n, :, i] = projection(ytilde, ell)

    u0 = Y[0, 0, :].copy()
    u0_stderr = Y[1].std(axis=0, ddof=1) / np.sqrt(P)
    return BackwardSolution(spec=spec, m_trunc=m_trunc, grid=grid, u0=u0,
                            u0_stderr=u0_stderr, Y=Y, Z=Z, q=qarr, dK=dK,
                            value_fits=value_fits, cont_fits=cont_fits, states=X)


def solve_reflected(spec, bundle, m_trunc, basis) -> BackwardSolution:
    """Backward solve with obstacle projection after the driver step."""

    def projection(ytilde, ell):
        y = np.maximum(ytilde, ell)
        return y, y - ytilde

    sol = _backward_pass(spec, bundle, m_trunc, basis, projection)
    sol.mode = "reflected"
    return sol


def solve_penalized(spec, bundle, m_trunc, basis, n_penalty) -> BackwardSolution:
    """Backward solve with the obstacle enforced by penalization.

    The penalty dt * n_penalty * (obstacle - Y)^+ is added to the driver
    and solved per path in closed form (the one-sided linear equation has
    an explicit solution), which keeps the scheme stable and monotone in
    n_penalty for any step size; Y approaches the projected value from
    below as n_penalty grows.
    """
    if n_penalty < 0:
        raise ValueError("n_penalty must be nonnegative")
    c = float(n_penalty)

    def projection(ytilde, ell):
        dt_c = bundle.grid.dt * c
        binding = ell > ytilde
        y = np.where(binding, (ytilde + dt_c * ell) / (1.0 + dt_c), ytilde)
        return y, y - ytilde

    sol = _backward_pass(spec, bundle, m_trunc, basis, projection)
    sol.mode = "penalized"
    return sol


# ---------------------------------------------------------------------------
# structural checks against the grid oracle and the regularity bounds
# ---------------------------------------------------------------------------

@dataclass
class RepresentationReport:
    rel_l2: float
    abs_l2: float
    oracle_l2: float
    excluded_fraction: float
    samples: int


def representation_check(sol: BackwardSolution, oracle_u, bundle,
                         max_paths=2000) -> RepresentationReport:
    """Compare the fitted jump increments against the oracle's increments.

    Measures the relative L2(dt x dP x d lambda_k) distance between the
    solver's U estimate and u_oracle(t, x + beta) - u_oracle(t, x) over a
    deterministic path subsample.  States outside the oracle window are
    excluded and their fraction reported.
    """
    spec, m_trunc = sol.spec, sol.m_trunc
    grid = bundle.grid
    nodes = m_trunc.rule.nodes
    weights = m_trunc.rule.weights
    stride = max(1, bundle.n_paths // max_paths)
    sel = np.arange(0, bundle.n_paths, stride)
    dt = grid.dt

    num = 0.0
    den = 0.0
    excluded = 0
    total = 0
    for n in range(grid.n_steps):
        t = float(grid.nodes[n])
        x = bundle.states[n][sel]
        if nodes.size == 0:
            continue
        shift = np.asarray(spec.beta(t, x[:, None, :], nodes))
        shifted = x[:, None, :] + np.broadcast_to(shift,
                                                  (x.shape[0], nodes.size, x.shape[1]))
        inside_base = oracle_u.contains(x[:, 0])
        inside = inside_base[:, None] & oracle_u.contains(shifted[..., 0])
        total += inside.size
        excluded += int((~inside).sum())
        for i in range(sol.spec.m):
            fit = sol.value_fits[n + 1][i]
            lhs = fit.predict(shifted) - fit.predict(x)[:, None]
            base = oracle_u.evaluate_many(t, np.clip(
                x[:, 0], oracle_u.x_min, oracle_u.x_max), i)
            rhs = oracle_u.evaluate_many(t, np.clip(
                shifted[..., 0], oracle_u.x_min, oracle_u.x_max), i) - base[:, None]
            w = inside * weights
            num += dt * float(np.sum(w * (lhs - rhs) ** 2)) / sel.size
            den += dt * float(np.sum(w * rhs ** 2)) / sel.size
    abs_l2 = float(np.sqrt(num))
    oracle_l2 = float(np.sqrt(den))
    rel = 0.0 if den == 0.0 else float(np.sqrt(num / den))
    frac = 0.0 if total == 0 else excluded / total
    return RepresentationReport(rel_l2=rel, abs_l2=abs_l2, oracle_l2=oracle_l2,
                                excluded_fraction=frac, samples=total)


@dataclass
class FitReport:
    points: list
    values: list
    fitted_c: float
    fitted_p: float
    max_quotient: float = np.nan
    bands: list = field(default_factory=list)


def jump_norm_moment(sol: BackwardSolution, bundle, p=2, max_paths=4000):
    """E[(sum_n dt ||U_n||^2_{L2(lambda_k)})^{p/2}] from the fitted increments."""
    spec, m_trunc = sol.spec, sol.m_trunc
    grid = bundle.grid
    weights = m_trunc.rule.weights
    stride = max(1, bundle.n_paths // max_paths)
    sel = np.arange(0, bundle.n_paths, stride)
    acc = np.zeros((sel.size, spec.m))
    if m_trunc.rule.nodes.size == 0:
        return np.zeros(spec.m)
    for n in range(grid.n_steps):
        t = float(grid.nodes[n])
        x = bundle.states[n][sel]
        for i in range(spec.m):
            inc = _jump_increments(spec, sol.value_fits[n + 1][i], t, x, m_trunc)
            acc[:, i] += grid.dt * (inc ** 2) @ weights
    return (acc ** (p / 2.0)).mean(axis=0)


def lemma_moment_check(spec, m_trunc, grid, x_ladder, n_paths, seed, basis,
                       p=2, solver=solve_reflected):
    """Fit C(1+|x|^rho) over the x-ladder for the jump-norm moment."""
    from .forward import simulate
    points, values = [], []
    for j, x0 in enumerate(x_ladder):
        bundle = simulate(spec, m_trunc, grid, [x0], n_paths, seed + j)
        sol = solver(spec, bundle, m_trunc, basis)
        moment = float(jump_norm_moment(sol, bundle, p=p).max())
        points.append(float(x0))
        values.append(moment)
    c_fit, p_fit = fit_power_bound(np.asarray(values), np.abs(points))
    return FitReport(points=points, values=values, fitted_c=c_fit, fitted_p=p_fit,
                     max_quotient=float(np.max(values)))


def lipschitz_u_check(spec, m_trunc, grid, pairs, n_paths, seed, basis,
                      solver=solve_reflected):
    """Lipschitz quotients of the value estimate from shared-noise pairs."""
    from .forward import simulate_coupled
    quotients, bands, points = [], [], []
    for j, (xa, xb) in enumerate(pairs):
        ba, bb = simulate_coupled(spec, m_trunc, grid, [xa], [xb],
                                  n_paths, seed + j)
        sa = solver(spec, ba, m_trunc, basis)
        sb = solver(spec, bb, m_trunc, basis)
        gap = float(np.abs(sa.u0 - sb.u0).max())
        quot = gap / abs(xb - xa)
        band = 3.0 * float(np.hypot(sa.u0_stderr.max(),
                                    sb.u0_stderr.max())) / abs(xb - xa)
        quotients.append(quot)
        bands.append(band)
        points.append((float(xa), float(xb)))
    r1 = np.array([max(abs(a), 1e-12) for a, _ in points])
    r2 = np.array([max(abs(b), 1e-12) for _, b in points])
    c_fit, p_fit = fit_power_bound(np.asarray(quotients), r1, r2)
    return FitReport(points=points, values=quotients, fitted_c=c_fit,
                     fitted_p=p_fit, max_quotient=float(np.max(quotients)),
                     bands=bands)
