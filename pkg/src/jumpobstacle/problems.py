"""Coefficient bundles for the obstacle problems and numerical assumption probes.

A ProblemSpec collects the drift, diffusion and jump coefficients, the
driver nonlinearities, the terminal payoffs and the obstacle, together
with the dimensions and the horizon.  Instances come from a closed
catalog so that experiments are reproducible and every declared
regularity constant can be checked against observed quotients.

Vectorization convention: every coefficient accepts numpy arrays whose
trailing axis is the state dimension and broadcasts over leading axes.
``b(t, x) -> (..., k)``, ``sigma(t, x) -> (..., k, d)``,
``beta(t, x, e)`` takes ``e`` broadcastable against the batch axes of
``x`` and returns an array broadcastable to ``(..., k)``;
``gamma[i](t, x, e) -> (...)``, ``h[i](t, x, y, z, q) -> (...)`` with
``y`` of shape ``(..., m)`` and ``z`` of shape ``(..., d)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class DriverMode(enum.Enum):
    NONLOCAL_LINEAR = "NONLOCAL_LINEAR"
    NONLOCAL_NORM = "NONLOCAL_NORM"


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    k: int
    d: int
    m: int
    b: callable
    sigma: callable
    beta: callable
    gamma: tuple
    h: tuple
    g: tuple
    obstacle: callable
    horizon: float
    driver_mode: DriverMode = DriverMode.NONLOCAL_LINEAR
    params: dict = field(default_factory=dict)
    # declared regularity constants, checked by the probes
    declared: dict = field(default_factory=dict)

    @property
    def lip_h(self):
        """Total declared Lipschitz constant of the drivers in (y, z, q)."""
        return (self.declared.get("h_y", 0.0) + self.declared.get("h_z", 0.0)
                + self.declared.get("h_q", 0.0))

    def with_terminal_shift(self, delta):
        """Same problem with every terminal payoff raised by `delta`."""
        g = tuple((lambda gi: (lambda x: gi(x) + delta))(gi) for gi in self.g)
        return replace(self, g=g)


def driver_q(spec, i, t, x, increments, m_trunc):
    """Scalar driver argument built from jump increments on the quadrature rule.

    `increments` has shape (..., n_quad) holding zeta(e_q).  In linear mode
    this is the gamma-weighted integral of zeta; in norm mode the L2(lambda_k)
    norm of zeta.
    """
    w = m_trunc.rule.weights
    if w.size == 0:
        return np.zeros(increments.shape[:-1])
    if spec.driver_mode is DriverMode.NONLOCAL_LINEAR:
        gam = spec.gamma[i](t, x[..., None, :], m_trunc.rule.nodes)
        return np.einsum("...q,q->...", increments * gam, w)
    return np.sqrt(np.clip(np.einsum("...q,q->...", increments ** 2, w), 0.0, None))


def driver(spec, i, t, x, y, z, zeta, m_trunc):
    """Reference (non-vectorized) driver evaluation for a mark function zeta."""
    x = np.asarray(x, dtype=float)
    if spec.driver_mode is DriverMode.NONLOCAL_LINEAR:
        q = m_trunc.integrate(lambda e: spec.gamma[i](t, x, e) * zeta(e))
    else:
        q = math.sqrt(max(m_trunc.integrate(lambda e: zeta(e) ** 2), 0.0))
    return spec.h[i](t, x, np.asarray(y, float), np.asarray(z, float), q)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

CATALOG_NAMES = ("CONSTANT", "LINEAR_DRIFT", "MERTON_STYLE",
                 "AMERICAN_PUT_STYLE", "COUPLED_SYSTEM_M2",
                 "INFINITE_ACTIVITY_PUT")

DEAD_OBSTACLE = -1e9

# sup over e of |exp(0.3 e) - 1| / min(1, |e|), attained at e = 1
_EXP_JUMP_SLOPE = math.exp(0.3) - 1.0


def _zero_beta(t, x, e):
    return np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(e)) + (x.shape[-1],))


def _const_sigma(value, k, d):
    def sigma(t, x):
        return np.full(x.shape[:-1] + (k, d), value)
    return sigma


def _put_payoff(strike):
    return lambda x: np.maximum(strike - x[..., 0], 0.0)


def _bounded_exp_beta(scale):
    # |tanh(x)| <= 1 keeps the mark factor as the only size driver
    def beta(t, x, e):
        return scale * np.tanh(x[..., :1]) * np.asarray(np.expm1(0.3 * np.asarray(e)))[..., None]
    return beta


def _clip_gamma(scale):
    return lambda t, x, e: scale * np.clip(np.asarray(e, float), -1.0, 1.0)


def _abs_gamma(scale):
    return lambda t, x, e: scale * np.minimum(1.0, np.abs(np.asarray(e, float)))


def _check_params(name, params, defaults):
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(params)
    return merged


def catalog(name, **params):
    """Build a catalog problem by name.

    Raises ValueError for unknown names or parameters.  Every instance
    documents its declared Lipschitz constants in `spec.declared`.
    """
    if name not in CATALOG_NAMES:
        raise ValueError(f"unknown problem {name!r}; valid names: {CATALOG_NAMES}")
    builder = {
        "CONSTANT": _build_constant,
        "LINEAR_DRIFT": _build_linear_drift,
        "MERTON_STYLE": _build_merton_style,
        "AMERICAN_PUT_STYLE": _build_american_put,
        "COUPLED_SYSTEM_M2": _build_coupled_m2,
        "INFINITE_ACTIVITY_PUT": _build_infinite_activity_put,
    }[name]
    return builder(params)


def _build_constant(params):
    p = _check_params("CONSTANT", params, {"level": 1.0, "horizon": 1.0})
    c = float(p["level"])
    return ProblemSpec(
        name="CONSTANT", k=1, d=1, m=1,
        b=lambda t, x: np.zeros_like(x),
        sigma=_const_sigma(0.0, 1, 1),
        beta=_zero_beta,
        gamma=(lambda t, x, e: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(e))),),
        h=(lambda t, x, y, z, q: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(q))),),
        g=(lambda x: np.full(x.shape[:-1], c),),
        obstacle=lambda t, x: np.full(x.shape[:-1], c - 1.0),
        horizon=float(p["horizon"]), params=p,
        declared={"b": 0.0, "sigma": 0.0, "beta": 0.0,
                  "h_y": 0.0, "h_z": 0.0, "h_q": 0.0},
    )


def _build_linear_drift(params):
    p = _check_params("LINEAR_DRIFT", params,
                      {"mu": 0.1, "vol": 0.2, "horizon": 1.0})
    mu, vol = float(p["mu"]), float(p["vol"])
    return ProblemSpec(
        name="LINEAR_DRIFT", k=1, d=1, m=1,
        b=lambda t, x: mu * x,
        sigma=_const_sigma(vol, 1, 1),
        beta=_zero_beta,
        gamma=(_abs_gamma(0.5),),
        h=(lambda t, x, y, z, q: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(q))),),
        g=(lambda x: x[..., 0],),
        obstacle=lambda t, x: np.full(x.shape[:-1], DEAD_OBSTACLE),
        horizon=float(p["horizon"]), params=p,
        declared={"b": mu, "sigma": 0.0, "beta": 0.0,
                  "h_y": 0.0, "h_z": 0.0, "h_q": 0.0},
    )


def _build_merton_style(params):
    p = _check_params("MERTON_STYLE", params,
                      {"drift": 0.05, "vol": 0.2, "jump_scale": 0.3,
                       "horizon": 1.0})
    mu, vol, js = float(p["drift"]), float(p["vol"]), float(p["jump_scale"])

    def beta(t, x, e):
        return js * np.clip(np.asarray(e, float), -1.0, 1.0)[..., None]

    return ProblemSpec(
        name="MERTON_STYLE", k=1, d=1, m=1,
        b=lambda t, x: np.full_like(x, mu),
        sigma=_const_sigma(vol, 1, 1),
        beta=beta,
        gamma=(_abs_gamma(0.5),),
        h=(lambda t, x, y, z, q: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(q))),),
        g=(lambda x: x[..., 0],),
        obstacle=lambda t, x: np.full(x.shape[:-1], DEAD_OBSTACLE),
        horizon=float(p["horizon"]), params=p,
        declared={"b": 0.0, "sigma": 0.0, "beta": 0.0,
                  "h_y": 0.0, "h_z": 0.0, "h_q": 0.0},
    )


def _build_american_put(params):
    p = _check_params("AMERICAN_PUT_STYLE", params,
                      {"rate": 0.05, "vol": 0.2, "strike": 1.0, "horizon": 1.0})
    r, vol, strike = float(p["rate"]), float(p["vol"]), float(p["strike"])
    payoff = _put_payoff(strike)
    return ProblemSpec(
        name="AMERICAN_PUT_STYLE", k=1, d=1, m=1,
        b=lambda t, x: r * x,
        sigma=lambda t, x: vol * x[..., None],
        beta=_zero_beta,
        gamma=(lambda t, x, e: np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(e))),),
        h=(lambda t, x, y, z, q: -r * y[..., 0],),
        g=(payoff,),
        obstacle=lambda t, x: payoff(x),
        horizon=float(p["horizon"]), params=p,
        declared={"b": r, "sigma": vol, "beta": 0.0,
                  "h_y": r, "h_z": 0.0, "h_q": 0.0},
    )


def _build_coupled_m2(params):
    p = _check_params("COUPLED_SYSTEM_M2", params,
                      {"rate": 0.05, "vol": 0.2, "strike": 1.0,
                       "jump_scale": 0.5, "gamma_scale": 0.5, "couple": 0.05,
                       "q_sin": 0.1, "q_lin": 0.05, "horizon": 1.0})
    r, vol, strike = float(p["rate"]), float(p["vol"]), float(p["strike"])
    couple, q_sin, q_lin = float(p["couple"]), float(p["q_sin"]), float(p["q_lin"])
    payoff = _put_payoff(strike)

    def h1(t, x, y, z, q):
        # deliberately non-monotone in the nonlocal argument
        return -r * y[..., 0] + couple * (y[..., 1] - y[..., 0]) + q_sin * np.sin(q)

    def h2(t, x, y, z, q):
        return -r * y[..., 1] + couple * (y[..., 0] - y[..., 1]) + q_lin * q

    return ProblemSpec(
        name="COUPLED_SYSTEM_M2", k=1, d=1, m=2,
        b=lambda t, x: r * x,
        sigma=lambda t, x: vol * x[..., None],
        beta=_bounded_exp_beta(float(p["jump_scale"])),
        gamma=(_clip_gamma(float(p["gamma_scale"])),   # sign-changing
               _abs_gamma(float(p["gamma_scale"]))),
        h=(h1, h2),
        g=(payoff, payoff),
        obstacle=lambda t, x: payoff(x),
        horizon=float(p["horizon"]), params=p,
        declared={"b": r, "sigma": vol,
                  "beta": float(p["jump_scale"]) * _EXP_JUMP_SLOPE,
                  "h_y": math.hypot(r + couple, couple),
                  "h_z": 0.0, "h_q": max(q_sin, q_lin)},
    )


def _build_infinite_activity_put(params):
    p = _check_params("INFINITE_ACTIVITY_PUT", params,
                      {"rate": 0.05, "vol": 0.2, "strike": 1.0,
                       "jump_scale": 1.0, "q_coef": 0.0,
                       "driver_mode": "NONLOCAL_LINEAR", "horizon": 1.0})
    r, vol, strike = float(p["rate"]), float(p["vol"]), float(p["strike"])
    q_coef = float(p["q_coef"])
    payoff = _put_payoff(strike)
    return ProblemSpec(
        name="INFINITE_ACTIVITY_PUT", k=1, d=1, m=1,
        b=lambda t, x: r * x,
        sigma=lambda t, x: vol * x[..., None],
        beta=_bounded_exp_beta(float(p["jump_scale"])),
        gamma=(_abs_gamma(0.5),),
        h=(lambda t, x, y, z, q: -r * y[..., 0] + q_coef * q,),
        g=(payoff,),
        obstacle=lambda t, x: payoff(x),
        horizon=float(p["horizon"]),
        driver_mode=DriverMode(p["driver_mode"]),
        params=p,
        declared={"b": r, "sigma": vol,
                  "beta": float(p["jump_scale"]) * _EXP_JUMP_SLOPE,
                  "h_y": r, "h_z": 0.0, "h_q": abs(q_coef)},
    )


# ---------------------------------------------------------------------------
# assumption probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeRecord:
    assumption: str
    probes: int
    max_ratio: float
    bound: float | None = None
    fitted_c: float | None = None
    fitted_p: float | None = None
    passed: bool = True


@dataclass
class AssumptionReport:
    spec_name: str
    records: list

    @property
    def all_passed(self):
        return all(r.passed for r in self.records)

    def record(self, assumption):
        for r in self.records:
            if r.assumption == assumption:
                return r
        raise KeyError(assumption)

    def to_json(self):
        return json.dumps(
            {"problem": self.spec_name,
             "records": [vars(r) for r in self.records]},
            indent=2, sort_keys=True)


def _fit_power_bound(values, radii, radii2=None):
    """Least-squares fit of values ~= C * (1 + r^p [+ r2^p]) in log space."""
    values = np.asarray(values, float)
    mask = values > 1e-300
    if not mask.any():
        return 0.0, 0.0
    lv = np.log(values[mask])
    r1 = np.asarray(radii, float)[mask]
    r2 = None if radii2 is None else np.asarray(radii2, float)[mask]
    best = None
    for p in np.linspace(0.0, 6.0, 121):
        basis = 1.0 + r1 ** p + (0.0 if r2 is None else r2 ** p)
        w = np.log(basis)
        c = float(np.mean(lv - w))
        resid = float(np.sum((lv - w - c) ** 2))
        if best is None or resid < best[0] - 1e-12:
            best = (resid, c, p)
    return float(np.exp(best[1])), float(best[2])


def _pass(max_ratio, bound):
    return bool(max_ratio <= bound * (1.0 + 1e-9) + 1e-12)


def probe_lipschitz(spec: ProblemSpec, samples: int, rng: np.random.Generator):
    """Sample Lipschitz quotients of b, sigma, beta, gamma and h.

    Quotients in x for beta and gamma divide out the min(1, |e|) factor.
    The x-quotients of h, g and the obstacle are fitted against the
    polynomially weighted bound C(1+|x|^p+|x'|^p)|x-x'|.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    k, d, m = spec.k, spec.d, spec.m
    t = rng.uniform(0.0, spec.horizon, size=samples)
    x = rng.normal(0.0, 2.0, size=(samples, k))
    xp = x + rng.normal(0.0, 1.0, size=(samples, k))
    dx = np.linalg.norm(x - xp, axis=-1)
    dx = np.where(dx < 1e-12, 1e-12, dx)
    marks = np.array([-0.9, -0.3, -0.05, 0.05, 0.3, 0.9])

    records = []

    qb = np.array([np.linalg.norm(spec.b(ti, xi) - spec.b(ti, xj))
                   for ti, xi, xj in zip(t, x, xp)]) / dx
    records.append(ProbeRecord("b_lipschitz", samples, float(qb.max()),
                               bound=spec.declared.get("b"),
                               passed=_pass(qb.max(), spec.declared.get("b", np.inf))))

    qs = np.array([np.linalg.norm(spec.sigma(ti, xi) - spec.sigma(ti, xj))
                   for ti, xi, xj in zip(t, x, xp)]) / dx
    records.append(ProbeRecord("sigma_lipschitz", samples, float(qs.max()),
                               bound=spec.declared.get("sigma"),
                               passed=_pass(qs.max(), spec.declared.get("sigma", np.inf))))

    qbeta = 0.0
    for e in marks:
        diffs = np.array([np.linalg.norm(
            np.asarray(spec.beta(ti, xi[None, :], e)).ravel()
            - np.asarray(spec.beta(ti, xj[None, :], e)).ravel())
            for ti, xi, xj in zip(t, x, xp)])
        qbeta = max(qbeta, float((diffs / (dx * min(1.0, abs(e)))).max()))
    records.append(ProbeRecord("beta_lipschitz", samples * marks.size, qbeta,
                               bound=spec.declared.get("beta"),
                               passed=_pass(qbeta, spec.declared.get("beta", np.inf))))

    y = rng.normal(0.0, 2.0, size=(samples, m))
    yp = y + rng.normal(0.0, 1.0, size=(samples, m))
    z = rng.normal(0.0, 2.0, size=(samples, d))
    zp = z + rng.normal(0.0, 1.0, size=(samples, d))
    q = rng.normal(0.0, 2.0, size=samples)
    qp = q + rng.normal(0.0, 1.0, size=samples)
    for label, args_a, args_b, denom in (
            ("h_lipschitz_y", (y,), (yp,), np.linalg.norm(y - yp, axis=-1)),
            ("h_lipschitz_z", (z,), (zp,), np.linalg.norm(z - zp, axis=-1)),
            ("h_lipschitz_q", (q,), (qp,), np.abs(q - qp))):
        denom = np.where(denom < 1e-12, 1e-12, denom)
        worst = 0.0
        for i in range(m):
            if label == "h_lipschitz_y":
                da = spec.h[i](t, x, y, z, q) - spec.h[i](t, x, yp, z, q)
            elif label == "h_lipschitz_z":
                da = spec.h[i](t, x, y, z, q) - spec.h[i](t, x, y, zp, q)
            else:
                da = spec.h[i](t, x, y, z, q) - spec.h[i](t, x, y, z, qp)
            worst = max(worst, float((np.abs(da) / denom).max()))
        key = {"h_lipschitz_y": "h_y", "h_lipschitz_z": "h_z",
               "h_lipschitz_q": "h_q"}[label]
        records.append(ProbeRecord(label, samples * m, worst,
                                   bound=spec.declared.get(key),
                                   passed=_pass(worst, spec.declared.get(key, np.inf))))

    # polynomially weighted x-quotients: h, gamma, g, obstacle
    rx = np.linalg.norm(x, axis=-1)
    rxp = np.linalg.norm(xp, axis=-1)
    for label, vals in _weighted_x_quotients(spec, t, x, xp, y, z, q, marks):
        quot = vals / dx
        c_fit, p_fit = _fit_power_bound(quot, rx, rxp)
        records.append(ProbeRecord(label, quot.size, float(quot.max()),
                                   fitted_c=c_fit, fitted_p=p_fit,
                                   passed=bool(np.isfinite(quot.max()))))
    return AssumptionReport(spec.name, records)


def _weighted_x_quotients(spec, t, x, xp, y, z, q, marks):
    m = spec.m
    h_diff = np.max([np.abs(spec.h[i](t, x, y, z, q) - spec.h[i](t, xp, y, z, q))
                     for i in range(m)], axis=0)
    yield "h_x_poly_lipschitz", h_diff
    gam = np.zeros(x.shape[0])
    for i in range(m):
        for e in marks:
            diff = np.abs(spec.gamma[i](0.0, x, e) - spec.gamma[i](0.0, xp, e))
            gam = np.maximum(gam, diff / min(1.0, abs(e)))
    yield "gamma_x_poly_lipschitz", gam
    g_diff = np.max([np.abs(spec.g[i](x) - spec.g[i](xp)) for i in range(m)], axis=0)
    yield "g_poly_lipschitz", g_diff
    yield "obstacle_poly_lipschitz", np.abs(spec.obstacle(t, x) - spec.obstacle(t, xp))


def probe_growth(spec: ProblemSpec, samples: int, rng: np.random.Generator):
    """Fit polynomial growth bounds C(1+|x|^p) for g, the obstacle and h(.,0)."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    k = spec.k
    radii = np.geomspace(1.0, 1e3, samples)
    dirs = rng.normal(size=(samples, k))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    x = radii[:, None] * dirs
    ts = np.array([0.0, 0.5 * spec.horizon, spec.horizon])

    records = []

    def fit(label, values):
        if not np.all(np.isfinite(values)):
            j = int(np.argmax(~np.isfinite(values)))
            raise ValueError(f"{label} returned a non-finite value at x={x[j]}")
        c_fit, p_fit = _fit_power_bound(np.abs(values), radii)
        records.append(ProbeRecord(label, values.size, float(np.abs(values).max()),
                                   fitted_c=c_fit, fitted_p=p_fit, passed=True))

    for i in range(spec.m):
        fit(f"g{i}_growth", spec.g[i](x))
        h0 = np.max([np.abs(spec.h[i](tt, x, np.zeros((samples, spec.m)),
                                      np.zeros((samples, spec.d)),
                                      np.zeros(samples))) for tt in ts], axis=0)
        fit(f"h{i}_growth", h0)
    ell = np.max([np.abs(spec.obstacle(tt, x)) for tt in ts], axis=0)
    fit("obstacle_growth", ell)
    return AssumptionReport(spec.name, records)


def terminal_consistency_gap(spec: ProblemSpec, samples: int, rng: np.random.Generator):
    """min over probed x and components of g_i(x) - obstacle(T, x); >= 0 required."""
    x = rng.normal(0.0, 3.0, size=(samples, spec.k))
    ellT = spec.obstacle(spec.horizon, x)
    gaps = [np.min(spec.g[i](x) - ellT) for i in range(spec.m)]
    return float(min(gaps))
