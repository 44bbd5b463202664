"""Euler simulation of the forward jump diffusion under a truncated jump measure.

The scheme applies all jumps of a step at the step end using the pre-jump
state, and compensates them with the quadrature drift of the truncated
measure, so the jump part is a martingale increment.  All random draws
are made upfront from a single counter-based Philox stream in a fixed,
documented order (Brownian increments, then jump counts, then mark
uniforms); the recursion afterwards is deterministic, so results are
bit-identical regardless of how many threads the array library uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .levy import TruncatedMeasure

STATE_BOUND = 1e8
_CHUNK = 32768  # path chunk for quadrature products, bounds peak memory


class SimulationError(RuntimeError):
    """A path left the admissible state region or became non-finite."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError("need t0 < T")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass
class PathBundle:
    """Simulated paths with retained noise, jump marks and martingale increments."""

    grid: TimeGrid
    x0: np.ndarray
    seed: int
    states: np.ndarray            # (n_steps+1, n_paths, k)
    brownian: np.ndarray          # (n_steps, n_paths, d)
    jump_marks: list              # per step: (marks, path_index) flat arrays
    mart_increments: np.ndarray   # (n_steps, n_paths, m)

    @property
    def n_paths(self):
        return self.states.shape[1]

    @property
    def n_steps(self):
        return self.grid.n_steps

    def jumps_at(self, step, path):
        marks, idx = self.jump_marks[step]
        return marks[idx == path]

    def jump_counts(self):
        out = np.zeros((self.n_steps, self.n_paths), dtype=int)
        for n, (_, idx) in enumerate(self.jump_marks):
            np.add.at(out[n], idx, 1)
        return out


def _draw_noise(grid, n_paths, d, mass, seed, rng=None):
    """Upfront draws: normals, Poisson counts, mark uniforms (in this order)."""
    if rng is None:
        rng = np.random.Generator(np.random.Philox(seed))
    normals = rng.standard_normal((grid.n_steps, n_paths, d))
    if mass > 0.0:
        counts = rng.poisson(mass * grid.dt, size=(grid.n_steps, n_paths))
        uniforms = rng.random(int(counts.sum()))
    else:
        counts = np.zeros((grid.n_steps, n_paths), dtype=int)
        uniforms = np.empty(0)
    return normals, counts, uniforms


def _marks_from_uniforms(m_trunc, counts, uniforms):
    """Per-step (marks, path_index) arrays from pre-drawn uniforms."""
    per_step = []
    offsets = np.concatenate([[0], np.cumsum(counts.sum(axis=1))]).astype(int)
    for n in range(counts.shape[0]):
        marks = m_trunc.marks_from_uniforms(uniforms[offsets[n]:offsets[n + 1]])
        path_idx = np.repeat(np.arange(counts.shape[1]), counts[n])
        per_step.append((marks, path_idx))
    return per_step


def _quad_sum(fn, t, x, nodes, weights, vector):
    """sum_q w_q fn(t, x, e_q), chunked over paths to bound peak memory."""
    if nodes.size == 0:
        return np.zeros((x.shape[0], x.shape[1]) if vector else (x.shape[0],))
    outs = []
    for lo in range(0, x.shape[0], _CHUNK):
        xc = x[lo:lo + _CHUNK]
        vals = np.asarray(fn(t, xc[:, None, :], nodes))
        if vector:
            vals = np.broadcast_to(vals, (xc.shape[0], nodes.size, xc.shape[1]))
            outs.append(np.einsum("pqk,q->pk", vals, weights))
        else:
            vals = np.broadcast_to(vals, (xc.shape[0], nodes.size))
            outs.append(vals @ weights)
    return np.concatenate(outs, axis=0)


def _run_recursion(spec, m_trunc, grid, x0, normals, marks_per_step):
    n_paths = normals.shape[1]
    k, d, m = spec.k, spec.d, spec.m
    dt = grid.dt
    nodes_t = grid.nodes
    qn, qw = m_trunc.rule.nodes, m_trunc.rule.weights

    states = np.empty((grid.n_steps + 1, n_paths, k))
    states[0] = np.broadcast_to(np.asarray(x0, float), (n_paths, k))
    mart = np.zeros((grid.n_steps, n_paths, m))
    sdt = np.sqrt(dt)

    for n in range(grid.n_steps):
        t = float(nodes_t[n])
        x = states[n]
        drift = np.broadcast_to(np.asarray(spec.b(t, x)), (n_paths, k)) * dt
        sig = np.broadcast_to(np.asarray(spec.sigma(t, x)), (n_paths, k, d))
        diffusion = np.einsum("pkd,pd->pk", sig, normals[n]) * sdt

        jump_sum = np.zeros((n_paths, k))
        marks, path_idx = marks_per_step[n]
        if marks.size:
            xg = x[path_idx]
            bet = np.broadcast_to(np.asarray(spec.beta(t, xg, marks)),
                                  (marks.size, k))
            np.add.at(jump_sum, path_idx, bet)
        if qn.size:
            comp = _quad_sum(spec.beta, t, x, qn, qw, vector=True)
            jump_sum = jump_sum - dt * np.broadcast_to(comp, (n_paths, k))
            for i in range(m):
                gam_drift = _quad_sum(spec.gamma[i], t, x, qn, qw, vector=False)
                mart[n, :, i] = -dt * np.broadcast_to(gam_drift, (n_paths,))
            if marks.size:
                for i in range(m):
                    gj = np.broadcast_to(
                        np.asarray(spec.gamma[i](t, x[path_idx], marks)),
                        (marks.size,))
                    np.add.at(mart[n, :, i], path_idx, gj)

        nxt = x + drift + diffusion + jump_sum
        bad = ~np.isfinite(nxt).all(axis=-1) | (np.abs(nxt).max(axis=-1) > STATE_BOUND)
        if bad.any():
            p = int(np.argmax(bad))
            raise SimulationError(
                f"state exploded at step {n + 1}, path {p}: x={nxt[p]}")
        states[n + 1] = nxt
    return states, mart


def simulate(spec, m_trunc: TruncatedMeasure, grid: TimeGrid, x,
             n_paths: int, seed: int) -> PathBundle:
    """Simulate `n_paths` Euler paths started at x on the given grid."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    normals, counts, uniforms = _draw_noise(grid, n_paths, spec.d,
                                            m_trunc.total_mass, seed)
    marks_per_step = _marks_from_uniforms(m_trunc, counts, uniforms)
    states, mart = _run_recursion(spec, m_trunc, grid, x, normals, marks_per_step)
    return PathBundle(grid=grid, x0=np.asarray(x, float), seed=seed,
                      states=states, brownian=normals * np.sqrt(grid.dt),
                      jump_marks=marks_per_step, mart_increments=mart)


def simulate_coupled(spec, m_trunc, grid, x, x_prime, n_paths, seed):
    """Two bundles driven by identical noise, differing only in the start point."""
    normals, counts, uniforms = _draw_noise(grid, n_paths, spec.d,
                                            m_trunc.total_mass, seed)
    marks_per_step = _marks_from_uniforms(m_trunc, counts, uniforms)
    bundles = []
    for start in (x, x_prime):
        states, mart = _run_recursion(spec, m_trunc, grid, start, normals,
                                      marks_per_step)
        bundles.append(PathBundle(grid=grid, x0=np.asarray(start, float),
                                  seed=seed, states=states,
                                  brownian=normals * np.sqrt(grid.dt),
                                  jump_marks=marks_per_step,
                                  mart_increments=mart))
    return tuple(bundles)


def simulate_ladder(spec, tms: dict, grid, x, n_paths, seed):
    """Bundles for every truncation level from one master noise stream.

    `tms` maps the truncation index k to its TruncatedMeasure; marks are
    sampled once at the finest level and coarser levels keep the marks
    with |e| >= 1/k (Poisson thinning), which realizes the nested
    truncations with shared noise.  Yields (k, bundle), ascending in k.
    """
    ks = sorted(tms)
    finest = tms[ks[-1]]
    normals, counts, uniforms = _draw_noise(grid, n_paths, spec.d,
                                            finest.total_mass, seed)
    master = _marks_from_uniforms(finest, counts, uniforms)
    for k in ks:
        cutoff = 1.0 / k
        thinned = []
        for marks, idx in master:
            keep = np.abs(marks) >= cutoff
            thinned.append((marks[keep], idx[keep]))
        states, mart = _run_recursion(spec, tms[k], grid, x, normals, thinned)
        yield k, PathBundle(grid=grid, x0=np.asarray(x, float), seed=seed,
                            states=states, brownian=normals * np.sqrt(grid.dt),
                            jump_marks=thinned, mart_increments=mart)


# ---------------------------------------------------------------------------
# moment checks
# ---------------------------------------------------------------------------

@dataclass
class MomentCell:
    elapsed: float
    x0: np.ndarray
    observed: dict
    ratio: dict


@dataclass
class MomentReport:
    cells: list
    m_hat: dict = field(default_factory=dict)
    worst_cell: dict = field(default_factory=dict)
    degenerate: bool = False

    def stability_factor(self, p):
        ratios = [c.ratio[p] for c in self.cells if c.ratio[p] > 0.0]
        if not ratios:
            return 1.0
        return max(ratios) / min(ratios)


def check_moments(bundles, ps=(2, 4)) -> MomentReport:
    """Fit the smallest M_p with E[sup |X - x0|^p] <= M_p (s-t)(1+|x0|^p).

    One constant per p across all supplied bundles; the worst cell is
    reported.  Degenerate (all-zero) moments are flagged instead of fitted.
    """
    cells = []
    for bundle in bundles:
        elapsed = bundle.grid.T - bundle.grid.t0
        x0 = bundle.x0
        dev = np.linalg.norm(bundle.states - bundle.states[0], axis=-1)
        sup = dev.max(axis=0)  # per path
        obs, rat = {}, {}
        for p in ps:
            observed = float(np.mean(sup ** p))
            denom = elapsed * (1.0 + float(np.linalg.norm(x0)) ** p)
            obs[p] = observed
            rat[p] = observed / denom
        cells.append(MomentCell(elapsed, x0, obs, rat))
    report = MomentReport(cells=cells)
    if all(c.observed[p] < 1e-300 for c in cells for p in ps):
        report.degenerate = True
        report.m_hat = {p: 0.0 for p in ps}
        return report
    for p in ps:
        ratios = [c.ratio[p] for c in cells]
        report.m_hat[p] = float(max(ratios))
        report.worst_cell[p] = int(np.argmax(ratios))
    return report
