"""Reference optimizers for the sum-EE power-control problem.

Exhaustive grid plus local refinement for a handful of users, multistart
projected gradient ascent beyond that. Both serve as the yardstick for the
trained network's optimality gap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .objective import ee_gradient, report_ee, sum_ee


class OracleError(ValueError):
    pass


def default_grid_points(num_users: int) -> int:
    return 41 if num_users <= 3 else 21


@dataclass(frozen=True)
class OracleConfig:
    grid_points: int | None = None  # None -> 41 for I <= 3, 21 for I = 4
    starts: int = 64
    tol: float = 1e-10  # stop when a step moves less than tol * p_max
    max_iter: int = 2000
    max_exhaustive_users: int = 4
    refine_top: int = 4  # grid cells handed to local ascent; 0 = plain grid
    local: str = "lbfgsb"  # or "pga" (plain projected gradient ascent)
    mu: float = 4.0
    P_c: float = 1.0
    bandwidth: float = 180e3

    def __post_init__(self):
        if self.grid_points is not None and self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if self.refine_top < 0:
            raise ValueError("refine_top must be >= 0")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")
        if self.tol <= 0 or self.max_iter < 0:
            raise ValueError("tol must be positive and max_iter nonnegative")
        if self.local not in ("lbfgsb", "pga"):
            raise ValueError(f"unknown local method {self.local!r}")


@dataclass
class OracleResult:
    p: np.ndarray  # best power vector, watts
    ee: float  # report units (Mbit/J)
    mode: str
    evaluations: int  # candidate points scored before refinement

    @property
    def num_users(self):
        return self.p.shape[-1]


def _pick(p, vals):
    """Best row by value; ties go to the lexicographically smallest p."""
    best = np.max(vals)
    idx = np.flatnonzero(vals == best)
    if idx.size > 1:
        order = np.lexsort(p[idx].T[::-1])
        return int(idx[order[0]])
    return int(idx[0])


def projected_ascent(G, x0, p_max, mu=4.0, P_c=1.0, tol=1e-10, max_iter=2000):
    """Batched projected gradient ascent on the sum EE over [0, p_max]^I.

    Every row of ``x0`` is an independent start. Steps are taken in units of
    p_max with Armijo backtracking, so J never decreases along a trajectory.
    Returns (endpoints, values).
    """
    G = np.asarray(G, dtype=np.float64)
    q = np.clip(np.atleast_2d(np.asarray(x0, dtype=np.float64)) / p_max, 0.0, 1.0)

    def J(qq):
        return sum_ee(G, qq * p_max, mu, P_c)

    val = J(q)
    step = np.ones(q.shape[0])
    active = np.ones(q.shape[0], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        qa = q[active]
        g = ee_gradient(G, qa * p_max, mu, P_c) * p_max
        t = step[active]
        done = np.zeros(qa.shape[0], dtype=bool)
        new_q, new_val = qa.copy(), val[active].copy()
        for _ in range(60):
            trial = np.clip(qa + t[:, None] * g, 0.0, 1.0)
            tv = J(trial)
            ok = ~done & (tv >= val[active] + 1e-4 * np.sum(g * (trial - qa), axis=1))
            new_q[ok], new_val[ok] = trial[ok], tv[ok]
            done |= ok
            if done.all():
                break
            t = np.where(done, t, t * 0.5)
        moved = np.max(np.abs(new_q - qa), axis=1)
        idx = np.flatnonzero(active)
        q[idx], val[idx] = new_q, new_val
        step[idx] = np.where(done, t * 2.0, t)
        active[idx] = done & (moved > tol)
    return q * p_max, val


def bounded_quasi_newton(G, x0, p_max, mu=4.0, P_c=1.0, tol=1e-10, max_iter=2000):
    """L-BFGS-B from each row of ``x0``. An endpoint only replaces its start
    when it scores higher. Same return convention as :func:`projected_ascent`."""
    G = np.asarray(G, dtype=np.float64)
    x0 = np.clip(np.atleast_2d(np.asarray(x0, dtype=np.float64)) / p_max, 0.0, 1.0)
    I = x0.shape[1]

    def fun(q):
        p = q * p_max
        return -sum_ee(G, p, mu, P_c), -ee_gradient(G, p, mu, P_c) * p_max

    out_q, out_v = x0.copy(), sum_ee(G, x0 * p_max, mu, P_c)
    for n, q0 in enumerate(x0):
        res = minimize(fun, q0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * I,
                       options={"maxiter": max_iter, "ftol": 1e-15, "gtol": tol})
        q = np.clip(res.x, 0.0, 1.0)
        v = sum_ee(G, q * p_max, mu, P_c)
        if v > out_v[n]:
            out_q[n], out_v[n] = q, v
    return out_q * p_max, out_v


def _local(cfg):
    return bounded_quasi_newton if cfg.local == "lbfgsb" else projected_ascent


def grid_search(G, p_max, k=None, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    """Exhaustive scan of {0, p_max/(k-1), ..., p_max}^I, then local ascent
    from the best cells."""
    G = np.asarray(G, dtype=np.float64)
    I = G.shape[-1]
    if I > cfg.max_exhaustive_users:
        raise OracleError(
            f"exhaustive grid refused for I={I}: cost k^I grows too fast beyond "
            f"I={cfg.max_exhaustive_users}; use multistart instead"
        )
    k = k or cfg.grid_points or default_grid_points(I)
    if k < 2:
        raise ValueError("grid_points must be >= 2")
    axis = np.linspace(0.0, p_max, k)
    pts = np.stack(np.meshgrid(*([axis] * I), indexing="ij"), axis=-1).reshape(-1, I)
    vals = sum_ee(G, pts, cfg.mu, cfg.P_c)

    best = pts[_pick(pts, vals)]
    top = min(cfg.refine_top, len(vals))
    if top > 0:
        seeds = pts[np.argsort(-vals, kind="stable")[:top]]
        ref_p, ref_v = _local(cfg)(G, seeds, p_max, cfg.mu, cfg.P_c, cfg.tol, cfg.max_iter)
        cand_p = np.vstack([best[None], ref_p])
        cand_v = np.concatenate([[vals.max()], ref_v])
        best = cand_p[_pick(cand_p, cand_v)]
    return OracleResult(best, float(report_ee(G, best, cfg.bandwidth, cfg.mu, cfg.P_c)), "grid", len(pts))


def multistart(G, p_max, starts=None, rng=None, cfg: OracleConfig = OracleConfig(), corners=True) -> OracleResult:
    """Projected ascent from random starts plus the corners 0 and p_max*1."""
    G = np.asarray(G, dtype=np.float64)
    I = G.shape[-1]
    starts = cfg.starts if starts is None else starts
    if starts < 1:
        raise ValueError("starts must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = rng.uniform(0.0, p_max, size=(starts, I))
    if corners:
        x0 = np.vstack([np.zeros(I), np.full(I, p_max), x0])
    p, v = _local(cfg)(G, x0, p_max, cfg.mu, cfg.P_c, cfg.tol, cfg.max_iter)
    best = p[_pick(p, v)]
    return OracleResult(best, float(report_ee(G, best, cfg.bandwidth, cfg.mu, cfg.P_c)), "multistart", len(x0))


def solve(G, p_max, mode="auto", cfg: OracleConfig = OracleConfig(), rng=None) -> OracleResult:
    if mode == "auto":
        mode = "grid" if np.shape(G)[-1] <= cfg.max_exhaustive_users else "multistart"
    if mode == "grid":
        return grid_search(G, p_max, cfg=cfg)
    if mode == "multistart":
        return multistart(G, p_max, rng=rng, cfg=cfg)
    raise ValueError(f"unknown oracle mode {mode!r}")


def solve_all(gains, p_max, mode="auto", cfg: OracleConfig = OracleConfig(), seed=0):
    """Oracle for every instance of a (N, I, I) stack. Per-instance RNG streams
    keep the result independent of evaluation order."""
    gains = np.asarray(gains, dtype=np.float64)
    if mode == "grid" and gains.shape[-1] > cfg.max_exhaustive_users:
        grid_search(gains[0], p_max, cfg=cfg)  # raises with the explanatory message
    out = []
    for n, G in enumerate(gains):
        rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
        out.append(solve(G, p_max, mode, cfg, rng))
    return out


# ------------------------------------------------------------------ results CSV


def write_results_csv(path, oracle_ee, oracle_p, net_ee=None, net_p=None):
    """``sample_index,ee_oracle,ee_net,ratio,p_oracle...,p_net...``; net columns
    are dropped when no network results are given."""
    oracle_ee = np.asarray(oracle_ee, dtype=np.float64)
    oracle_p = np.atleast_2d(np.asarray(oracle_p, dtype=np.float64))
    I = oracle_p.shape[1]
    with_net = net_ee is not None
    header = ["sample_index", "ee_oracle"]
    if with_net:
        net_ee = np.asarray(net_ee, dtype=np.float64)
        net_p = np.atleast_2d(np.asarray(net_p, dtype=np.float64))
        header += ["ee_net", "ratio"]
    header += [f"p_oracle_{i}" for i in range(I)]
    if with_net:
        header += [f"p_net_{i}" for i in range(I)]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n in range(len(oracle_ee)):
            row = [n, repr(float(oracle_ee[n]))]
            if with_net:
                row += [repr(float(net_ee[n])), repr(float(net_ee[n] / oracle_ee[n]))]
            row += [repr(float(x)) for x in oracle_p[n]]
            if with_net:
                row += [repr(float(x)) for x in net_p[n]]
            w.writerow(row)


def read_results_csv(path):
    """Returns (oracle_ee (N,), oracle_p (N, I))."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros(0), np.zeros((0, 0))
    keys = sorted((k for k in rows[0] if k.startswith("p_oracle_")), key=lambda s: int(s.rsplit("_", 1)[1]))
    ee = np.array([float(r["ee_oracle"]) for r in rows])
    p = np.array([[float(r[k]) for k in keys] for r in rows])
    return ee, p
