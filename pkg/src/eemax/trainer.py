"""Unsupervised training of the alpha/beta InterferenceNet pair.

Each epoch runs mini-batch gradient ascent on the box objective, then
re-evaluates the whole training set to log metrics, update the entropy
weight kappa and (optionally) shrink the feasible-region scale s.

Network heads work in units of s: the feasible box is [0, 1]^I and the
transmit powers in watts are ``s * (a + ell * u)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import inet
from . import objective as obj
from .chanmodel import Dataset

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "mean_ee_mbit_per_j", "mean_entropy_nats", "mean_penalty", "kappa", "s_watts")


class NumericalAbort(RuntimeError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 512
    epochs: int = 5000
    smc: int = 16
    eps: float = 10.0
    delta_kappa: float = 1e-3
    h: int = 50
    h0: float | None = None  # default I * ln(10 * ell_min)
    rho: float = 0.99
    region_adaptation: bool = False
    optimizer: str = "adam"
    rng_seed: int = 0
    ell_min: float = obj.ELL_MIN
    num_layers: int = 5
    feature_dim: int = 20
    alpha_init: float = -0.1
    beta_init: float = 1.2
    fixed_kappa: float | None = None
    fixed_u: float | None = None
    fixed_ell: bool = False
    literal_penalty: bool = False
    normalize_objective: bool = True  # divide J by its full-power training-set mean

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.delta_kappa <= 0:
            raise ValueError("delta_kappa must be positive")
        if self.h < 1 or self.batch_size < 1 or self.smc < 1:
            raise ValueError("h, batch_size and smc must be >= 1")
        if self.optimizer not in ("adam", "sga"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def entropy_threshold(self, num_users: int) -> float:
        if self.h0 is not None:
            return self.h0
        return num_users * math.log(10.0 * self.ell_min)


# ------------------------------------------------------------------ kappa / region


@dataclass(frozen=True)
class KappaState:
    kappa: float = 0.0
    history: tuple = ()


def update_kappa(state: KappaState, H_i: float, delta_kappa: float, h: int) -> KappaState:
    """Entropy-weight schedule.

    While fewer than ``h`` past entropies are known kappa stays 0. Afterwards
    kappa grows by ``delta_kappa`` when the mean of the last ``h`` entropies
    is <= the current one (no progress), else shrinks by half a step,
    floored at 0.
    """
    hist = state.history
    if len(hist) < h:
        kappa = state.kappa
    elif sum(hist) / h <= H_i:
        kappa = state.kappa + delta_kappa
    else:
        kappa = max(0.0, state.kappa - delta_kappa / 2)
    return KappaState(kappa, (hist + (float(H_i),))[-h:])


@dataclass(frozen=True)
class RegionState:
    s: float


def update_region(state: RegionState, beta_watts, rho: float) -> RegionState:
    """Shrink s by rho when mean(beta) < 0.5 s and max(beta) < 0.9 s."""
    beta_watts = np.asarray(beta_watts, dtype=np.float64)
    if beta_watts.mean() < 0.5 * state.s and beta_watts.max() < 0.9 * state.s:
        return RegionState(rho * state.s)
    return state


# ------------------------------------------------------------------ optimizers


class Adam:
    """Adam ascent step; moments are kept per parameter tensor."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, state):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


class SGA:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data += self.lr * g

    def state(self):
        return {}

    def load(self, state):
        pass


def make_optimizer(kind, params, lr):
    return Adam(params, lr) if kind == "adam" else SGA(params, lr)


# ------------------------------------------------------------------ state & metrics


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    mean_ee: float
    mean_entropy: float
    mean_penalty: float
    kappa: float
    s: float

    def row(self):
        return (self.epoch, self.mean_ee, self.mean_entropy, self.mean_penalty, self.kappa, self.s)


@dataclass
class TrainState:
    alpha: inet.NetParams
    beta: inet.NetParams
    kappa: KappaState
    region: RegionState
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    opt_state: dict | None = None


@dataclass
class TrainResult:
    alpha: inet.NetParams
    beta: inet.NetParams
    metrics: list
    state: TrainState
    stopped_by_entropy: bool = False


@dataclass(frozen=True)
class Physics:
    mu: float
    P_c: float
    bandwidth: float
    p_max: float

    @classmethod
    def of(cls, ds: Dataset):
        c = ds.config
        return cls(c.amp_inefficiency, c.static_power, c.bandwidth, c.p_max)


def init_state(cfg: TrainConfig, p_max: float) -> TrainState:
    rng = np.random.default_rng(cfg.rng_seed)
    alpha = inet.init_params(cfg.num_layers, cfg.feature_dim, final_bias=cfg.alpha_init, rng=rng)
    beta = inet.init_params(cfg.num_layers, cfg.feature_dim, final_bias=cfg.beta_init, rng=rng)
    kappa = KappaState(cfg.fixed_kappa if cfg.fixed_kappa is not None else 0.0)
    return TrainState(alpha, beta, kappa, RegionState(p_max), 0, rng)


def box_outputs(G, state: TrainState, cfg: TrainConfig):
    """(a, ell) in units of s for a batch, without gradients."""
    a = inet.forward_numpy(G, state.alpha, "alpha")
    if cfg.fixed_ell:
        ell = np.full_like(a, cfg.ell_min)
    else:
        ell = inet.forward_numpy(G, state.beta, "beta", cfg.ell_min)
    return a, ell


def epoch_metrics(epoch, G, state: TrainState, cfg: TrainConfig, phys: Physics):
    a, ell = box_outputs(G, state, cfg)
    s = state.region.s
    p = np.clip(a, 0.0, 1.0) * s
    ee = obj.report_ee(G, p, phys.bandwidth, phys.mu, phys.P_c)
    pen = obj.penalty_low(a, 0.0, cfg.literal_penalty) + obj.penalty_high(a + ell, 1.0, cfg.literal_penalty)
    m = EpochMetrics(
        epoch,
        float(ee.mean()),
        float(obj.entropy(ell).mean()),
        float(pen.mean()),
        float(state.kappa.kappa),
        float(s),
    )
    return m, ell


def objective_scale(G_all, s, cfg: TrainConfig, phys: Physics) -> float:
    """Reference magnitude of J: mean sum-EE at full power p = s*1.

    Dividing by it keeps dJ/da of order one whatever p_max is, so the fixed
    penalty weight eps means the same thing in every power regime.
    """
    if not cfg.normalize_objective:
        return 1.0
    ref = float(np.mean(obj.sum_ee(G_all, np.full(G_all.shape[:-1], s), phys.mu, phys.P_c)))
    return ref if ref > 0 and math.isfinite(ref) else 1.0


def batch_loss(G, state: TrainState, cfg: TrainConfig, phys: Physics, u, scale=1.0):
    """Box objective terms for a batch, differentiable w.r.t. both networks.

    ``scale`` divides J (see :func:`objective_scale`)."""
    a = inet.forward(G, state.alpha, "alpha")
    if cfg.fixed_ell:
        ell = dc.Tensor(np.full(a.shape, cfg.ell_min))
    else:
        ell = inet.forward(G, state.beta, "beta", cfg.ell_min)
    s = state.region.s

    def J(x):
        # samples outside the feasible box are evaluated at their projection
        return obj.sum_ee_t(G, dc.clip(x, 0.0, 1.0) * s, phys.mu, phys.P_c) / scale

    return obj.box_objective(J, a, ell, u, state.kappa.kappa, cfg.eps, 0.0, 1.0, cfg.literal_penalty)


def _draw_u(rng, cfg: TrainConfig, shape):
    if cfg.fixed_u is not None:
        return np.full(shape, cfg.fixed_u)
    return rng.uniform(size=shape)


def train(ds: Dataset, cfg: TrainConfig, state: TrainState | None = None, on_epoch=None) -> TrainResult:
    """Stochastic gradient ascent on the box objective.

    Stops when the mean entropy drops below the threshold or after
    ``cfg.epochs`` epochs (counted from the state's epoch when resuming).
    Metrics row 0 describes the initial networks.
    """
    if len(ds) == 0:
        raise ValueError("training set is empty")
    G_all = ds.gains()
    N, I = G_all.shape[0], G_all.shape[-1]
    phys = Physics.of(ds)
    resumed = state is not None
    state = init_state(cfg, phys.p_max) if state is None else state
    params = state.alpha.tensors() + ([] if cfg.fixed_ell else state.beta.tensors())
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    if state.opt_state:
        opt.load(state.opt_state)
    h0 = cfg.entropy_threshold(I)

    metrics = []
    m, _ = epoch_metrics(state.epoch, G_all, state, cfg, phys)
    if not resumed:
        metrics.append(m)
        if on_epoch:
            on_epoch(m)
    stopped = m.mean_entropy < h0 and resumed
    last_epoch = state.epoch + cfg.epochs
    while not stopped and state.epoch < last_epoch:
        scale = objective_scale(G_all, state.region.s, cfg, phys)
        order = state.rng.permutation(N)
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            G = G_all[idx]
            u = _draw_u(state.rng, cfg, (len(idx), cfg.smc, I))
            terms = batch_loss(G, state, cfg, phys, u, scale)
            bad = ~np.isfinite(terms.total.data)
            if bad.any():
                k = int(idx[np.argmax(bad)])
                raise NumericalAbort(f"non-finite loss at epoch {state.epoch + 1}, sample {k}", k)
            grads = dc.grad(dc.mean(terms.total), params)
            opt.step(grads)
        state.epoch += 1
        if cfg.region_adaptation:
            # shrink first so the logged row reflects the end-of-epoch scale
            _, ell = box_outputs(G_all, state, cfg)
            state.region = update_region(state.region, ell * state.region.s, cfg.rho)
        m, _ = epoch_metrics(state.epoch, G_all, state, cfg, phys)
        if cfg.fixed_kappa is None:
            state.kappa = update_kappa(state.kappa, m.mean_entropy, cfg.delta_kappa, cfg.h)
        metrics.append(m)
        if on_epoch:
            on_epoch(m)
        if m.mean_entropy < h0:
            stopped = True
    state.opt_state = opt.state()
    return TrainResult(state.alpha, state.beta, metrics, state, stopped)


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalSummary:
    mean_ee: float
    ee: np.ndarray
    powers: np.ndarray
    mean_ratio: float | None = None
    ratios: np.ndarray | None = None


def evaluate(alpha: inet.NetParams, ds_test: Dataset, s=None, oracle_ee=None) -> EvalSummary:
    """Deterministic powers clamp(alpha(G), 0, 1) * s, EE in Mbit/J."""
    if len(ds_test) == 0:
        raise ValueError("test set is empty")
    phys = Physics.of(ds_test)
    s = phys.p_max if s is None else s
    G = ds_test.gains()
    p = np.clip(inet.forward_numpy(G, alpha, "alpha"), 0.0, 1.0) * s
    ee = obj.report_ee(G, p, phys.bandwidth, phys.mu, phys.P_c)
    out = EvalSummary(float(ee.mean()), ee, p)
    if oracle_ee is not None:
        out.ratios = ee / np.asarray(oracle_ee, dtype=np.float64)
        out.mean_ratio = float(out.ratios.mean())
    return out


# ------------------------------------------------------------------ persistence


def write_metrics_csv(metrics, path, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if not new else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.epoch] + [repr(float(x)) for x in m.row()[1:]])


def read_metrics_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header {rows[0]}")
    return [EpochMetrics(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


def save_state(state: TrainState, cfg: TrainConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inet.save_checkpoint(state.alpha, out / "alpha.ckpt")
    inet.save_checkpoint(state.beta, out / "beta.ckpt")
    meta = {
        "epoch": state.epoch,
        "kappa": state.kappa.kappa,
        "entropy_history": list(state.kappa.history),
        "s": state.region.s,
        "rng": state.rng.bit_generator.state,
        "config": asdict(cfg),
    }
    (out / "state.json").write_text(json.dumps(meta, indent=1))
    opt = state.opt_state or {}
    if opt:
        np.savez(out / "optimizer.npz", t=opt["t"], *opt["m"], *opt["v"])


def load_state(out_dir) -> tuple[TrainState, TrainConfig]:
    out = Path(out_dir)
    meta = json.loads((out / "state.json").read_text())
    cfg = TrainConfig(**meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    alpha = inet.load_checkpoint(out / "alpha.ckpt")
    beta = inet.load_checkpoint(out / "beta.ckpt")
    opt_state = None
    if (out / "optimizer.npz").exists():
        z = np.load(out / "optimizer.npz")
        arrs = [z[f"arr_{k}"] for k in range(len(z.files) - 1)]
        half = len(arrs) // 2
        opt_state = {"t": int(z["t"]), "m": arrs[:half], "v": arrs[half:]}
    state = TrainState(
        alpha,
        beta,
        KappaState(meta["kappa"], tuple(meta["entropy_history"])),
        RegionState(meta["s"]),
        meta["epoch"],
        rng,
        opt_state,
    )
    return state, cfg


# ------------------------------------------------------------------ Rastrigin demo


def rastrigin(x, A=10.0):
    x = np.asarray(x, dtype=np.float64)
    return A * x.shape[-1] + np.sum(x * x - A * np.cos(2 * np.pi * x), axis=-1)


def rastrigin_t(x, A=10.0):
    n = x.shape[-1]
    return dc.reduce_sum(dc.square(x) - dc.cos(x * (2 * np.pi)) * A, axis=-1) + A * n


def rastrigin_grad(x, A=10.0):
    return 2 * x + 2 * np.pi * A * np.sin(2 * np.pi * x)


@dataclass(frozen=True)
class RastriginConfig:
    iterations: int = 5000
    box_lr: float = 0.01
    gd_lr: float = 1e-3
    smc: int = 64
    init_low: float = 2.5
    init_high: float = 3.5
    box_halfwidth: float = 5.0
    delta_kappa: float = 1.0
    h: int = 10
    sampler: str = "stratified"  # or "iid"
    ell_min: float = 1e-6
    A: float = 10.0
    seed: int = 0


@dataclass
class RastriginTrace:
    box: np.ndarray  # f(midpoint) per iteration
    gd: np.ndarray  # f(x) per iteration
    x0: np.ndarray
    box_final: np.ndarray
    gd_final: np.ndarray
    kappa: np.ndarray


def stratified_uniform(rng, s, n):
    """Latin-hypercube U(0,1) draws of shape (s, n): one point per stratum
    [k/s, (k+1)/s) in every column, strata shuffled independently per column."""
    u = (np.arange(s)[:, None] + rng.uniform(size=(s, n))) / s
    return rng.permuted(u, axis=0)


def rastrigin_demo(n=10, cfg: RastriginConfig = RastriginConfig(), methods=("box", "gd")) -> RastriginTrace:
    """Minimize Rastrigin with the stochastic box and with plain gradient descent.

    Both start from the same point x0 ~ U[init_low, init_high]^n; the box
    starts as [x0 - w, x0 + w]. Penalties are off since f is defined
    everywhere.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    x0 = rng.uniform(cfg.init_low, cfg.init_high, n)

    box_trace = np.full(cfg.iterations + 1, np.nan)
    gd_trace = np.full(cfg.iterations + 1, np.nan)
    kappas = np.zeros(cfg.iterations + 1)
    a_final = x_final = x0

    if "box" in methods:
        a = dc.Tensor((x0 - cfg.box_halfwidth)[None], requires_grad=True)
        ell = dc.Tensor(np.full((1, n), 2 * cfg.box_halfwidth), requires_grad=True)
        opt = Adam([a, ell], cfg.box_lr)
        ks = KappaState()
        box_trace[0] = rastrigin(x0, cfg.A)
        for it in range(1, cfg.iterations + 1):
            u = (stratified_uniform(rng, cfg.smc, n) if cfg.sampler == "stratified"
                 else rng.uniform(size=(cfg.smc, n)))[None]
            width = dc.clamp_min(ell, cfg.ell_min)
            terms = obj.box_objective(lambda x: -rastrigin_t(x, cfg.A), a, width, u, ks.kappa, 0.0)
            grads = dc.grad(dc.mean(terms.total), [a, ell])
            opt.step(grads)
            ell.data[...] = np.maximum(ell.data, cfg.ell_min)
            H = float(obj.entropy(ell.data)[0])
            ks = update_kappa(ks, H, cfg.delta_kappa, cfg.h)
            kappas[it] = ks.kappa
            box_trace[it] = rastrigin(a.data[0] + ell.data[0] / 2, cfg.A)
        a_final = a.data[0] + ell.data[0] / 2

    if "gd" in methods:
        x = x0.copy()
        gd_trace[0] = rastrigin(x, cfg.A)
        for it in range(1, cfg.iterations + 1):
            x = x - cfg.gd_lr * rastrigin_grad(x, cfg.A)
            gd_trace[it] = rastrigin(x, cfg.A)
        x_final = x

    return RastriginTrace(box_trace, gd_trace, x0, a_final, x_final, kappas)
