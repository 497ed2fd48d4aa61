"""Sum energy-efficiency objective and its stochastic-box surrogate.

Plain-numpy evaluators (``sum_ee``, ``report_ee``, ``ee_gradient``) serve the
oracle and reporting; ``sum_ee_t`` and ``surrogate_loss`` build an autodiff
graph so the trainer can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

ELL_MIN = 1e-6


def _split(G):
    G = np.asarray(G, dtype=np.float64)
    direct = np.diagonal(G, axis1=-2, axis2=-1)
    cross = G - direct[..., None] * np.eye(G.shape[-1])
    return direct, cross


def sinr(G, p):
    """Per-user SINR; row i of G is the receiver of user i."""
    direct, cross = _split(G)
    p = np.asarray(p, dtype=np.float64)
    interference = np.einsum("...ij,...j->...i", cross, p)
    return direct * p / (1.0 + interference)


def sum_ee(G, p, mu=4.0, P_c=1.0):
    """Sum over users of ln(1 + SINR_i) / (mu p_i + P_c). Broadcasts over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("transmit powers must be nonnegative")
    return np.sum(np.log1p(sinr(G, p)) / (mu * p + P_c), axis=-1)


def report_ee(G, p, B=180e3, mu=4.0, P_c=1.0):
    """Sum EE in Mbit/J: B log2(1 + SINR) / (mu p + P_c) / 1e6."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("transmit powers must be nonnegative")
    return np.sum(B * np.log2(1.0 + sinr(G, p)) / (mu * p + P_c), axis=-1) / 1e6


def ee_gradient(G, p, mu=4.0, P_c=1.0):
    """Analytic gradient of :func:`sum_ee` w.r.t. p (same leading axes as p)."""
    direct, cross = _split(G)
    p = np.asarray(p, dtype=np.float64)
    denom_pow = mu * p + P_c
    interf = 1.0 + np.einsum("...ij,...j->...i", cross, p)
    s = direct * p / interf
    rate = np.log1p(s)
    # d rate_i / d p_i and d rate_i / d p_j (j != i)
    d_self = direct / (interf * (1.0 + s))
    coef = -s / (interf * (1.0 + s))  # multiply by cross[i, j]
    g = d_self / denom_pow - mu * rate / denom_pow**2
    g = g + np.einsum("...i,...ij->...j", coef / denom_pow, cross)
    return g


def sum_ee_t(G, p, mu=4.0, P_c=1.0) -> dc.Tensor:
    """Autodiff version of :func:`sum_ee`.

    ``G`` is a constant (B, I, I) array and ``p`` a (B, S, I) tensor of
    power samples; returns a (B, S) tensor.
    """
    direct, cross = _split(G)
    interf = dc.einsum("bij,bsj->bsi", cross, p) + 1.0
    rate = dc.log1p(dc.mul(p, direct[:, None, :]) / interf)
    return dc.reduce_sum(rate / (p * mu + P_c), axis=-1)


def penalty_low(a, p_min=0.0, literal=False):
    """Hinge distance of the lower box edge below p_min (summed over users)."""
    a = np.asarray(a, dtype=np.float64)
    if literal:
        return np.maximum(-np.sum(a - p_min, axis=-1), 0.0)
    return np.sum(np.maximum(p_min - a, 0.0), axis=-1)


def penalty_high(b, p_max=1.0, literal=False):
    b = np.asarray(b, dtype=np.float64)
    if literal:
        return np.maximum(np.sum(b - p_max, axis=-1), 0.0)
    return np.sum(np.maximum(b - p_max, 0.0), axis=-1)


def entropy(ell):
    """Differential entropy of U(a, a + ell): sum of ln ell_i (nats)."""
    ell = np.asarray(ell, dtype=np.float64)
    if np.any(ell <= 0):
        raise ValueError("box widths must be positive")
    return np.sum(np.log(ell), axis=-1)


def penalty_low_t(a, p_min=0.0, literal=False):
    if literal:
        return dc.relu(-dc.reduce_sum(a - p_min, axis=-1))
    return dc.reduce_sum(dc.relu(p_min - a), axis=-1)


def penalty_high_t(b, p_max=1.0, literal=False):
    if literal:
        return dc.relu(dc.reduce_sum(b - p_max, axis=-1))
    return dc.reduce_sum(dc.relu(b - p_max), axis=-1)


def entropy_t(ell):
    return dc.reduce_sum(dc.log(ell), axis=-1)


@dataclass
class LossTerms:
    surrogate_mean: dc.Tensor
    penalty_a: dc.Tensor
    penalty_b: dc.Tensor
    entropy: dc.Tensor
    total: dc.Tensor

    def values(self):
        """Plain float/ndarray copies of every term."""
        return {k: getattr(self, k).data.copy() for k in ("surrogate_mean", "penalty_a", "penalty_b", "entropy", "total")}


def box_objective(J, a, ell, u, kappa=0.0, eps=0.0, lo=0.0, hi=1.0, literal=False) -> LossTerms:
    """Reparameterized box objective for a generic differentiable J.

    ``a`` and ``ell`` have shape (B, n); ``u`` holds fixed U(0,1) draws of
    shape (B, S, n). ``J`` maps a (B, S, n) sample tensor to (B, S). The
    returned per-row terms have shape (B,).
    """
    a, ell = dc.as_tensor(a), dc.as_tensor(ell)
    b = a + ell
    x = dc.reshape(a, (a.shape[0], 1, a.shape[1])) + dc.reshape(ell, (ell.shape[0], 1, ell.shape[1])) * u
    surrogate = dc.mean(J(x), axis=1)
    pa = penalty_low_t(a, lo, literal)
    pb = penalty_high_t(b, hi, literal)
    h = entropy_t(ell)
    total = surrogate - pa * eps - pb * eps - h * kappa
    return LossTerms(surrogate, pa, pb, h, total)


def surrogate_loss(G, a, ell, S_mc=16, kappa=0.0, eps=10.0, rng=None, u=None, scale=1.0,
                   mu=4.0, P_c=1.0, literal=False) -> LossTerms:
    """Box objective for sum-EE power control.

    ``a`` and ``ell`` are in units of ``scale`` (watts per unit), so the
    feasible box is [0, 1]^I and the powers fed to the EE are
    ``scale * (a + ell * u)``. Accepts a single (I, I) matrix or a batch.
    """
    G = np.asarray(G, dtype=np.float64)
    single = G.ndim == 2
    if single:
        G = G[None]
        a = dc.reshape(dc.as_tensor(a), (1, -1))
        ell = dc.reshape(dc.as_tensor(ell), (1, -1))
    if S_mc < 1:
        raise ValueError("S_mc must be >= 1")
    if u is None:
        rng = np.random.default_rng() if rng is None else rng
        u = rng.uniform(size=(G.shape[0], S_mc, G.shape[-1]))
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]

    def J(x):
        return sum_ee_t(G, x * scale, mu, P_c)

    terms = box_objective(J, a, ell, u, kappa, eps, 0.0, 1.0, literal)
    if single:
        terms = LossTerms(*(dc.reshape(t, ()) for t in (terms.surrogate_mean, terms.penalty_a,
                                                         terms.penalty_b, terms.entropy, terms.total)))
    return terms
