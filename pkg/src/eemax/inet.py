"""InterferenceNet: a permutation-equivariant network over channel matrices.

Every channel (receiver i, transmitter j) carries a feature vector. A hidden
layer maps features through four weight sets, one per channel category
relative to (i, j):

1. the channel itself,
2. same transmitter, other receivers  (mask E applied from the left),
3. same receiver, other transmitters  (mask E applied from the right),
4. everything else                    (mask on both sides),

averages within each category and concatenates the results with log10(G).
The last layer reads only the diagonal channels and emits one scalar per user.

Public feature tensors use the (feature, receiver, transmitter) layout.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc

NUM_CATEGORIES = 4


@dataclass
class LayerParams:
    weights: list  # four Tensors of shape (out, in)
    biases: list  # four Tensors of shape (out,)

    @property
    def out_dim(self):
        return self.weights[0].shape[0]

    @property
    def in_dim(self):
        return self.weights[0].shape[1]


@dataclass
class FinalLayerParams:
    weight: dc.Tensor  # (in,)
    bias: dc.Tensor  # ()


@dataclass
class NetParams:
    layers: list
    final: FinalLayerParams

    @property
    def num_layers(self) -> int:
        """L, counting the final diagonal layer."""
        return len(self.layers) + 1

    @property
    def feature_dim(self) -> int:
        return self.layers[0].out_dim if self.layers else 0

    def tensors(self):
        """Parameters in checkpoint order: per layer, per category W then b; then w_L, b_L."""
        out = []
        for layer in self.layers:
            for W, b in zip(layer.weights, layer.biases):
                out += [W, b]
        return out + [self.final.weight, self.final.bias]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.count():
            raise ValueError(f"expected {self.count()} parameters, got {vec.size}")
        k = 0
        for t in self.tensors():
            n = t.data.size
            t.data[...] = vec[k : k + n].reshape(t.shape)
            k += n

    def copy(self) -> "NetParams":
        new = init_params(self.num_layers, self.feature_dim, seed=0)
        new.set_flat(self.flat())
        return new


def param_count(num_layers=5, feature_dim=20, input_dim=1) -> int:
    """Closed-form trainable scalar count of one head."""
    total, d_in = 0, input_dim
    for _ in range(num_layers - 1):
        total += NUM_CATEGORIES * (feature_dim * d_in + feature_dim)
        d_in = 1 + NUM_CATEGORIES * feature_dim
    return total + d_in + 1


def init_params(num_layers=5, feature_dim=20, seed=0, final_bias=0.0, rng=None) -> NetParams:
    """Glorot-uniform hidden weights, zero biases, zero final weights.

    With zero final weights the head initially outputs ``final_bias`` for
    every user, which is how the trainer places the initial box.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    layers, d_in = [], 1
    for _ in range(num_layers - 1):
        limit = np.sqrt(6.0 / (d_in + feature_dim))
        Ws = [dc.Tensor(rng.uniform(-limit, limit, (feature_dim, d_in)), requires_grad=True) for _ in range(4)]
        bs = [dc.Tensor(np.zeros(feature_dim), requires_grad=True) for _ in range(4)]
        layers.append(LayerParams(Ws, bs))
        d_in = 1 + NUM_CATEGORIES * feature_dim
    final = FinalLayerParams(
        dc.Tensor(np.zeros(d_in), requires_grad=True),
        dc.Tensor(np.array(float(final_bias)), requires_grad=True),
    )
    return NetParams(layers, final)


def random_params(num_layers=5, feature_dim=20, rng=None, scale=1.0) -> NetParams:
    """Dense random parameters (nonzero biases and final weights) for testing."""
    rng = np.random.default_rng(0) if rng is None else rng
    params = init_params(num_layers, feature_dim, rng=rng)
    for t in params.tensors():
        t.data[...] = rng.normal(0.0, scale / np.sqrt(max(t.data.shape[-1] if t.ndim else 1, 1)), t.shape)
    return params


def extraction_matrix(n: int) -> np.ndarray:
    """E = ones - identity."""
    return np.ones((n, n)) - np.eye(n)


def init_input(G) -> np.ndarray:
    """Layer-1 features log10(g); (I, I) -> (1, I, I), (B, I, I) -> (B, 1, I, I)."""
    G = np.asarray(G, dtype=np.float64)
    if np.any(G <= 0):
        raise ValueError("channel gains must be positive")
    return np.expand_dims(np.log10(G), axis=-3)


# Internally features are channel-last, (B, I, I, d), so each category
# transform is one GEMM over all B*I*I channels.


def _layer(F: dc.Tensor, layer: LayerParams, log_g: dc.Tensor) -> dc.Tensor:
    B, n, _, d = F.shape
    if layer.in_dim != d:
        raise dc.ShapeError(f"layer expects {layer.in_dim} input features, got {d}")
    flat = dc.reshape(F, (B * n * n, d))
    cats = []
    for W, b in zip(layer.weights, layer.biases):
        act = dc.relu(dc.matmul(flat, dc.transpose(W)) + b)
        cats.append(dc.reshape(act, (B, n, n, layer.out_dim)))
    if n > 1:
        c2 = dc.masked_mean(cats[1], axis=1)  # E o R2 / (I-1)
        c3 = dc.masked_mean(cats[2], axis=2)  # R3 o E / (I-1)
        c4 = dc.masked_mean(dc.masked_mean(cats[3], axis=2), axis=1)
    else:
        # categories 2-4 are empty with a single user
        c2 = c3 = c4 = dc.Tensor(np.zeros((B, n, n, layer.out_dim)))
    return dc.concat([log_g, cats[0], c2, c3, c4], axis=-1)


def layer_forward(F, params: LayerParams, G) -> np.ndarray:
    """One hidden layer in the (d, I, I) layout: F_l -> F_{l+1}."""
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    log_g = dc.Tensor(np.log10(G)[None, :, :, None])
    out = _layer(dc.Tensor(np.moveaxis(F, 0, -1)[None]), params, log_g)
    return np.moveaxis(out.data[0], -1, 0)


def forward(G, params: NetParams, head="alpha", ell_min=1e-6) -> dc.Tensor:
    """Differentiable forward pass; G is (B, I, I), result (B, I)."""
    G = np.asarray(G, dtype=np.float64)
    if np.any(G <= 0):
        raise ValueError("channel gains must be positive")
    log_g = dc.Tensor(np.log10(G)[..., None])
    F = log_g
    for layer in params.layers:
        F = _layer(F, layer, log_g)
    diag = dc.diagonal(F, axis1=1, axis2=2)  # (B, d, I)
    raw = dc.einsum("d,bdi->bi", params.final.weight, diag) + params.final.bias
    return _head(raw, head, ell_min)


def _head(raw, head, ell_min):
    if head == "alpha":
        return raw
    if head == "beta":
        return dc.clamp_min(raw, ell_min) if isinstance(raw, dc.Tensor) else np.maximum(raw, ell_min)
    raise ValueError(f"unknown head {head!r}")


def forward_numpy(G, params: NetParams, head="alpha", ell_min=1e-6) -> np.ndarray:
    """Same computation as :func:`forward` without building a graph."""
    G = np.asarray(G, dtype=np.float64)
    B, n, _ = G.shape
    log_g = np.log10(G)[..., None]
    F = log_g
    for layer in params.layers:
        out = layer.out_dim
        W = np.concatenate([w.data for w in layer.weights], axis=0).T
        b = np.concatenate([v.data for v in layer.biases])
        act = np.maximum(F.reshape(B * n * n, -1) @ W + b, 0.0).reshape(B, n, n, -1)
        r1, r2, r3, r4 = (act[..., k * out : (k + 1) * out] for k in range(NUM_CATEGORIES))
        if n > 1:
            c2 = (r2.sum(axis=1, keepdims=True) - r2) / (n - 1)
            c3 = (r3.sum(axis=2, keepdims=True) - r3) / (n - 1)
            t = (r4.sum(axis=2, keepdims=True) - r4) / (n - 1)
            c4 = (t.sum(axis=1, keepdims=True) - t) / (n - 1)
        else:
            c2 = c3 = c4 = np.zeros_like(r1)
        F = np.concatenate([log_g, r1, c2, c3, c4], axis=-1)
    diag = np.diagonal(F, axis1=1, axis2=2)
    raw = np.einsum("d,bdi->bi", params.final.weight.data, diag) + params.final.bias.data
    return _head(raw, head, ell_min)


def net_forward(G, params: NetParams, head="alpha", ell_min=1e-6) -> np.ndarray:
    """Forward pass returning plain arrays; accepts (I, I) or (B, I, I)."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 2:
        return forward_numpy(G[None], params, head, ell_min)[0]
    return forward_numpy(G, params, head, ell_min)


# ------------------------------------------------------------------ message passing


def _relu(x):
    return np.maximum(x, 0.0)


def mp_forward(G, params: NetParams, head="alpha", ell_min=1e-6) -> np.ndarray:
    """Node-wise message-passing evaluation of the same network.

    Each receiver row is a node. Per layer, node j sends the message
    phi_j = (ReLU(W2 F_j + b2), ReLU(W4 F_j + b4) E / (I-1)); node i averages
    the messages of its neighbours j != i and combines them with its own
    category-1 and category-3 terms.
    """
    G = np.asarray(G, dtype=np.float64)
    n = G.shape[0]
    log_g = np.log10(G)
    rows = [log_g[i][None, :] for i in range(n)]  # node i: (d, I)
    E = extraction_matrix(n)
    for layer in params.layers:
        W = [w.data for w in layer.weights]
        b = [v.data[:, None] for v in layer.biases]
        out = layer.out_dim
        messages = []
        for j in range(n):
            m2 = _relu(W[1] @ rows[j] + b[1])
            m4 = _relu(W[3] @ rows[j] + b[3]) @ E / (n - 1) if n > 1 else np.zeros((out, n))
            messages.append((m2, m4))
        new_rows = []
        for i in range(n):
            agg2, agg4 = np.zeros((out, n)), np.zeros((out, n))
            for j in range(n):
                if j == i:
                    continue
                agg2 = agg2 + messages[j][0]
                agg4 = agg4 + messages[j][1]
            if n > 1:
                agg2, agg4 = agg2 / (n - 1), agg4 / (n - 1)
            own1 = _relu(W[0] @ rows[i] + b[0])
            own3 = _relu(W[2] @ rows[i] + b[2]) @ E / (n - 1) if n > 1 else np.zeros((out, n))
            new_rows.append(np.concatenate([log_g[i][None, :], own1, agg2, own3, agg4], axis=0))
        rows = new_rows
    w, bL = params.final.weight.data, float(params.final.bias.data)
    raw = np.array([w @ rows[i][:, i] + bL for i in range(n)])
    if head == "beta":
        return np.maximum(raw, ell_min)
    return raw


# ------------------------------------------------------------------ permutations


def check_permutation(P):
    P = np.asarray(P)
    ok = (
        P.ndim == 2
        and P.shape[0] == P.shape[1]
        and np.all((P == 0) | (P == 1))
        and np.all(P.sum(axis=0) == 1)
        and np.all(P.sum(axis=1) == 1)
    )
    if not ok:
        raise ValueError("not a permutation matrix")
    return P.astype(np.float64)


def permutation_matrix(perm) -> np.ndarray:
    """Matrix P with P[k, perm[k]] = 1, so (P G P^T)[k, l] = G[perm[k], perm[l]]."""
    perm = np.asarray(perm)
    P = np.zeros((len(perm), len(perm)))
    P[np.arange(len(perm)), perm] = 1.0
    return P


def permute(G, P) -> np.ndarray:
    P = check_permutation(P)
    return P @ np.asarray(G, dtype=np.float64) @ P.T


def permute_vec(p, P) -> np.ndarray:
    """Row vector p times P^T."""
    P = check_permutation(P)
    return np.asarray(p, dtype=np.float64) @ P.T


# ------------------------------------------------------------------ checkpoints

_CKPT_HEADER = re.compile(r"^EEMAX-NET v1 L=(\d+) d=(\d+)$")


def save_checkpoint(params: NetParams, path):
    header = f"EEMAX-NET v1 L={params.num_layers} d={params.feature_dim}\n".encode("utf-8")
    Path(path).write_bytes(header + params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> NetParams:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    m = _CKPT_HEADER.match(raw[:nl].decode("utf-8", errors="replace")) if nl >= 0 else None
    if not m:
        raise ValueError(f"{path}: malformed checkpoint header")
    L, d = int(m.group(1)), int(m.group(2))
    vec = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    expected = param_count(L, d)
    if vec.size != expected:
        raise ValueError(f"{path}: expected {expected} parameters for L={L} d={d}, found {vec.size}")
    params = init_params(L, d)
    params.set_flat(vec)
    return params
