"""Multi-cell uplink scenario generation and dataset persistence.

Gains are noise-normalized: ``gains[i, j]`` is the matched-filter gain of user
``j`` at the base station serving user ``i``, divided by the noise power.
Row index = receiver, column index = transmitter.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

DEFAULT_BS_POSITIONS = ((0.5, 0.5), (0.5, 1.5), (1.5, 1.5), (1.5, 0.5))


class DatasetFormatError(ValueError):
    pass


def dbm_to_watt(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def dbw_to_watt(dbw):
    return 10.0 ** (dbw / 10.0)


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    num_users: int = 7
    num_bs: int = 4
    bs_antennas: int = 2
    bs_positions: tuple = DEFAULT_BS_POSITIONS
    area: tuple = ((0.0, 0.0), (2.0, 2.0))  # km, (lower-left, upper-right)
    carrier_freq: float = 1.8e9
    decay_factor: float = 4.5
    noise_figure_db: float = 3.0
    noise_density_dbm_hz: float = -174.0
    bandwidth: float = 180e3
    static_power: float = 1.0
    amp_inefficiency: float = 4.0
    p_max: float = dbm_to_watt(5.0)
    rng_seed: int = 0
    min_distance_km: float = 0.035

    def __post_init__(self):
        if self.num_users < 1 or self.num_bs < 1 or self.bs_antennas < 1:
            raise ValueError("num_users, num_bs and bs_antennas must all be >= 1")
        for name in ("p_max", "bandwidth", "static_power", "amp_inefficiency"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.bs_positions) != self.num_bs:
            raise ValueError(f"expected {self.num_bs} BS positions, got {len(self.bs_positions)}")
        (x0, y0), (x1, y1) = self.area
        for x, y in self.bs_positions:
            if not (x0 <= x <= x1 and y0 <= y <= y1):
                raise ValueError(f"BS position {(x, y)} lies outside area {self.area}")

    @property
    def noise_power(self) -> float:
        """sigma^2 = F * N0 * B in watts."""
        n0_watt_hz = dbm_to_watt(self.noise_density_dbm_hz)
        return db_to_linear(self.noise_figure_db) * n0_watt_hz * self.bandwidth

    def to_dict(self):
        d = asdict(self)
        d["bs_positions"] = [list(p) for p in self.bs_positions]
        d["area"] = [list(p) for p in self.area]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["bs_positions"] = tuple(tuple(p) for p in d["bs_positions"])
        d["area"] = tuple(tuple(p) for p in d["area"])
        return cls(**d)


@dataclass(frozen=True)
class ChannelMatrix:
    gains: np.ndarray
    assignment: tuple = ()

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"gain matrix must be square, got shape {g.shape}")
        if not (np.all(np.isfinite(g)) and np.all(g > 0)):
            raise ValueError("gains must be strictly positive and finite")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @property
    def num_users(self) -> int:
        return self.gains.shape[0]


@dataclass(frozen=True)
class Dataset:
    config: ScenarioConfig
    samples: tuple
    split: str = "train"
    seed: int = field(default=None)

    def __post_init__(self):
        if self.seed is None:
            object.__setattr__(self, "seed", self.config.rng_seed)
        for s in self.samples:
            if s.num_users != self.config.num_users:
                raise ValueError(
                    f"sample with I={s.num_users} in dataset configured for I={self.config.num_users}"
                )

    def __len__(self):
        return len(self.samples)

    def gains(self) -> np.ndarray:
        """Stacked (N, I, I) gain array."""
        if not self.samples:
            return np.zeros((0, self.config.num_users, self.config.num_users))
        return np.stack([s.gains for s in self.samples])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.split == other.split
            and self.seed == other.seed
            and len(self) == len(other)
            and all(np.array_equal(a.gains, b.gains) for a, b in zip(self.samples, other.samples))
        )


def path_loss_db(distance_km, cfg: ScenarioConfig):
    """Log-distance path loss anchored at free-space loss at 1 m."""
    d_m = np.maximum(np.asarray(distance_km, dtype=np.float64), cfg.min_distance_km) * 1e3
    pl0 = 20.0 * math.log10(4.0 * math.pi * cfg.carrier_freq / SPEED_OF_LIGHT)
    return pl0 + 10.0 * cfg.decay_factor * np.log10(d_m)


def matched_filter_gain(h_serve, h_src) -> float:
    """|w^H h_src|^2 with w = h_serve / ||h_serve||."""
    h_serve = np.asarray(h_serve, dtype=np.complex128)
    h_src = np.asarray(h_src, dtype=np.complex128)
    norm = np.linalg.norm(h_serve)
    if norm == 0:
        raise ValueError("serving channel vector is zero")
    return float(abs(np.vdot(h_serve, h_src)) ** 2 / norm**2)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def draw_scenario(config: ScenarioConfig, rng: np.random.Generator, normalize=True) -> ChannelMatrix:
    I, M, nr = config.num_users, config.num_bs, config.bs_antennas
    (x0, y0), (x1, y1) = config.area
    users = rng.uniform([x0, y0], [x1, y1], size=(I, 2))
    bs = np.asarray(config.bs_positions, dtype=np.float64)
    dist = np.linalg.norm(bs[:, None, :] - users[None, :, :], axis=-1)  # (M, I)
    amp = np.sqrt(10.0 ** (-path_loss_db(dist, config) / 10.0))
    fading = rng.standard_normal((M, I, nr)) * np.exp(1j * rng.uniform(0, 2 * np.pi, (M, I, nr)))
    h = amp[:, :, None] * fading  # h[m, j] is the n_R-vector from user j to BS m

    direct = np.sum(np.abs(h) ** 2, axis=-1)  # matched-filter self gain ||h||^2
    assignment = tuple(int(m) for m in np.argmax(direct, axis=0))

    gains = np.empty((I, I))
    for i, m in enumerate(assignment):
        for j in range(I):
            gains[i, j] = matched_filter_gain(h[m, i], h[m, j])
    if normalize:
        gains = gains / config.noise_power
    # an exactly orthogonal interferer is measure-zero; keep the matrix strictly positive
    gains = np.maximum(gains, np.finfo(float).tiny)
    return ChannelMatrix(gains, assignment)


def generate_dataset(config: ScenarioConfig, n: int, split="train", seed=None, normalize=True) -> Dataset:
    seed = config.rng_seed if seed is None else seed
    samples = tuple(draw_scenario(config, _sample_rng(seed, k), normalize) for k in range(n))
    return Dataset(config, samples, split, seed)


def dataset_from_gains(gains, config: ScenarioConfig | None = None, split="train", seed=0) -> Dataset:
    gains = np.asarray(gains, dtype=np.float64)
    if config is None:
        config = ScenarioConfig(num_users=gains.shape[-1], rng_seed=seed)
    return Dataset(config, tuple(ChannelMatrix(g) for g in gains), split, seed)


# ------------------------------------------------------------------ file format

_HEADER = re.compile(r"^EEMAX v1 I=(\d+) n=(\d+) seed=(-?\d+)$")


def save_dataset(ds: Dataset, path):
    """Write the binary dataset plus a ``.json`` sidecar with the full config."""
    path = Path(path)
    I = ds.config.num_users
    header = f"EEMAX v1 I={I} n={len(ds)} seed={ds.seed}\n".encode("utf-8")
    payload = ds.gains().astype("<f8", copy=False).tobytes(order="C")
    path.write_bytes(header + payload)
    meta = {
        "config": ds.config.to_dict(),
        "split": ds.split,
        "assignment": [list(s.assignment) for s in ds.samples],
    }
    sidecar(path).write_text(json.dumps(meta, indent=1))


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError(f"{path}: missing header line")
    m = _HEADER.match(raw[:nl].decode("utf-8", errors="replace"))
    if not m:
        raise DatasetFormatError(f"{path}: malformed header {raw[:nl][:80]!r}")
    I, n, seed = int(m.group(1)), int(m.group(2)), int(m.group(3))
    payload = raw[nl + 1 :]
    expected = n * I * I * 8
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: dimension mismatch, header promises {n}x{I}x{I} gains ({expected} bytes), "
            f"payload has {len(payload)} bytes"
        )
    gains = np.frombuffer(payload, dtype="<f8").reshape(n, I, I).astype(np.float64)

    meta_path = sidecar(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        config = ScenarioConfig.from_dict(meta["config"])
        split = meta.get("split", "train")
        assignment = meta.get("assignment") or [()] * n
        if config.num_users != I:
            raise DatasetFormatError(f"{path}: sidecar says I={config.num_users}, header says I={I}")
    else:
        config = ScenarioConfig(num_users=I, rng_seed=seed)
        split, assignment = "train", [()] * n
    samples = tuple(ChannelMatrix(g, tuple(a)) for g, a in zip(gains, assignment))
    return Dataset(config, samples, split, seed)
