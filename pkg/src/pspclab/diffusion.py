"""EDM diffusion process: noise level sigma(t) = t, zero drift, g(t) = sqrt(2t).

The forward transition is ``p_t(z | x) = N(x, t^2 I)`` and the prior at the largest
time is ``N(0, sigma_max^2 I)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatch
from .tensorio import emit_csv

__all__ = [
    "DiffusionProcess",
    "TimeSchedule",
    "denoiser_to_score",
    "edm_schedule",
    "log_uniform_grid",
    "sample_forward",
    "sample_prior",
    "score_to_denoiser",
    "substream",
]


@dataclass(frozen=True)
class DiffusionProcess:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got "
                              f"{self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")


@dataclass(frozen=True)
class TimeSchedule:
    """Strictly decreasing noise levels, optionally terminated by 0."""

    ts: tuple
    name: str = ""

    def __post_init__(self):
        ts = tuple(float(t) for t in self.ts)
        object.__setattr__(self, "ts", ts)
        if len(ts) < 1:
            raise ConfigError("empty schedule")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("schedule must be strictly decreasing")
        if any(t <= 0 for t in ts[:-1]) or ts[-1] < 0:
            raise ConfigError("only the last entry of a schedule may be 0")

    @property
    def positive(self) -> tuple:
        return self.ts[:-1] if self.terminated else self.ts

    @property
    def terminated(self) -> bool:
        return self.ts[-1] == 0.0

    def __len__(self):
        return len(self.ts)

    def __iter__(self):
        return iter(self.ts)

    def to_csv(self, path=None) -> str:
        return emit_csv({"index": list(range(len(self.ts))), "t": list(self.ts)}, path)


def edm_schedule(process: DiffusionProcess, n_steps: int) -> TimeSchedule:
    """Rho-warped noise schedule with ``n_steps`` positive levels plus a final 0."""
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigError(f"n_steps must be an integer >= 2, got {n_steps}")
    n = int(n_steps)
    inv = 1.0 / process.rho
    lo, hi = process.sigma_min ** inv, process.sigma_max ** inv
    ts = [(hi + i / (n - 1) * (lo - hi)) ** process.rho for i in range(n)]
    # pin endpoints so schedules of different lengths share them exactly
    ts[0], ts[-1] = float(process.sigma_max), float(process.sigma_min)
    return TimeSchedule(tuple(ts) + (0.0,), name=f"edm-{n}")


def log_uniform_grid(t_lo: float, t_hi: float, count: int) -> list:
    """Geometrically spaced grid from ``t_lo`` to ``t_hi`` inclusive (ascending)."""
    if not (0 < t_lo < t_hi) or int(count) != count or count < 2:
        raise ConfigError(f"invalid grid ({t_lo}, {t_hi}, {count})")
    ts = np.exp(np.linspace(math.log(t_lo), math.log(t_hi), int(count)))
    ts[0], ts[-1] = t_lo, t_hi
    return [float(t) for t in ts]


def _t_key(t: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(t)))[0]


def substream(seed: int, t: float, index: int, tag: int = 0) -> np.random.Generator:
    """Generator for one (seed, t, sample index) cell, independent of evaluation order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag), _t_key(t), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_forward(dataset, t: float, count: int, seed: int, start: int = 0, tag: int = 0):
    """Draw ``count`` forward-process samples ``z = x_i + t * eps`` with uniform ``i``.

    Returns ``(z, idx)`` with ``z`` of shape (count, H, W, C). Sample ``k`` uses the
    substream for global index ``start + k``, so batches can be generated in pieces.
    """
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    shape = dataset.shape
    z = np.empty((count,) + shape)
    idx = np.empty(count, dtype=np.int64)
    for k in range(count):
        rng = substream(seed, t, start + k, tag)
        i = int(rng.integers(dataset.N))
        idx[k] = i
        z[k] = dataset.images[i] + t * rng.standard_normal(shape)
    return z, idx


def sample_prior(shape, count: int, sigma_max: float, seed: int) -> np.ndarray:
    """Initial states ``z ~ N(0, sigma_max^2 I)`` for PF-ODE sampling."""
    out = np.empty((count,) + tuple(shape))
    for k in range(count):
        out[k] = sigma_max * substream(seed, sigma_max, k, tag=1).standard_normal(shape)
    return out


def denoiser_to_score(x_hat, z, t):
    """Tweedie: score = (x_hat - z) / t^2."""
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    x_hat, z = np.asarray(x_hat, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if x_hat.shape != z.shape:
        raise ShapeMismatch(f"{x_hat.shape} vs {z.shape}")
    return (x_hat - z) / (t * t)


def score_to_denoiser(score, z, t):
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    score, z = np.asarray(score, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if score.shape != z.shape:
        raise ShapeMismatch(f"{score.shape} vs {z.shape}")
    return z + (t * t) * score
