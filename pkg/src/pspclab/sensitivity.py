"""Gradient sensitivity heatmaps and their spatial concentration.

``maps[x, y, i, j]`` is the expected channel-summed absolute derivative of output pixel
(x, y) with respect to input pixel (i, j), taking only same-channel derivatives
(output channel c against input channel c).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import sample_forward
from .empirical import _check_t, posterior_moments
from .errors import ConfigError, DegenerateHeatmap, RangeError, ShapeMismatch
from .tensorio import emit_csv, read_csv, read_tensor_file, write_tensor_file

__all__ = [
    "SensitivityMap",
    "aggregate_concentration",
    "blob_map_source",
    "concentration_side_length",
    "default_blob_width",
    "load_external_maps",
    "nearest_map_source",
    "sensitivity_map",
    "synthetic_blob_maps",
    "write_maps",
]

SOURCES = ("analytic-empirical", "finite-difference", "external-file", "synthetic-blob")


@dataclass(frozen=True)
class SensitivityMap:
    t: float
    maps: np.ndarray
    n_samples: int = 0
    source: str = "analytic-empirical"

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 4 or maps.shape[:2] != maps.shape[2:]:
            raise ShapeMismatch(f"maps must be (H, W, H, W), got {maps.shape}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source tag {self.source!r}")
        if not np.all(np.isfinite(maps)) or maps.min() < 0:
            raise RangeError("heatmap entries must be finite and nonnegative")
        object.__setattr__(self, "maps", maps)

    @property
    def degenerate(self) -> bool:
        return bool(np.any(self.maps.sum(axis=(2, 3)) <= 0))


def _analytic_accumulate(G, dataset, z, t, block):
    h, w, c = dataset.shape
    hw = h * w
    mom = posterior_moments(dataset, z, t)
    A = mom._A
    scale = 1.0 / (t * t)
    for ch in range(c):
        Ac = A[:, ch::c]
        for q0 in range(0, hw, block):
            G[:, q0:q0 + block] += np.abs(Ac.T @ Ac[:, q0:q0 + block]) * scale


def _fd_accumulate(G, denoise, z, t, step, block):
    h, w, c = z.shape
    d = h * w * c
    flat = z.reshape(-1)
    for j0 in range(0, d, block):
        js = np.arange(j0, min(d, j0 + block))
        plus = np.repeat(flat[None], js.size, axis=0)
        minus = plus.copy()
        plus[np.arange(js.size), js] += step
        minus[np.arange(js.size), js] -= step
        out = np.asarray(denoise(np.concatenate([plus, minus]).reshape(-1, h, w, c), t))
        cols = (out[:js.size] - out[js.size:]).reshape(js.size, h * w, c) / (2.0 * step)
        for k, j in enumerate(js):
            q, ch = divmod(int(j), c)
            G[:, q] += np.abs(cols[k, :, ch])


def sensitivity_map(denoiser, dataset, t, n_samples=1000, seed=0, method=None, z=None,
                    fd_step=1e-4, block=256) -> SensitivityMap:
    """Average same-channel absolute Jacobian of ``denoiser`` over forward samples at t.

    ``method`` is ``"analytic"`` (optimal denoiser only, via the posterior covariance)
    or ``"finite-difference"`` (central differences with ``fd_step``). By default the
    analytic route is used whenever the handle supports it. ``z`` overrides the
    forward samples with a fixed batch. ``block`` bounds how many Jacobian columns are
    held at once.
    """
    _check_t(t)
    if z is None:
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        Z, _ = sample_forward(dataset, t, int(n_samples), seed, tag=2)
    else:
        Z = np.asarray(z, dtype=np.float64)
        if Z.shape == dataset.shape:
            Z = Z[None]
        if Z.shape[1:] != dataset.shape:
            raise ShapeMismatch(f"z batch has shape {Z.shape}")
    analytic_ok = bool(getattr(denoiser, "supports_analytic_jacobian", False))
    if method is None:
        method = "analytic" if analytic_ok else "finite-difference"
    if method == "analytic" and not analytic_ok:
        raise ConfigError(f"{denoiser!r} has no analytic Jacobian")
    if method not in ("analytic", "finite-difference"):
        raise ConfigError(f"unknown method {method!r}")
    h, w, _ = dataset.shape
    G = np.zeros((h * w, h * w))
    denoise = getattr(denoiser, "denoise", denoiser)
    for zs in Z:
        if method == "analytic":
            _analytic_accumulate(G, dataset, zs, t, block)
        else:
            _fd_accumulate(G, denoise, zs, t, fd_step, block)
    G /= Z.shape[0]
    source = "analytic-empirical" if method == "analytic" else "finite-difference"
    return SensitivityMap(float(t), G.reshape(h, w, h, w), int(Z.shape[0]), source)


def concentration_side_length(heatmap, anchor, fraction) -> int:
    """Smallest odd side of a square centred on ``anchor`` (clipped to the image)
    whose mass is at least ``fraction`` of the heatmap total."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    total = hm.sum()
    if not total > 0:
        raise DegenerateHeatmap("heatmap has zero mass")
    h, w = hm.shape
    r, c = anchor
    s = 1
    while True:
        half = s // 2
        mass = hm[max(0, r - half):r + half + 1, max(0, c - half):c + half + 1].sum()
        if mass / total >= fraction:
            return s
        if half >= max(r, c, h - 1 - r, w - 1 - c):
            # whole image already inside the square; can only miss through rounding
            return s
        s += 2


def aggregate_concentration(smap: SensitivityMap, fractions=(0.5, 0.75, 0.95), csv_path=None):
    """Mean concentration side length over all anchors, one value per fraction.

    Returns ``(means, table)``; ``table`` has columns t, fraction, mean_side.
    """
    fractions = [float(p) for p in fractions]
    for p in fractions:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {p}")
    h, w = smap.maps.shape[:2]
    means = {}
    for p in fractions:
        sides = [concentration_side_length(smap.maps[r, c], (r, c), p)
                 for r in range(h) for c in range(w)]
        means[p] = float(np.mean(sides))
    table = {"t": [smap.t] * len(fractions), "fraction": fractions,
             "mean_side": [means[p] for p in fractions]}
    if csv_path is not None:
        emit_csv(table, csv_path)
    return means, table


def synthetic_blob_maps(height, width, blob_width) -> np.ndarray:
    """Unnormalized Gaussian blob heatmaps centred on each output pixel, (H, W, H, W)."""
    if not blob_width > 0:
        raise ConfigError(f"blob width must be positive, got {blob_width}")
    r = np.arange(height)
    c = np.arange(width)
    dr = (r[:, None] - r[None, :]) ** 2
    dc = (c[:, None] - c[None, :]) ** 2
    # maps[x, y, i, j] = exp(-((i - x)^2 + (j - y)^2) / (2 w^2))
    maps = np.exp(-(dr[:, None, :, None] + dc[None, :, None, :]) / (2.0 * blob_width ** 2))
    return maps


def default_blob_width(t: float) -> float:
    """Monotone blob width for noise level t.

    Chosen so that, away from the border, half of a blob's mass sits in a centred
    square of side about 3 at t = 0.03 and about 13 at t = 30.
    """
    _check_t(t)
    return 2.9 * t ** 0.215


def blob_map_source(height, width, width_fn=default_blob_width):
    """Callable ``t -> SensitivityMap`` of synthetic blobs with width ``width_fn(t)``."""

    def source(t):
        return SensitivityMap(float(t), synthetic_blob_maps(height, width, width_fn(t)),
                              0, "synthetic-blob")

    return source


def nearest_map_source(smaps):
    """Callable ``t -> SensitivityMap`` picking the stored map nearest in log t."""
    smaps = list(smaps)
    if not smaps:
        raise ConfigError("no sensitivity maps given")

    def source(t):
        _check_t(t)
        return min(smaps, key=lambda m: abs(math.log(m.t) - math.log(t)))

    return source


def _times_path(path) -> Path:
    return Path(str(path) + ".times.csv")


def write_maps(path, smaps, dtype="f64"):
    """Write one map as (H, W, H, W) or several as (T, H, W, H, W), plus a times sidecar."""
    if isinstance(smaps, SensitivityMap):
        smaps = [smaps]
        stacked = False
    else:
        smaps = list(smaps)
        stacked = True
    arr = np.stack([m.maps for m in smaps]) if stacked else smaps[0].maps
    write_tensor_file(path, arr, dtype=dtype)
    emit_csv({"index": list(range(len(smaps))), "t": [m.t for m in smaps],
              "n_samples": [m.n_samples for m in smaps]}, _times_path(path))
    return path


def load_external_maps(path, ts=None) -> list:
    """Read heatmaps written outside this package (or by :func:`write_maps`).

    Returns a list of SensitivityMap in file order, tagged ``external-file``. Noise
    levels come from ``ts`` or from the ``<path>.times.csv`` sidecar.
    """
    arr = read_tensor_file(path)
    if arr.ndim == 4:
        arr = arr[None]
    elif arr.ndim != 5:
        raise ShapeMismatch(f"heatmap tensor must have rank 4 or 5, got {arr.ndim}")
    if arr.shape[1:3] != arr.shape[3:5]:
        raise ShapeMismatch(f"heatmap tensor has shape {arr.shape}")
    if np.any(arr < 0):
        raise RangeError("negative heatmap entries")
    counts = [0] * arr.shape[0]
    if ts is None:
        side = _times_path(path)
        if not side.exists():
            raise ConfigError(f"no noise levels given and no sidecar {side}")
        table = read_csv(side)
        ts = table["t"]
        counts = [int(n) for n in table.get("n_samples", counts)]
    ts = [float(t) for t in ts]
    if len(ts) != arr.shape[0]:
        raise ShapeMismatch(f"{len(ts)} noise levels for {arr.shape[0]} heatmap stacks")
    return [SensitivityMap(t, a, n, "external-file") for t, a, n in zip(ts, arr, counts)]
