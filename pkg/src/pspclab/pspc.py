"""Patch Set Posterior Composite denoisers.

For a set of crops, every crop of ``z`` is denoised by its own patch posterior mean and
the patch estimates are averaged back into the image, each pixel divided by the number
of crops covering it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .empirical import _as_batch, _check_t, patch_posterior_mean
from .errors import ConfigError, ShapeMismatch
from .geometry import PatchSet, flex_crop_set, gather, scatter_add, square_crop_set
from .tensorio import emit_csv, read_csv

__all__ = [
    "LambdaSchedule",
    "SizeSchedule",
    "pspc_denoise",
    "pspc_flex",
    "pspc_square",
    "tune_schedule",
]


@dataclass(frozen=True)
class _KnotSchedule:
    """Piecewise-constant value of t, looked up at the nearest knot in log t."""

    knots: tuple

    def __post_init__(self):
        knots = tuple(sorted(((float(t), self._coerce(v)) for t, v in self.knots),
                             key=lambda kv: -kv[0]))
        if not knots:
            raise ConfigError("schedule needs at least one knot")
        ts = [t for t, _ in knots]
        if ts[-1] <= 0:
            raise ConfigError("knot times must be positive")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("duplicate knot times")
        object.__setattr__(self, "knots", knots)

    @staticmethod
    def _coerce(v):
        return v

    @classmethod
    def constant(cls, value):
        return cls(((1.0, value),))

    def __call__(self, t: float):
        _check_t(t)
        lt = math.log(t)
        best = min(range(len(self.knots)), key=lambda k: abs(math.log(self.knots[k][0]) - lt))
        return self.knots[best][1]

    @property
    def times(self):
        return [t for t, _ in self.knots]

    @property
    def values(self):
        return [v for _, v in self.knots]

    def to_csv(self, path=None) -> str:
        return emit_csv({"t": self.times, "value": self.values}, path)

    @classmethod
    def from_csv(cls, path):
        table = read_csv(path)
        return cls(tuple(zip(table["t"], table["value"])))


class SizeSchedule(_KnotSchedule):
    @staticmethod
    def _coerce(v):
        if float(v) != int(float(v)) or int(float(v)) < 1:
            raise ConfigError(f"patch size must be a positive integer, got {v}")
        return int(float(v))


class LambdaSchedule(_KnotSchedule):
    @staticmethod
    def _coerce(v):
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {v}")
        return v


def pspc_denoise(dataset, z, t, patch_set: PatchSet, top_k=None) -> np.ndarray:
    """Coverage-normalized sum of patch posterior means over ``patch_set``."""
    _check_t(t)
    Z, single = _as_batch(z, dataset.shape)
    h, w, _ = dataset.shape
    if (patch_set.height, patch_set.width) != (h, w):
        raise ShapeMismatch(f"patch set is for {patch_set.height}x{patch_set.width} images")
    patch_set.check_covered()
    acc = np.zeros_like(Z)
    for crop in patch_set.crops:
        est = patch_posterior_mean(dataset, crop, gather(crop, Z), t, top_k)
        scatter_add(crop, est, acc)
    acc /= patch_set.coverage[:, :, None]
    return acc[0] if single else acc


def _square_size(dataset, schedule, t):
    return int(schedule(t) if callable(schedule) else schedule)


def pspc_square(dataset, z, t, schedule, top_k=None) -> np.ndarray:
    """PSPC over all s x s crops, with ``s = schedule(t)`` (or a fixed integer)."""
    _check_t(t)
    h, w, _ = dataset.shape
    return pspc_denoise(dataset, z, t, square_crop_set(h, w, _square_size(dataset, schedule, t)),
                        top_k)


def _maps_array(maps):
    return getattr(maps, "maps", maps)


def pspc_flex(dataset, z, t, maps, schedule, top_k=None) -> np.ndarray:
    """PSPC over greedy heatmap crops; ``maps`` is (H, W, H, W) or a SensitivityMap."""
    _check_t(t)
    lam = schedule(t) if callable(schedule) else float(schedule)
    return pspc_denoise(dataset, z, t, flex_crop_set(_maps_array(maps), lam), top_k)


def patch_set_error(dataset, patch_set, Z, t, reference, top_k=None) -> float:
    """Mean over crops (equally weighted) of per-entry squared patch error vs reference."""
    total = 0.0
    for crop in patch_set.crops:
        est = patch_posterior_mean(dataset, crop, gather(crop, Z), t, top_k)
        total += float(np.mean((est - gather(crop, reference)) ** 2))
    return total / len(patch_set)


def tune_schedule(dataset, reference, t_grid, candidates, samples_per_t=256, seed=0,
                  kind="size", objective="patch", maps=None, top_k=None, csv_path=None):
    """Pick, for each t, the candidate patch size (or lambda) with the lowest error.

    ``reference`` is a denoiser handle (or callable ``(z, t) -> x_hat``). For each t a
    forward-process batch is drawn and every candidate scored by mean squared error,
    either of the composite output (``objective="composite"``) or averaged over the
    individual patch posterior means (``objective="patch"``). Ties go to the smaller
    candidate. ``maps`` (a callable ``t -> heatmaps``) is required for ``kind="lambda"``.

    Returns ``(schedule, table)`` where ``table`` holds the full error matrix.
    """
    from .diffusion import sample_forward

    t_grid = [float(t) for t in t_grid]
    if not t_grid:
        raise ConfigError("empty t grid")
    candidates = sorted(set(candidates))
    if not candidates:
        raise ConfigError("no candidates")
    if samples_per_t < 1:
        raise ConfigError("samples_per_t must be >= 1")
    if kind not in ("size", "lambda"):
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if objective not in ("patch", "composite"):
        raise ConfigError(f"unknown objective {objective!r}")
    if kind == "lambda" and maps is None:
        raise ConfigError("lambda tuning needs heatmaps")
    h, w, _ = dataset.shape
    ref = reference.denoise if hasattr(reference, "denoise") else reference

    table = {"t": [], "candidate": [], "mse": []}
    knots = []
    for t in t_grid:
        Z, _ = sample_forward(dataset, t, samples_per_t, seed)
        ref_out = np.asarray(ref(Z, t))
        errors = []
        for cand in candidates:
            if kind == "size":
                ps = square_crop_set(h, w, int(cand))
            else:
                ps = flex_crop_set(_maps_array(maps(t)), float(cand))
            if objective == "composite":
                est = pspc_denoise(dataset, Z, t, ps, top_k)
                err = float(np.mean((est - ref_out) ** 2))
            else:
                err = patch_set_error(dataset, ps, Z, t, ref_out, top_k)
            errors.append(err)
            table["t"].append(t)
            table["candidate"].append(cand)
            table["mse"].append(err)
        # first minimum in ascending candidate order = smaller candidate on ties
        knots.append((t, candidates[int(np.argmin(errors))]))
    if csv_path is not None:
        emit_csv(table, csv_path)
    cls = SizeSchedule if kind == "size" else LambdaSchedule
    return cls(tuple(knots)), table
