"""Uniform denoiser handles: ``handle.denoise(z, t) -> x_hat``.

Handles also expose ``evaluate(evalset, k)``, the output on the k-th batch of an
evaluation set. For in-repo denoisers this just denoises the stored batch; external
handles look their outputs up by grid position instead.
"""

from __future__ import annotations

import numpy as np

from .empirical import fit_gaussian, gaussian_denoise, optimal_denoise
from .errors import ConfigError, MissingData, ShapeMismatch
from .geometry import flex_crop_set
from .pspc import LambdaSchedule, SizeSchedule, _maps_array, pspc_denoise, pspc_square
from .tensorio import read_tensor_file

__all__ = [
    "CallableDenoiser",
    "ConstantDenoiser",
    "DenoiserHandle",
    "ExternalDenoiser",
    "GaussianDenoiser",
    "OptimalDenoiser",
    "PSPCFlexDenoiser",
    "PSPCSquareDenoiser",
]


class DenoiserHandle:
    kind = "abstract"
    supports_analytic_jacobian = False

    def denoise(self, z, t):
        raise NotImplementedError

    def __call__(self, z, t):
        return self.denoise(z, t)

    def evaluate(self, evalset, k):
        return self.denoise(evalset.batches[k], evalset.ts[k])

    def describe(self) -> str:
        return self.kind

    def __repr__(self):
        return f"<{type(self).__name__} {self.describe()}>"


class OptimalDenoiser(DenoiserHandle):
    kind = "optimal"

    def __init__(self, dataset, top_k=None):
        self.dataset = dataset
        self.top_k = top_k

    @property
    def supports_analytic_jacobian(self):
        return self.top_k is None

    def denoise(self, z, t):
        return optimal_denoise(self.dataset, z, t, self.top_k)

    def describe(self):
        return "optimal" if self.top_k is None else f"optimal:topk={self.top_k}"


class PSPCSquareDenoiser(DenoiserHandle):
    """PSPC over square crops; ``schedule`` is a SizeSchedule or a fixed patch size."""

    kind = "pspc-square"

    def __init__(self, dataset, schedule, top_k=None):
        self.dataset = dataset
        self.schedule = schedule if isinstance(schedule, SizeSchedule) else SizeSchedule.constant(schedule)
        self.top_k = top_k

    def denoise(self, z, t):
        return pspc_square(self.dataset, z, t, self.schedule, self.top_k)

    def describe(self):
        vals = self.schedule.values
        return f"square:{vals[0]}" if len(vals) == 1 else f"square-schedule:{len(vals)}-knots"


class PSPCFlexDenoiser(DenoiserHandle):
    """PSPC over greedy heatmap crops.

    ``maps`` is a callable ``t -> heatmaps`` (see ``sensitivity.blob_map_source`` and
    ``sensitivity.nearest_map_source``) or a fixed (H, W, H, W) array.
    """

    kind = "pspc-flex"

    def __init__(self, dataset, maps, schedule, top_k=None):
        self.dataset = dataset
        self.maps = maps if callable(maps) else (lambda t, _m=maps: _m)
        self.schedule = schedule if isinstance(schedule, LambdaSchedule) else LambdaSchedule.constant(schedule)
        self.top_k = top_k
        self._sets = {}

    def patch_set(self, t):
        lam = self.schedule(t)
        key = (float(t), lam)
        ps = self._sets.get(key)
        if ps is None:
            ps = self._sets.setdefault(key, flex_crop_set(_maps_array(self.maps(t)), lam))
        return ps

    def denoise(self, z, t):
        return pspc_denoise(self.dataset, z, t, self.patch_set(t), self.top_k)

    def describe(self):
        vals = self.schedule.values
        return f"flex:{vals[0]!r}" if len(vals) == 1 else f"flex-schedule:{len(vals)}-knots"


class GaussianDenoiser(DenoiserHandle):
    kind = "gaussian"

    def __init__(self, dataset):
        self.model = fit_gaussian(dataset)

    def denoise(self, z, t):
        return gaussian_denoise(self.model, z, t)


class ConstantDenoiser(DenoiserHandle):
    kind = "constant"

    def __init__(self, value):
        self.value = value

    def denoise(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), z.shape).copy()

    def describe(self):
        return f"constant:{self.value!r}" if np.ndim(self.value) == 0 else "constant:array"


class CallableDenoiser(DenoiserHandle):
    kind = "callable"

    def __init__(self, fn, name="callable"):
        self.fn = fn
        self.name = name

    def denoise(self, z, t):
        return self.fn(z, t)

    def describe(self):
        return self.name


class ExternalDenoiser(DenoiserHandle):
    """Denoiser outputs computed elsewhere, stored as a (T, M, H, W, C) tensor aligned
    with an evaluation set's grid. NaN entries mark missing cells."""

    kind = "external-file"

    def __init__(self, outputs, path=""):
        if not isinstance(outputs, np.ndarray):
            path = str(outputs)
            outputs = read_tensor_file(outputs)
        if outputs.ndim != 5:
            raise ShapeMismatch(f"external outputs must be (T, M, H, W, C), got {outputs.shape}")
        self.outputs = np.asarray(outputs, dtype=np.float64)
        self.path = path

    def denoise(self, z, t):
        raise ConfigError("external denoiser outputs exist only on their evaluation grid")

    def evaluate(self, evalset, k):
        T, M = self.outputs.shape[:2]
        batch = evalset.batches[k]
        if k >= T:
            raise MissingData(f"external outputs stop at t index {T - 1}", k, 0)
        if batch.shape[0] > M:
            raise MissingData(f"external outputs hold {M} samples per t", k, M)
        if self.outputs.shape[2:] != batch.shape[1:]:
            raise ShapeMismatch(f"external outputs have image shape {self.outputs.shape[2:]}")
        out = self.outputs[k, :batch.shape[0]]
        bad = ~np.all(np.isfinite(out.reshape(out.shape[0], -1)), axis=1)
        if bad.any():
            m = int(np.argmax(bad))
            raise MissingData(f"external output missing at (t index {k}, sample {m})", k, m)
        return out

    def describe(self):
        return f"external:{self.path}" if self.path else "external"
