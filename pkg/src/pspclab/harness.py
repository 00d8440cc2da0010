"""Evaluation sets and the MSE protocols built on them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import sample_forward
from .errors import ConfigError, ShapeMismatch
from .geometry import square_crop_set
from .pspc import patch_set_error
from .sampler import sample_euler, sample_heun
from .tensorio import emit_csv, read_csv, read_tensor_file, write_tensor_file

__all__ = [
    "EvalSet",
    "build_forward_evalset",
    "argmin_trace",
    "build_reverse_evalset",
    "compare_samples",
    "mse_sweep",
    "nearest_training_distance",
    "patch_error_sweep",
]


@dataclass
class EvalSet:
    """Noisy inputs ``batches[k]`` (M, H, W, C) at noise level ``ts[k]``."""

    ts: tuple
    batches: np.ndarray
    source: str = "forward-process"
    source_indices: np.ndarray = None
    seed: int = 0
    schedule: str = ""

    def __post_init__(self):
        self.ts = tuple(float(t) for t in self.ts)
        self.batches = np.asarray(self.batches, dtype=np.float64)
        if self.batches.ndim != 5:
            raise ShapeMismatch(f"batches must be (T, M, H, W, C), got {self.batches.shape}")
        if len(self.ts) != self.batches.shape[0]:
            raise ShapeMismatch(f"{len(self.ts)} noise levels for {self.batches.shape[0]} batches")
        if any(t <= 0 for t in self.ts):
            raise ConfigError("evaluation noise levels must be positive")

    @property
    def M(self) -> int:
        return self.batches.shape[1]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor_file(d / "batches.pspc", self.batches)
        if self.source_indices is not None:
            write_tensor_file(d / "indices.pspc", self.source_indices.astype(np.float64))
        emit_csv({"index": list(range(len(self.ts))), "t": list(self.ts)}, d / "times.csv")
        with open(d / "evalset.txt", "w", newline="\n") as fh:
            fh.write(f"source={self.source}\nseed={self.seed}\nschedule={self.schedule}\n")
        return d

    @classmethod
    def load(cls, directory) -> "EvalSet":
        d = Path(directory)
        meta = dict(line.split("=", 1) for line in (d / "evalset.txt").read_text().splitlines()
                    if "=" in line)
        idx = None
        if (d / "indices.pspc").exists():
            idx = read_tensor_file(d / "indices.pspc").astype(np.int64)
        return cls(read_csv(d / "times.csv")["t"], read_tensor_file(d / "batches.pspc"),
                   meta.get("source", ""), idx, int(meta.get("seed", 0)), meta.get("schedule", ""))


def build_forward_evalset(dataset, t_grid, M, seed, schedule="") -> EvalSet:
    """M forward-process samples per noise level, with their source image indices."""
    if int(M) != M or M < 1:
        raise ConfigError("M must be a positive integer")
    ts = [float(t) for t in t_grid]
    batches = np.empty((len(ts), int(M)) + tuple(dataset.shape))
    idx = np.empty((len(ts), int(M)), dtype=np.int64)
    for k, t in enumerate(ts):
        batches[k], idx[k] = sample_forward(dataset, t, int(M), seed)
    return EvalSet(tuple(ts), batches, "forward-process", idx, int(seed), schedule)


def build_reverse_evalset(denoiser, schedule, z_init, solver="heun") -> EvalSet:
    """States visited by PF-ODE trajectories of ``denoiser`` at each positive schedule time."""
    run = sample_heun if solver == "heun" else sample_euler
    traj = run(denoiser, schedule, z_init, capture=True)
    positive = [t for t in traj.times if t > 0]
    batches = np.stack(traj.zs[:len(positive)])
    if batches.ndim == 4:
        batches = batches[:, None]
    name = getattr(denoiser, "describe", lambda: "callable")()
    return EvalSet(tuple(positive), batches, f"reverse-process:{name}:{solver}",
                   schedule=getattr(schedule, "name", ""))


def mse_sweep(candidate, reference, evalset, csv_path=None) -> dict:
    """Per-noise-level mean (over samples, pixels and channels) squared difference."""
    table = {"t": [], "mse": []}
    for k, t in enumerate(evalset.ts):
        a = np.asarray(candidate.evaluate(evalset, k))
        b = np.asarray(reference.evaluate(evalset, k))
        table["t"].append(t)
        table["mse"].append(float(np.mean((a - b) ** 2)))
    if csv_path is not None:
        emit_csv(table, csv_path)
    return table


def patch_error_sweep(dataset, sizes, reference, evalset, top_k=None, csv_path=None) -> dict:
    """Patch posterior means of each size against the same crops of the reference output.

    For each (t, s) the squared error is averaged over samples, over the entries of each
    patch, and over all s x s crops with equal weight per crop.
    """
    h, w, _ = dataset.shape
    sizes = [int(s) for s in sizes]
    for s in sizes:
        if not 1 <= s <= min(h, w):
            raise ConfigError(f"patch size {s} outside [1, {min(h, w)}]")
    table = {"t": [], "s": [], "mse": []}
    for k, t in enumerate(evalset.ts):
        Z = evalset.batches[k]
        ref = np.asarray(reference.evaluate(evalset, k))
        for s in sizes:
            table["t"].append(t)
            table["s"].append(s)
            table["mse"].append(patch_set_error(dataset, square_crop_set(h, w, s), Z, t, ref, top_k))
    if csv_path is not None:
        emit_csv(table, csv_path)
    return table


def argmin_trace(table, key="s") -> list:
    """Best candidate per t from a sweep table; ties go to the smaller candidate."""
    best = {}
    for t, c, e in zip(table["t"], table[key], table["mse"]):
        cur = best.get(t)
        if cur is None or e < cur[1] or (e == cur[1] and c < cur[0]):
            best[t] = (c, e)
    return [(t, v[0]) for t, v in best.items()]


def nearest_training_distance(dataset, samples) -> tuple:
    """Max-abs distance from each sample to its nearest training image, and that index."""
    S = np.asarray(samples, dtype=np.float64).reshape(-1, dataset.d)
    dist = np.empty(S.shape[0])
    idx = np.empty(S.shape[0], dtype=np.int64)
    for m, s in enumerate(S):
        per = np.max(np.abs(dataset.flat - s), axis=1)
        idx[m] = int(np.argmin(per))
        dist[m] = per[idx[m]]
    return dist, idx


def compare_samples(handles: dict, schedule, z_init, dataset=None, out_dir=None,
                    solver="heun") -> dict:
    """Sample from shared initial states with each handle and compare final samples.

    Returns ``{"samples": {name: array}, "pairs": table, "nearest": table}``. With
    ``out_dir`` the sample tensors and both tables are written there.
    """
    if not handles:
        raise ConfigError("no handles to compare")
    z_init = np.asarray(z_init, dtype=np.float64)
    run = sample_heun if solver == "heun" else sample_euler
    samples = {name: run(h, schedule, z_init).final for name, h in handles.items()}
    pairs = {"a": [], "b": [], "mse": []}
    for a, b in itertools.combinations(samples, 2):
        pairs["a"].append(a)
        pairs["b"].append(b)
        pairs["mse"].append(float(np.mean((samples[a] - samples[b]) ** 2)))
    nearest = {"handle": [], "sample": [], "nearest_index": [], "max_abs_distance": []}
    if dataset is not None:
        for name, smp in samples.items():
            dist, idx = nearest_training_distance(dataset, smp)
            for m in range(dist.size):
                nearest["handle"].append(name)
                nearest["sample"].append(m)
                nearest["nearest_index"].append(int(idx[m]))
                nearest["max_abs_distance"].append(float(dist[m]))
    if out_dir is not None:
        out = Path(out_dir)
        for name, smp in samples.items():
            write_tensor_file(out / f"samples_{_safe(name)}.pspc", smp)
        emit_csv(pairs, out / "pairwise_mse.csv")
        if dataset is not None:
            emit_csv(nearest, out / "nearest_training.csv")
    return {"samples": samples, "pairs": pairs, "nearest": nearest}


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
