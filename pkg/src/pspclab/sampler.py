"""Deterministic probability-flow ODE sampling for the EDM process.

With zero drift and g(t)^2 = 2t the PF-ODE reads dz/dt = (z - D(z, t)) / t, where D is
any denoiser. Steps follow a TimeSchedule that ends at t = 0; the last step is a plain
Euler step, which lands exactly on the denoiser output at the last positive t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .tensorio import emit_csv, write_tensor_file

__all__ = ["Trajectory", "integrate", "pf_ode_rhs", "sample_euler", "sample_heun"]


def _denoise_fn(denoiser):
    return getattr(denoiser, "denoise", denoiser)


def pf_ode_rhs(denoiser, z, t):
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    z = np.asarray(z, dtype=np.float64)
    return (z - _denoise_fn(denoiser)(z, t)) / t


@dataclass
class Trajectory:
    """States ``zs[k]`` at ``times[k]`` and denoiser outputs ``x_hats[k]`` at each positive time."""

    times: tuple
    zs: list = field(default_factory=list)
    x_hats: list = field(default_factory=list)
    final: np.ndarray = None
    n_calls: int = 0
    solver: str = ""

    def save(self, prefix, dtype="f64"):
        """Write ``<prefix>_z.pspc``, ``<prefix>_xhat.pspc`` and ``<prefix>_times.csv``."""
        prefix = str(prefix)
        paths = [write_tensor_file(prefix + "_final.pspc", self.final, dtype)]
        if self.zs:
            paths.append(write_tensor_file(prefix + "_z.pspc", np.stack(self.zs), dtype))
        if self.x_hats:
            paths.append(write_tensor_file(prefix + "_xhat.pspc", np.stack(self.x_hats), dtype))
        emit_csv({"index": list(range(len(self.times))), "t": list(self.times)},
                 prefix + "_times.csv")
        return paths


def _check_schedule(schedule, require_zero=True):
    ts = tuple(float(t) for t in schedule)
    if len(ts) < 2 or (require_zero and ts[-1] != 0.0):
        raise ConfigError("sampling schedule must end at t = 0")
    if any(b >= a for a, b in zip(ts, ts[1:])) or any(t <= 0 for t in ts[:-1]) or ts[-1] < 0:
        raise ConfigError("sampling schedule must be strictly decreasing and positive before 0")
    return ts


def _run(denoiser, schedule, z_init, capture, heun, require_zero=True):
    ts = _check_schedule(schedule, require_zero)
    denoise = _denoise_fn(denoiser)
    z = np.array(z_init, dtype=np.float64)
    traj = Trajectory(ts, solver="heun" if heun else "euler")
    if capture:
        traj.zs.append(z.copy())
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        x_hat = denoise(z, t_cur)
        traj.n_calls += 1
        if capture:
            traj.x_hats.append(np.array(x_hat, copy=True))
        if t_next == 0.0:
            # z + (0 - t) (z - x_hat) / t, written without the rounding of the long form
            z = np.array(x_hat, dtype=np.float64, copy=True)
        else:
            d_cur = (z - x_hat) / t_cur
            z_next = z + (t_next - t_cur) * d_cur
            if heun:
                d_next = (z_next - denoise(z_next, t_next)) / t_next
                traj.n_calls += 1
                z_next = z + (t_next - t_cur) * (0.5 * d_cur + 0.5 * d_next)
            z = z_next
        if capture:
            traj.zs.append(z.copy())
    traj.final = z
    return traj


def sample_euler(denoiser, schedule, z_init, capture=False) -> Trajectory:
    """First-order Euler integration of the PF-ODE from ``z_init`` at ``schedule[0]``."""
    return _run(denoiser, schedule, z_init, capture, heun=False)


def sample_heun(denoiser, schedule, z_init, capture=False) -> Trajectory:
    """Second-order Heun integration; the step into t = 0 has no corrector."""
    return _run(denoiser, schedule, z_init, capture, heun=True)


def integrate(denoiser, times, z_init, solver="heun", capture=False) -> Trajectory:
    """Integrate between any decreasing noise levels; ``times`` need not reach 0."""
    if solver not in ("euler", "heun"):
        raise ConfigError(f"unknown solver {solver!r}")
    return _run(denoiser, times, z_init, capture, heun=solver == "heun", require_zero=False)
