import numpy as np
import pytest

from conftest import pixel_dataset
from pspclab import ImageDataset, make_synthetic_dataset
from pspclab.diffusion import DiffusionProcess, TimeSchedule, edm_schedule, sample_prior
from pspclab.errors import ConfigError, DomainError
from pspclab.handles import CallableDenoiser, ConstantDenoiser, OptimalDenoiser
from pspclab.sampler import integrate, pf_ode_rhs, sample_euler, sample_heun

EDM = DiffusionProcess()


def test_rhs_examples():
    z = np.array([1.0])
    assert pf_ode_rhs(lambda z, t: z, z, 0.5).tolist() == [0.0]
    assert pf_ode_rhs(lambda z, t: np.array([0.4964]), z, 1.0)[0] == pytest.approx(0.5036, abs=1e-15)
    c = ConstantDenoiser(0.3)
    a = np.full((2, 2, 1), 0.7)
    diff = pf_ode_rhs(c, np.zeros((2, 2, 1)) + a, 2.0) - pf_ode_rhs(c, np.zeros((2, 2, 1)), 2.0)
    np.testing.assert_allclose(diff, a / 2.0, rtol=1e-15)
    with pytest.raises(DomainError):
        pf_ode_rhs(c, a, 0.0)


@pytest.mark.parametrize("sampler", [sample_euler, sample_heun])
@pytest.mark.parametrize("n", [2, 5, 18, 40])
def test_single_image_exact(sampler, n, rng):
    x = rng.uniform(-1, 1, (1, 4, 4, 3))
    h = OptimalDenoiser(ImageDataset(x))
    z0 = rng.standard_normal((3, 4, 4, 3)) * 80.0
    traj = sampler(h, edm_schedule(EDM, n), z0)
    assert np.abs(traj.final - x[0]).max() < 1e-9


@pytest.mark.parametrize("sampler", [sample_euler, sample_heun])
def test_constant_denoiser(sampler, rng):
    z0 = rng.standard_normal((2, 3, 3, 1)) * 80
    traj = sampler(ConstantDenoiser(-0.25), edm_schedule(EDM, 11), z0)
    assert np.abs(traj.final + 0.25).max() < 1e-9


def test_two_point_problem_euler():
    ds = pixel_dataset([-1.0, 1.0])
    z0 = sample_prior((1, 1, 1), 100, EDM.sigma_max, seed=3)
    final = sample_euler(OptimalDenoiser(ds), edm_schedule(EDM, 18), z0).final.ravel()
    assert np.minimum(np.abs(final - 1), np.abs(final + 1)).max() < 1e-3


def test_heun_agrees_with_fine_euler():
    ds = pixel_dataset([-1.0, 1.0])
    h = OptimalDenoiser(ds)
    z0 = sample_prior((1, 1, 1), 100, EDM.sigma_max, seed=4)
    heun = sample_heun(h, edm_schedule(EDM, 40), z0).final
    ref = sample_euler(h, edm_schedule(EDM, 10**4), z0).final
    assert np.abs(heun - ref).max() < 1e-3


def test_call_count():
    calls = []
    h = CallableDenoiser(lambda z, t: (calls.append(t), 0.0 * z)[1])
    for n in (2, 7, 18):
        calls.clear()
        traj = sample_heun(h, edm_schedule(EDM, n), np.ones((1, 1, 1)))
        assert traj.n_calls == len(calls) == 2 * (n - 1) + 1
        assert sample_euler(h, edm_schedule(EDM, n), np.ones((1, 1, 1))).n_calls == n


def test_capture_and_determinism(small_gray, rng, tmp_path):
    z0 = sample_prior(small_gray.shape, 2, EDM.sigma_max, seed=1)
    sched = edm_schedule(EDM, 9)
    a = sample_heun(OptimalDenoiser(small_gray), sched, z0, capture=True)
    b = sample_heun(OptimalDenoiser(small_gray), sched, z0, capture=True)
    assert a.times == sched.ts
    assert len(a.zs) == len(sched.ts) and len(a.x_hats) == len(sched.ts) - 1
    assert all(z.shape == z0.shape for z in a.zs)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.zs + a.x_hats, b.zs + b.x_hats))
    np.testing.assert_array_equal(a.final, a.x_hats[-1])
    paths = a.save(tmp_path / "traj")
    assert len(paths) == 3
    assert (tmp_path / "traj_times.csv").read_text().splitlines()[0] == "index,t"


def test_schedule_must_end_at_zero():
    with pytest.raises(ConfigError):
        sample_euler(ConstantDenoiser(0.0), [80.0, 1.0], np.zeros((1, 1, 1)))
    with pytest.raises(ConfigError):
        sample_heun(ConstantDenoiser(0.0), [1.0, 2.0, 0.0], np.zeros((1, 1, 1)))
    with pytest.raises(ConfigError):
        integrate(ConstantDenoiser(0.0), [2.0, 1.0], np.zeros((1, 1, 1)), solver="rk4")


def test_integrate_partial_range():
    # constant denoiser: z(t) = c + (t / t0) (z0 - c), which both solvers reproduce
    z0 = np.full((1, 1, 1), 5.0)
    traj = integrate(ConstantDenoiser(1.0), [4.0, 2.0, 1.0], z0, solver="euler")
    assert traj.final[0, 0, 0] == pytest.approx(1.0 + 0.25 * 4.0, abs=1e-14)


def test_accepts_time_schedule_object():
    sched = TimeSchedule((3.0, 1.0, 0.0))
    assert sample_euler(ConstantDenoiser(0.5), sched, np.zeros((1, 1, 1))).final[0, 0, 0] == 0.5


def test_memorization_small():
    ds = make_synthetic_dataset(8, 4, 4, 1, kind="binary", seed=2)
    z0 = sample_prior(ds.shape, 20, EDM.sigma_max, seed=5)
    final = sample_heun(OptimalDenoiser(ds), edm_schedule(EDM, 18), z0).final
    d = np.abs(final[:, None] - ds.images[None]).max(axis=(2, 3, 4)).min(axis=1)
    assert d.max() < 0.05
