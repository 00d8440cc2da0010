import numpy as np
import pytest

from oracles import dense_pspc
from pspclab import ImageDataset, make_synthetic_dataset
from pspclab.diffusion import DiffusionProcess, edm_schedule, sample_forward
from pspclab.empirical import optimal_denoise
from pspclab.errors import ConfigError, ShapeMismatch, UncoveredPixel
from pspclab.geometry import PatchSet, CropSpec, flex_crop_set, full_crop, square_crop_set
from pspclab.handles import OptimalDenoiser
from pspclab.pspc import (LambdaSchedule, SizeSchedule, pspc_denoise, pspc_flex, pspc_square,
                          tune_schedule)
from pspclab.sensitivity import synthetic_blob_maps


def _delta_maps(h, w):
    maps = np.zeros((h, w, h, w))
    for r in range(h):
        for c in range(w):
            maps[r, c, r, c] = 1.0
    return maps


def test_full_crop_set_equals_optimal(small_rgb, rng):
    z = rng.standard_normal(small_rgb.shape)
    ps = PatchSet([full_crop(5, 5)], 5, 5)
    np.testing.assert_allclose(pspc_denoise(small_rgb, z, 0.6, ps), optimal_denoise(small_rgb, z, 0.6),
                               rtol=0, atol=1e-12)


def test_identical_images_give_that_image(rng):
    x = rng.uniform(-1, 1, (4, 4, 1))
    ds = ImageDataset(np.stack([x] * 3))
    z = rng.standard_normal(x.shape) * 5
    for ps in (square_crop_set(4, 4, 2), flex_crop_set(synthetic_blob_maps(4, 4, 1.0), 0.4)):
        for t in (0.01, 1.0, 30.0):
            # exact up to the rounding of the weighted and coverage averages
            np.testing.assert_allclose(pspc_denoise(ds, z, t, ps), x, rtol=4e-16, atol=0)


def test_dense_oracle_two_images():
    ds = make_synthetic_dataset(2, 4, 4, 1, kind="smooth", seed=8, smoothness=1.0)
    z, _ = sample_forward(ds, 1.0, 1, seed=4)
    ps = square_crop_set(4, 4, 3)
    assert len(ps) == 4
    np.testing.assert_allclose(pspc_denoise(ds, z[0], 1.0, ps), dense_pspc(ds.images, ps, z[0], 1.0),
                               rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind", ["square", "flex"])
@pytest.mark.parametrize("t", [0.2, 1.0, 4.0])
def test_dense_oracle_equivalence(kind, t):
    ds = make_synthetic_dataset(8, 6, 6, 3, kind="smooth", seed=12, smoothness=1.0)
    z, _ = sample_forward(ds, t, 2, seed=6)
    if kind == "square":
        ps = square_crop_set(6, 6, 3)
    else:
        ps = flex_crop_set(synthetic_blob_maps(6, 6, 1.2), 0.6)
    got = pspc_denoise(ds, z, t, ps)
    for k in range(2):
        np.testing.assert_allclose(got[k], dense_pspc(ds.images, ps, z[k], t), rtol=0, atol=1e-10)


def test_square_full_size_equals_optimal(small_gray, rng):
    z = rng.standard_normal((3,) + small_gray.shape)
    sched = SizeSchedule.constant(4)
    for t in edm_schedule(DiffusionProcess(), 18).positive:
        np.testing.assert_allclose(pspc_square(small_gray, z, t, sched), optimal_denoise(small_gray, z, t),
                                   rtol=0, atol=1e-12)


def test_square_size_one_locality(small_gray, rng):
    z = rng.standard_normal(small_gray.shape)
    a = pspc_square(small_gray, z, 0.5, 1)
    z2 = z.copy()
    z2[2, 1, 0] += 1.5
    b = pspc_square(small_gray, z2, 0.5, 1)
    changed = a != b
    assert changed[2, 1, 0] and changed.sum() == 1


def test_knot_lookup():
    sched = SizeSchedule(((10.0, 9), (1.0, 3)))
    assert sched(2.0) == 3
    assert sched(5.0) == 9
    assert sched(1e-4) == 3 and sched(1e4) == 9


def test_schedule_validation_and_csv(tmp_path):
    with pytest.raises(ConfigError):
        SizeSchedule(((1.0, 0),))
    with pytest.raises(ConfigError):
        LambdaSchedule(((1.0, 1.5),))
    with pytest.raises(ConfigError):
        SizeSchedule(())
    s = SizeSchedule(((0.5, 2), (3.0, 5)))
    s.to_csv(tmp_path / "s.csv")
    assert SizeSchedule.from_csv(tmp_path / "s.csv") == s
    lam = LambdaSchedule(((0.1, 0.25), (1.0, 0.9)))
    lam.to_csv(tmp_path / "l.csv")
    assert LambdaSchedule.from_csv(tmp_path / "l.csv") == lam


def test_square_size_too_large(small_gray):
    with pytest.raises(ConfigError):
        pspc_square(small_gray, np.zeros(small_gray.shape), 1.0, 5)


def test_flex_delta_equals_square_one(small_rgb, rng):
    z = rng.standard_normal((4,) + small_rgb.shape)
    a = pspc_flex(small_rgb, z, 0.3, _delta_maps(5, 5), 0.8)
    b = pspc_square(small_rgb, z, 0.3, 1)
    assert a.tobytes() == b.tobytes()


def test_flex_uniform_full_equals_optimal(small_gray, rng):
    z = rng.standard_normal(small_gray.shape)
    np.testing.assert_allclose(pspc_flex(small_gray, z, 0.7, np.ones((4, 4, 4, 4)), 1.0),
                               optimal_denoise(small_gray, z, 0.7), rtol=0, atol=1e-12)


def test_flex_matches_two_step_pipeline(rng):
    ds = make_synthetic_dataset(6, 8, 8, 1, kind="smooth", seed=3)
    maps = synthetic_blob_maps(8, 8, 1.5)
    z = rng.standard_normal(ds.shape)
    a = pspc_flex(ds, z, 0.8, maps, LambdaSchedule.constant(0.5))
    b = pspc_denoise(ds, z, 0.8, flex_crop_set(maps, 0.5))
    assert a.tobytes() == b.tobytes()


def test_permutation_invariance(small_rgb, rng):
    perm = rng.permutation(small_rgb.N)
    shuffled = ImageDataset(small_rgb.images[perm])
    z = rng.standard_normal((3,) + small_rgb.shape)
    for t in (0.1, 1.0, 10.0):
        assert np.abs(pspc_square(small_rgb, z, t, 2) - pspc_square(shuffled, z, t, 2)).max() < 1e-10


def test_composite_range(small_gray, rng):
    z = rng.standard_normal((20,) + small_gray.shape) * 3
    lo = small_gray.images.min(axis=0)
    hi = small_gray.images.max(axis=0)
    for s in (1, 2, 3):
        out = pspc_square(small_gray, z, 0.5, s)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_uncovered_and_shape_errors(small_gray):
    ps = PatchSet([CropSpec([0], [0], 4, 4)], 4, 4)
    with pytest.raises(UncoveredPixel):
        pspc_denoise(small_gray, np.zeros(small_gray.shape), 1.0, ps)
    with pytest.raises(ShapeMismatch):
        pspc_denoise(small_gray, np.zeros(small_gray.shape), 1.0, square_crop_set(5, 5, 2))


def test_tune_identical_dataset_picks_smallest(rng):
    x = rng.uniform(-1, 1, (4, 4, 1))
    ds = ImageDataset(np.stack([x] * 4))
    sched, table = tune_schedule(ds, OptimalDenoiser(ds), [0.01, 1.0, 50.0], [3, 1, 2, 4],
                                 samples_per_t=8)
    assert sched.values == [1, 1, 1]
    assert max(table["mse"]) == 0.0
    assert len(table["mse"]) == 12


def test_tune_small_t_picks_one():
    ds = make_synthetic_dataset(8, 4, 4, 1, kind="binary", seed=1)
    sched, _ = tune_schedule(ds, OptimalDenoiser(ds), [1e-3], [1, 2, 3, 4], samples_per_t=16)
    assert sched(1e-3) == 1


@pytest.mark.parametrize("objective", ["patch", "composite"])
def test_tune_selects_larger_patches_at_large_t(objective):
    ds = make_synthetic_dataset(16, 6, 6, 1, kind="smooth", seed=4)
    sched, table = tune_schedule(ds, OptimalDenoiser(ds), [0.05, 0.5, 5.0], [1, 3, 5],
                                 samples_per_t=32, seed=2, objective=objective)
    vals = [sched(t) for t in (0.05, 0.5, 5.0)]
    assert vals == sorted(vals)
    assert vals[-1] > 1


def test_tune_lambda_and_csv(tmp_path):
    ds = make_synthetic_dataset(6, 5, 5, 1, kind="smooth", seed=4)
    maps = synthetic_blob_maps(5, 5, 1.0)
    sched, _ = tune_schedule(ds, OptimalDenoiser(ds), [0.1, 3.0], [0.2, 0.6, 1.0], samples_per_t=8,
                             kind="lambda", maps=lambda t: maps, csv_path=tmp_path / "e.csv")
    assert isinstance(sched, LambdaSchedule)
    assert (tmp_path / "e.csv").read_text().startswith("t,candidate,mse\n")


def test_tune_errors(small_gray):
    ref = OptimalDenoiser(small_gray)
    with pytest.raises(ConfigError):
        tune_schedule(small_gray, ref, [], [1])
    with pytest.raises(ConfigError):
        tune_schedule(small_gray, ref, [1.0], [])
    with pytest.raises(ConfigError):
        tune_schedule(small_gray, ref, [1.0], [0.5], kind="lambda")
