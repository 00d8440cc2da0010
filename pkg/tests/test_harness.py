import numpy as np
import pytest

from pspclab import ImageDataset, make_synthetic_dataset
from pspclab.diffusion import DiffusionProcess, edm_schedule, sample_prior
from pspclab.errors import ConfigError, MissingData
from pspclab.handles import (ConstantDenoiser, ExternalDenoiser, GaussianDenoiser,
                             OptimalDenoiser, PSPCSquareDenoiser)
from pspclab.harness import (EvalSet, argmin_trace, build_forward_evalset, build_reverse_evalset,
                             compare_samples, mse_sweep, nearest_training_distance,
                             patch_error_sweep)
from pspclab.tensorio import read_csv, write_tensor_file

EDM = DiffusionProcess()


@pytest.fixture
def evalset(small_gray):
    return build_forward_evalset(small_gray, [0.05, 0.5, 5.0], 16, seed=3)


def test_forward_evalset_tiny_t(rng):
    x = rng.uniform(-1, 1, (1, 3, 3, 3))
    es = build_forward_evalset(ImageDataset(x), [1e-12], 1, seed=0)
    assert np.abs(es.batches[0, 0] - x[0]).max() < 1e-9


def test_forward_evalset_deterministic(small_gray, tmp_path):
    a = build_forward_evalset(small_gray, [0.1, 1.0], 8, seed=5)
    b = build_forward_evalset(small_gray, [0.1, 1.0], 8, seed=5)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for name in ("batches.pspc", "indices.pspc", "times.csv", "evalset.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = EvalSet.load(tmp_path / "a")
    assert back.batches.tobytes() == a.batches.tobytes()
    assert back.ts == a.ts and back.seed == 5 and (back.source_indices == a.source_indices).all()


def test_forward_evalset_variance(small_gray):
    t = 0.8
    es = build_forward_evalset(small_gray, [t], 10**4, seed=1)
    noise = es.batches[0] - small_gray.images[es.source_indices[0]]
    var = noise.var(axis=0)
    assert np.abs(var / t**2 - 1).max() < 0.05


def test_evalset_validation():
    with pytest.raises(ConfigError):
        build_forward_evalset(make_synthetic_dataset(2, 2, 2, 1, seed=0), [1.0], 0, seed=0)
    with pytest.raises(ConfigError):
        EvalSet((0.0,), np.zeros((1, 1, 2, 2, 1)))


def test_mse_identity_and_constants(small_gray, evalset):
    h = OptimalDenoiser(small_gray)
    assert mse_sweep(h, h, evalset)["mse"] == [0.0] * 3
    assert mse_sweep(ConstantDenoiser(0.0), ConstantDenoiser(1.0), evalset)["mse"] == [1.0] * 3


def test_mse_symmetry(small_gray, evalset):
    a, b = GaussianDenoiser(small_gray), OptimalDenoiser(small_gray)
    assert mse_sweep(a, b, evalset)["mse"] == mse_sweep(b, a, evalset)["mse"]


def test_mse_square_full_vs_optimal(small_gray, evalset, tmp_path):
    table = mse_sweep(PSPCSquareDenoiser(small_gray, 4), OptimalDenoiser(small_gray), evalset,
                      csv_path=tmp_path / "m.csv")
    assert max(table["mse"]) < 1e-20
    assert read_csv(tmp_path / "m.csv") == table


def test_patch_sweep_limits():
    ds = make_synthetic_dataset(8, 4, 4, 1, kind="binary", seed=6)
    ref = OptimalDenoiser(ds)
    es = build_forward_evalset(ds, [1e-3, 1.0, 1e4], 32, seed=2)
    table = patch_error_sweep(ds, [1, 2, 3, 4], ref, es)
    rows = list(zip(table["t"], table["s"], table["mse"]))
    assert all(e < 1e-12 for t, s, e in rows if t == 1e-3)
    assert all(e == 0.0 for t, s, e in rows if s == 4)
    assert all(e < 1e-6 for t, s, e in rows if t == 1e4)
    # one crop: same number as the whole-image sweep
    full = mse_sweep(ref, ref, es)
    assert [e for t, s, e in rows if s == 4] == full["mse"]


def test_patch_sweep_against_square_full_mse(small_gray, evalset):
    # at s = H the single patch is the whole image, so patch and composite errors coincide
    table = patch_error_sweep(small_gray, [4], GaussianDenoiser(small_gray), evalset)
    ref = mse_sweep(PSPCSquareDenoiser(small_gray, 4), GaussianDenoiser(small_gray), evalset)
    np.testing.assert_allclose(table["mse"], ref["mse"], rtol=1e-12)


def test_patch_sweep_size_check(small_gray, evalset):
    with pytest.raises(ConfigError):
        patch_error_sweep(small_gray, [5], OptimalDenoiser(small_gray), evalset)


def test_argmin_trace_ties():
    table = {"t": [1.0, 1.0, 1.0, 2.0, 2.0], "s": [3, 1, 2, 1, 2], "mse": [0.0, 0.0, 0.1, 0.5, 0.2]}
    assert argmin_trace(table) == [(1.0, 1), (2.0, 2)]


def test_external_denoiser(small_gray, evalset, tmp_path):
    outs = np.stack([OptimalDenoiser(small_gray).evaluate(evalset, k) for k in range(3)])
    path = write_tensor_file(tmp_path / "ext.pspc", outs)
    ext = ExternalDenoiser(path)
    assert max(mse_sweep(ext, OptimalDenoiser(small_gray), evalset)["mse"]) == 0.0
    holed = outs.copy()
    holed[1, 7] = np.nan
    with pytest.raises(MissingData) as info:
        mse_sweep(ExternalDenoiser(holed), OptimalDenoiser(small_gray), evalset)
    assert (info.value.t_index, info.value.sample_index) == (1, 7)
    with pytest.raises(MissingData) as info:
        mse_sweep(ExternalDenoiser(outs[:2]), OptimalDenoiser(small_gray), evalset)
    assert info.value.t_index == 2
    with pytest.raises(MissingData):
        mse_sweep(ExternalDenoiser(outs[:, :4]), OptimalDenoiser(small_gray), evalset)
    with pytest.raises(ConfigError):
        ext.denoise(evalset.batches[0], 0.05)


def test_reverse_evalset(small_gray):
    sched = edm_schedule(EDM, 6)
    z0 = sample_prior(small_gray.shape, 3, EDM.sigma_max, seed=0)
    es = build_reverse_evalset(OptimalDenoiser(small_gray), sched, z0)
    assert es.ts == sched.positive
    assert es.batches.shape == (6, 3) + small_gray.shape
    np.testing.assert_array_equal(es.batches[0], z0)
    assert es.source.startswith("reverse-process:")


def test_nearest_training_distance(small_gray):
    d, idx = nearest_training_distance(small_gray, small_gray.images[[4, 1]])
    assert d.tolist() == [0.0, 0.0] and idx.tolist() == [4, 1]


def test_compare_samples(tmp_path):
    ds = make_synthetic_dataset(6, 4, 4, 1, kind="binary", seed=9)
    z0 = sample_prior(ds.shape, 10, EDM.sigma_max, seed=2)
    handles = {"optimal": OptimalDenoiser(ds), "optimal2": OptimalDenoiser(ds),
               "square-full": PSPCSquareDenoiser(ds, 4)}
    res = compare_samples(handles, edm_schedule(EDM, 18), z0, ds, out_dir=tmp_path)
    pairs = {(a, b): e for a, b, e in zip(*res["pairs"].values())}
    assert pairs[("optimal", "optimal2")] == 0.0
    assert pairs[("optimal", "square-full")] < 1e-18
    near = res["nearest"]
    assert all(d < 0.05 for h, d in zip(near["handle"], near["max_abs_distance"]) if h == "optimal")
    assert (tmp_path / "pairwise_mse.csv").exists() and (tmp_path / "nearest_training.csv").exists()
    assert (tmp_path / "samples_square-full.pspc").exists()
    with pytest.raises(ConfigError):
        compare_samples({}, edm_schedule(EDM, 3), z0)
