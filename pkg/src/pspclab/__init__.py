"""Training-free empirical diffusion denoisers: optimal, patch posterior, PSPC and Gaussian."""

__version__ = "0.1.0"

from .diffusion import DiffusionProcess, TimeSchedule, edm_schedule, log_uniform_grid, sample_forward
from .empirical import fit_gaussian, gaussian_denoise, optimal_denoise, patch_posterior_mean
from .empirical import posterior_moments, posterior_weights
from .geometry import CropSpec, PatchSet, flex_crop, flex_crop_set, gather, scatter_add, square_crop_set
from .pspc import LambdaSchedule, SizeSchedule, pspc_denoise, pspc_flex, pspc_square, tune_schedule
from .tensorio import ImageDataset, RunManifest, emit_csv, load_dataset, make_synthetic_dataset
from .tensorio import read_tensor, write_tensor
