r"""Exact posterior computations under the empirical data distribution.

With training images :math:`x^{(1..N)}` and :math:`z = x + t \epsilon`, the posterior over
the training set is a softmax of :math:`-\|z - x^{(i)}\|^2 / 2t^2` and the optimal
denoiser is the posterior-weighted mean of the images. Patch posteriors do the same
with every image restricted to a crop.

All public functions accept a single ``z`` of image shape (H, W, C) or a batch
(M, H, W, C); outputs follow the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatch

__all__ = [
    "DIRECT_DISTANCE_BELOW",
    "GaussianModel",
    "PosteriorMoments",
    "PosteriorWeights",
    "fit_gaussian",
    "gaussian_denoise",
    "optimal_denoise",
    "patch_posterior_mean",
    "posterior_moments",
    "posterior_weights",
]

# below this t the expanded ||z||^2 - 2<z,x> + ||x||^2 form loses too many digits
DIRECT_DISTANCE_BELOW = 1e-2
_CHUNK_ELEMENTS = 1 << 22


def _check_t(t):
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")


def _as_batch(z, shape):
    z = np.asarray(z, dtype=np.float64)
    if z.shape == tuple(shape):
        return z[None], True
    if z.ndim == len(shape) + 1 and z.shape[1:] == tuple(shape):
        return z, False
    raise ShapeMismatch(f"z has shape {z.shape}, expected {tuple(shape)} or (M, *{tuple(shape)})")


def sq_distances(Z, X, x_norms, t):
    """Squared distances between rows of Z (M, n) and X (N, n)."""
    if t < DIRECT_DISTANCE_BELOW:
        out = np.empty((Z.shape[0], X.shape[0]))
        step = max(1, _CHUNK_ELEMENTS // max(1, X.size))
        for a in range(0, Z.shape[0], step):
            diff = Z[a:a + step, None, :] - X[None, :, :]
            out[a:a + step] = np.einsum("mnk,mnk->mn", diff, diff)
        return out
    z_norms = np.einsum("ij,ij->i", Z, Z)
    d2 = z_norms[:, None] - 2.0 * (Z @ X.T) + x_norms[None, :]
    return np.maximum(d2, 0.0, out=d2)


def _softmax_rows(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    s = w.sum(axis=1, keepdims=True)
    return w / s, logits - np.log(s)


def _top_k(d2, k):
    # stable sort: equal distances keep dataset order, so smaller index wins ties
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    idx.sort(axis=1)
    return idx


def _weights_from_d2(d2, t, top_k):
    """Return (weights (M, K), log_weights, indices (M, K) or None)."""
    n = d2.shape[1]
    if top_k is not None:
        if int(top_k) != top_k or not 1 <= top_k <= n:
            raise ConfigError(f"top_k must lie in [1, {n}], got {top_k}")
        top_k = int(top_k)
    logits = d2 / (-2.0 * t * t)
    if top_k is None or top_k == n:
        w, lw = _softmax_rows(logits)
        return w, lw, None
    idx = _top_k(d2, top_k)
    w, lw = _softmax_rows(np.take_along_axis(logits, idx, axis=1))
    return w, lw, idx


def _weighted_mean(w, idx, X):
    if idx is None:
        return w @ X
    # reduce over retained candidates in ascending dataset index
    return np.einsum("mk,mkn->mn", w, X[idx])


@dataclass(frozen=True)
class PosteriorWeights:
    t: float
    weights: np.ndarray
    log_weights: np.ndarray
    indices: np.ndarray

    def dense(self, n) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.weights
        return out


def posterior_weights(dataset, z, t, top_k=None) -> PosteriorWeights:
    """Posterior over training images for one noisy image ``z``."""
    _check_t(t)
    Z, single = _as_batch(z, dataset.shape)
    if not single:
        raise ShapeMismatch("posterior_weights takes a single z")
    d2 = sq_distances(Z.reshape(1, -1), dataset.flat, dataset.sq_norms, t)
    w, lw, idx = _weights_from_d2(d2, t, top_k)
    indices = np.arange(dataset.N) if idx is None else idx[0]
    return PosteriorWeights(float(t), w[0], lw[0], indices)


def optimal_denoise(dataset, z, t, top_k=None) -> np.ndarray:
    """Empirical posterior mean E[x | z, t], optionally truncated to the top-k neighbours."""
    _check_t(t)
    Z, single = _as_batch(z, dataset.shape)
    Zf = Z.reshape(Z.shape[0], -1)
    d2 = sq_distances(Zf, dataset.flat, dataset.sq_norms, t)
    w, _, idx = _weights_from_d2(d2, t, top_k)
    out = _weighted_mean(w, idx, dataset.flat).reshape(Z.shape)
    return out[0] if single else out


def patch_posterior_mean(dataset, crop, z_patch, t, top_k=None) -> np.ndarray:
    """Posterior mean of the cropped training images given a cropped observation.

    ``z_patch`` is the flat gathered patch (length ``len(crop) * C``) or a batch of them.
    """
    _check_t(t)
    if len(crop) == 0:
        raise ConfigError("empty crop")
    Xc, norms = dataset.cropped(crop)
    Zc = np.asarray(z_patch, dtype=np.float64)
    single = Zc.ndim == 1
    if single:
        Zc = Zc[None]
    if Zc.ndim != 2 or Zc.shape[1] != Xc.shape[1]:
        raise ShapeMismatch(f"patch of shape {np.shape(z_patch)} does not match crop "
                            f"length {Xc.shape[1]}")
    d2 = sq_distances(Zc, Xc, norms, t)
    w, _, idx = _weights_from_d2(d2, t, top_k)
    out = _weighted_mean(w, idx, Xc)
    return out[0] if single else out


class PosteriorMoments:
    """Posterior mean and the denoiser Jacobian for one noisy image.

    The Jacobian of the optimal denoiser is the posterior covariance divided by t^2,
    ``J = (E[x x^T] - x_hat x_hat^T) / t^2``; columns are formed on demand.
    """

    def __init__(self, dataset, z, t):
        _check_t(t)
        Z, single = _as_batch(z, dataset.shape)
        if not single:
            raise ShapeMismatch("posterior_moments takes a single z")
        self.t = float(t)
        self.shape = dataset.shape
        d2 = sq_distances(Z.reshape(1, -1), dataset.flat, dataset.sq_norms, t)
        w, _, _ = _weights_from_d2(d2, t, None)
        self.weights = w[0]
        self.mean_flat = self.weights @ dataset.flat
        # sqrt(w)-scaled centred data: J = A^T A / t^2, symmetric PSD by construction
        self._A = np.sqrt(self.weights)[:, None] * (dataset.flat - self.mean_flat)

    @property
    def mean(self) -> np.ndarray:
        return self.mean_flat.reshape(self.shape)

    def jacobian_columns(self, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=np.intp)
        return (self._A.T @ self._A[:, cols]) / (self.t * self.t)

    def jacobian_column(self, j) -> np.ndarray:
        return self.jacobian_columns([j])[:, 0]

    def jacobian(self) -> np.ndarray:
        return (self._A.T @ self._A) / (self.t * self.t)


def posterior_moments(dataset, z, t) -> PosteriorMoments:
    return PosteriorMoments(dataset, z, t)


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray
    shape: tuple

    def shrinkage(self, t) -> np.ndarray:
        return self.eigenvalues / (self.eigenvalues + t * t)


def fit_gaussian(dataset) -> GaussianModel:
    """Mean and eigendecomposed covariance (divided by N) of the flattened dataset."""
    X = dataset.flat
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = (Xc.T @ Xc) / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    return GaussianModel(mu, evals, evecs, tuple(dataset.shape))


def gaussian_denoise(model: GaussianModel, z, t) -> np.ndarray:
    """Posterior mean under N(mu, Sigma): mu + Sigma (Sigma + t^2 I)^-1 (z - mu)."""
    _check_t(t)
    Z, single = _as_batch(z, model.shape)
    Zf = Z.reshape(Z.shape[0], -1) - model.mean
    coeffs = (Zf @ model.basis) * model.shrinkage(t)
    out = (coeffs @ model.basis.T + model.mean).reshape(Z.shape)
    return out[0] if single else out
