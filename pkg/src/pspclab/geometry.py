"""Crops of an image grid and sets of crops.

A crop is an ordered set of pixel positions. Gathering a crop from an (H, W, C) image
returns a vector of length ``len(crop) * C`` (pixel-major, channels inner); this is
multiplication by a 0/1 cropping matrix. Scatter-add is multiplication by its transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateHeatmap, RangeError, ShapeMismatch, UncoveredPixel
from .tensorio import read_tensor_file, write_tensor_file

__all__ = [
    "CropSpec",
    "PatchSet",
    "flex_crop",
    "flex_crop_set",
    "full_crop",
    "gather",
    "scatter_add",
    "square_crop",
    "square_crop_set",
]


@dataclass(frozen=True, eq=False)
class CropSpec:
    rows: np.ndarray
    cols: np.ndarray
    height: int
    width: int
    anchor: tuple = (0, 0)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp).ravel()
        cols = np.asarray(self.cols, dtype=np.intp).ravel()
        if rows.shape != cols.shape:
            raise ShapeMismatch("rows and cols differ in length")
        if rows.size == 0:
            raise ConfigError("empty crop")
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= self.height or cols.max() >= self.width:
            raise ShapeMismatch("crop pixel outside the image")
        flat = rows * self.width + cols
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        if np.any(flat[1:] == flat[:-1]):
            raise ConfigError("crop pixels must be unique")
        rows, cols = rows[order], cols[order]
        rows.flags.writeable = False
        cols.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))

    @property
    def flat_index(self) -> np.ndarray:
        return self.rows * self.width + self.cols

    @property
    def key(self):
        return (self.height, self.width, self.flat_index.tobytes())

    def __len__(self):
        return self.rows.size

    def __eq__(self, other):
        return isinstance(other, CropSpec) and self.key == other.key and self.anchor == other.anchor

    def __hash__(self):
        return hash((self.key, self.anchor))

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def matrix(self, channels: int = 1) -> np.ndarray:
        """Dense 0/1 cropping matrix of shape (len * C, H * W * C). For testing."""
        n = len(self) * channels
        C = np.zeros((n, self.height * self.width * channels))
        for k, p in enumerate(self.flat_index):
            for c in range(channels):
                C[k * channels + c, p * channels + c] = 1.0
        return C


def square_crop(height, width, top, left, s) -> CropSpec:
    r, c = np.meshgrid(np.arange(top, top + s), np.arange(left, left + s), indexing="ij")
    return CropSpec(r, c, height, width, anchor=(top, left))


def full_crop(height, width) -> CropSpec:
    r, c = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return CropSpec(r, c, height, width)


@dataclass(frozen=True, eq=False)
class PatchSet:
    crops: tuple
    height: int
    width: int
    coverage: np.ndarray = field(init=False)
    label: str = ""

    def __post_init__(self):
        crops = tuple(self.crops)
        if not crops:
            raise ConfigError("patch set has no crops")
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for crop in crops:
            if (crop.height, crop.width) != (self.height, self.width):
                raise ShapeMismatch("crop belongs to a different image size")
            cov[crop.rows, crop.cols] += 1
        cov.flags.writeable = False
        object.__setattr__(self, "crops", crops)
        object.__setattr__(self, "coverage", cov)

    def __len__(self):
        return len(self.crops)

    def __iter__(self):
        return iter(self.crops)

    def check_covered(self):
        if np.any(self.coverage == 0):
            r, c = np.argwhere(self.coverage == 0)[0]
            raise UncoveredPixel(f"pixel ({r}, {c}) is not covered by any crop")

    def save(self, path):
        """Write the crops as a (L, H, W) 0/1 tensor plus a text sidecar of anchors."""
        masks = np.stack([c.mask() for c in self.crops]).astype(np.float64)
        write_tensor_file(path, masks, dtype="f32")
        lines = [f"label={self.label}"] + [f"{k}={c.anchor[0]},{c.anchor[1]}"
                                           for k, c in enumerate(self.crops)]
        with open(str(path) + ".txt", "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PatchSet":
        masks = read_tensor_file(path)
        if masks.ndim != 3:
            raise ShapeMismatch("patch set tensor must be (L, H, W)")
        label, anchors = "", {}
        try:
            with open(str(path) + ".txt") as fh:
                for line in fh.read().splitlines():
                    key, _, val = line.partition("=")
                    if key == "label":
                        label = val
                    elif key:
                        a, b = val.split(",")
                        anchors[int(key)] = (int(a), int(b))
        except FileNotFoundError:
            pass
        _, h, w = masks.shape
        crops = []
        for k, m in enumerate(masks):
            r, c = np.nonzero(m)
            crops.append(CropSpec(r, c, h, w, anchor=anchors.get(k, (0, 0))))
        return cls(tuple(crops), h, w, label=label)


def square_crop_set(height: int, width: int, s: int) -> PatchSet:
    """All s x s crops that fit inside the image without padding, row-major by corner."""
    if int(s) != s or not 1 <= s <= min(height, width):
        raise ConfigError(f"patch size {s} outside [1, {min(height, width)}]")
    s = int(s)
    crops = [square_crop(height, width, r, c, s)
             for r in range(height - s + 1) for c in range(width - s + 1)]
    return PatchSet(tuple(crops), height, width, label=f"square-{s}")


def _greedy_order(values: np.ndarray) -> np.ndarray:
    # descending value, ties row-major
    return np.argsort(-values, kind="stable")


def flex_crop(heatmap, anchor, lam: float) -> CropSpec:
    """Smallest prefix of pixels (descending heatmap value) holding ``lam`` of the mass."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ShapeMismatch(f"heatmap must be 2-D, got shape {hm.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if not np.all(np.isfinite(hm)) or hm.min() < 0:
        raise RangeError("heatmap entries must be finite and nonnegative")
    h, w = hm.shape
    values = hm.ravel()
    order = _greedy_order(values)
    sorted_vals = values[order]
    if not sorted_vals[0] > 0:
        raise DegenerateHeatmap("heatmap has no positive entry")
    if lam == 1.0:
        k = int(np.count_nonzero(sorted_vals > 0))
    else:
        cum = np.cumsum(sorted_vals)
        k = int(np.argmax(cum >= lam * cum[-1])) + 1
    chosen = order[:k]
    return CropSpec(chosen // w, chosen % w, h, w, anchor=anchor)


def flex_crop_set(maps, lam: float) -> PatchSet:
    """One greedy crop per output pixel from an (H, W, H, W) stack of heatmaps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4 or maps.shape[:2] != maps.shape[2:]:
        raise ShapeMismatch(f"expected (H, W, H, W) heatmaps, got shape {maps.shape}")
    h, w = maps.shape[:2]
    crops = tuple(flex_crop(maps[r, c], (r, c), lam) for r in range(h) for c in range(w))
    ps = PatchSet(crops, h, w, label=f"flex-{lam!r}")
    ps.check_covered()
    return ps


def gather(crop: CropSpec, image) -> np.ndarray:
    """Crop an (H, W, C) image, or a (..., H, W, C) batch, into flat patch vectors."""
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-3:-1] != (crop.height, crop.width):
        raise ShapeMismatch(f"image shape {image.shape} does not match crop grid "
                            f"{(crop.height, crop.width)}")
    patch = image[..., crop.rows, crop.cols, :]
    # C order, so downstream reductions see the same memory layout as whole images
    return np.ascontiguousarray(patch.reshape(image.shape[:-3] + (-1,)))


def scatter_add(crop: CropSpec, patch, accumulator) -> np.ndarray:
    """Add flat patch vectors back into ``accumulator`` in place and return it."""
    acc = accumulator
    if acc.ndim < 3 or acc.shape[-3:-1] != (crop.height, crop.width):
        raise ShapeMismatch(f"accumulator shape {acc.shape} does not match crop grid")
    channels = acc.shape[-1]
    patch = np.asarray(patch)
    if patch.shape[-1] != len(crop) * channels:
        raise ShapeMismatch(f"patch length {patch.shape[-1]} != {len(crop)} x {channels}")
    # crop pixels are unique, so fancy-index += does not drop contributions
    acc[..., crop.rows, crop.cols, :] += patch.reshape(patch.shape[:-1] + (len(crop), channels))
    return acc
