"""Tensor files, image datasets, run manifests and CSV export.

Binary tensor layout (all fields little-endian)::

    magic    4 bytes  b"PSPC"
    version  uint32   1
    dtype    uint32   0 = float32, 1 = float64
    ndim     uint32   >= 1
    dims     ndim x uint64, each >= 1
    payload  prod(dims) values, row-major
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDataset, FormatError, RangeError, ShapeMismatch

__all__ = [
    "MAGIC",
    "VERSION",
    "ImageDataset",
    "RunManifest",
    "emit_csv",
    "load_dataset",
    "make_synthetic_dataset",
    "read_csv",
    "read_tensor",
    "read_tensor_file",
    "write_tensor",
    "write_tensor_file",
]

MAGIC = b"PSPC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_HEADER = struct.Struct("<4sIII")

RASTER_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".pnm"}


def write_tensor(values, dims=None, dtype="f64") -> bytes:
    """Serialize ``values`` (reshaped to ``dims`` if given) into tensor-file bytes."""
    arr = np.asarray(values)
    if dims is None:
        dims = arr.shape
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        raise FormatError("ndim must be >= 1")
    if any(d < 1 for d in dims):
        raise FormatError(f"all dims must be >= 1, got {dims}")
    if arr.size != math.prod(dims):
        raise ShapeMismatch(f"{arr.size} values do not fill dims {dims}")
    np_dtype = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}.get(dtype)
    if np_dtype is None:
        try:
            np_dtype = np.dtype(dtype).newbyteorder("<")
        except TypeError as exc:
            raise FormatError(f"unsupported dtype {dtype!r}") from exc
    if np_dtype.kind != "f" or np_dtype.itemsize not in (4, 8):
        raise FormatError(f"unsupported dtype {dtype!r}")
    code = 0 if np_dtype.itemsize == 4 else 1
    payload = np.ascontiguousarray(arr.reshape(dims), dtype=np_dtype).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, code, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return header + payload


def read_tensor(data: bytes) -> tuple[np.ndarray, tuple[int, ...]]:
    """Parse tensor-file bytes. Returns ``(values, dims)``; values keep the stored dtype."""
    buf = memoryview(data)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if ndim < 1:
        raise FormatError("ndim must be >= 1")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    if any(d < 1 for d in dims):
        raise FormatError(f"all dims must be >= 1, got {dims}")
    dt = _DTYPES[code]
    nbytes = math.prod(dims) * dt.itemsize
    if len(buf) - off != nbytes:
        raise FormatError(f"payload has {len(buf) - off} bytes, expected {nbytes}")
    values = np.frombuffer(buf[off:], dtype=dt).reshape(dims)
    return values.astype(dt.newbyteorder("="), copy=True), tuple(int(d) for d in dims)


def write_tensor_file(path, values, dtype="f64"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_tensor(values, None, dtype))
    return path


def read_tensor_file(path) -> np.ndarray:
    values, _ = read_tensor(Path(path).read_bytes())
    return values


# ---------------------------------------------------------------------------
# datasets


class ImageDataset:
    """N images of shape (H, W, C) with values in [-1, 1], stored as float64.

    The pixel array is read-only. Per-crop gathers of the dataset are memoized on the
    instance so repeated patch posteriors over the same crop skip the gather.
    """

    def __init__(self, images, name="dataset", sources=()):
        images = np.array(images, dtype=np.float64)
        if images.ndim != 4:
            raise ShapeMismatch(f"expected (N, H, W, C) images, got shape {images.shape}")
        if images.shape[0] < 1:
            raise EmptyDataset("dataset has no images")
        if images.shape[3] not in (1, 3):
            raise ShapeMismatch(f"channel count must be 1 or 3, got {images.shape[3]}")
        if not np.all(np.isfinite(images)):
            raise RangeError("dataset contains non-finite values")
        if images.min() < -1.0 or images.max() > 1.0:
            raise RangeError(f"pixel values outside [-1, 1]: [{images.min()}, {images.max()}]")
        images.flags.writeable = False
        self.images = images
        self.name = name
        self.sources = tuple(sources)
        self._flat = images.reshape(images.shape[0], -1)
        self._norms = np.einsum("ij,ij->i", self._flat, self._flat)
        self._crop_cache: dict = {}
        self._lock = threading.Lock()

    @property
    def N(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    @property
    def d(self) -> int:
        return self._flat.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    @property
    def sq_norms(self) -> np.ndarray:
        return self._norms

    def mean(self) -> np.ndarray:
        return self.images.mean(axis=0)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        return h.hexdigest()

    def cropped(self, crop):
        """Return ``(X_C, ||X_C||^2)`` for a crop, building it on first use."""
        key = crop.key
        entry = self._crop_cache.get(key)
        if entry is None:
            xc = np.ascontiguousarray(self.images[:, crop.rows, crop.cols, :].reshape(self.N, -1))
            xc.flags.writeable = False
            built = (xc, np.einsum("ij,ij->i", xc, xc))
            with self._lock:
                entry = self._crop_cache.setdefault(key, built)
        return entry

    def clear_cache(self):
        with self._lock:
            self._crop_cache.clear()

    def subset(self, indices) -> "ImageDataset":
        idx = list(indices)
        return ImageDataset(self.images[idx], name=f"{self.name}[subset]",
                            sources=[self.sources[i] for i in idx] if self.sources else ())

    def __repr__(self):
        n, h, w, c = self.images.shape
        return f"ImageDataset(name={self.name!r}, N={n}, H={h}, W={w}, C={c})"


def _u8_to_unit(values):
    return 2.0 * (np.asarray(values, dtype=np.float64) / 255.0) - 1.0


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_dataset(path, normalization="u8-to-unit", name=None) -> ImageDataset:
    """Load a directory of lossless 8-bit rasters or a rank-4 tensor file.

    Raster images are ordered lexicographically by filename. ``normalization`` is
    ``"u8-to-unit"`` (v -> 2 v / 255 - 1) or ``"none"``.
    """
    from PIL import Image

    if normalization not in ("u8-to-unit", "none"):
        raise ConfigError(f"unknown normalization {normalization!r}")
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file())
        if not files:
            raise EmptyDataset(f"no files in {path}")
        arrays = []
        for p in files:
            if p.suffix.lower() not in RASTER_SUFFIXES:
                raise FormatError(f"{p.name}: not a lossless raster image")
            with Image.open(p) as im:
                if im.mode == "L":
                    arr = np.asarray(im, dtype=np.uint8)[:, :, None]
                elif im.mode == "RGB":
                    arr = np.asarray(im, dtype=np.uint8)
                else:
                    raise FormatError(f"{p.name}: unsupported image mode {im.mode}")
            if arrays and arr.shape != arrays[0].shape:
                raise ShapeMismatch(f"{p.name} has shape {arr.shape}, expected {arrays[0].shape}")
            arrays.append(arr)
        raw = np.stack(arrays)
        images = _u8_to_unit(raw) if normalization == "u8-to-unit" else raw.astype(np.float64)
        sources = [(str(p), _file_sha256(p)) for p in files]
    elif path.is_file():
        raw = read_tensor_file(path)
        if raw.ndim != 4:
            raise ShapeMismatch(f"dataset tensor must have ndim=4, got {raw.ndim}")
        images = _u8_to_unit(raw) if normalization == "u8-to-unit" else raw.astype(np.float64)
        sources = [(str(path), _file_sha256(path))]
    else:
        raise EmptyDataset(f"{path} does not exist")
    if images.min() < -1.0 or images.max() > 1.0:
        raise RangeError(f"values outside [-1, 1] after normalization: "
                         f"[{images.min()}, {images.max()}]")
    return ImageDataset(images, name=name or path.stem, sources=sources)


def make_synthetic_dataset(n, height, width, channels=1, kind="smooth", seed=0,
                           smoothness=1.5, name=None) -> ImageDataset:
    """Generate a desk-scale stand-in for a natural image dataset.

    ``kind="smooth"`` gives spatially correlated images quantized to 8-bit levels
    (Gaussian-filtered noise, rescaled per image to span [-1, 1]). ``kind="binary"``
    gives distinct random {-1, +1} patterns, which are pairwise well separated.
    """
    rng = np.random.default_rng(seed)
    if kind == "binary":
        if n > 2 ** (height * width * channels):
            raise ConfigError("not enough distinct binary images")
        seen, out = set(), []
        while len(out) < n:
            img = rng.integers(0, 2, size=(height, width, channels))
            key = img.tobytes()
            if key not in seen:
                seen.add(key)
                out.append(2.0 * img - 1.0)
        images = np.stack(out)
    elif kind == "smooth":
        from scipy.ndimage import gaussian_filter

        noise = rng.standard_normal((n, height, width, channels))
        fields = gaussian_filter(noise, sigma=(0, smoothness, smoothness, 0), mode="wrap")
        lo = fields.min(axis=(1, 2, 3), keepdims=True)
        hi = fields.max(axis=(1, 2, 3), keepdims=True)
        u8 = np.rint(255.0 * (fields - lo) / np.maximum(hi - lo, 1e-12))
        images = _u8_to_unit(u8)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    return ImageDataset(images, name=name or f"synthetic-{kind}-{n}x{height}x{width}x{channels}")


# ---------------------------------------------------------------------------
# manifests and CSV


@dataclass
class RunManifest:
    """Everything needed to reproduce one command's outputs, as flat key=value text."""

    seed: int = 0
    dataset_hash: str = ""
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    schedule: str = ""
    tool_version: str = ""
    extra: dict = field(default_factory=dict)

    _fixed = ("seed", "dataset_hash", "sigma_min", "sigma_max", "rho", "schedule", "tool_version")

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if not self.tool_version:
            from . import __version__
            self.tool_version = __version__

    def to_text(self) -> str:
        lines = []
        for key in self._fixed:
            val = getattr(self, key)
            lines.append(f"{key}={val!r}" if isinstance(val, float) else f"{key}={val}")
        for key in sorted(self.extra):
            if "=" in key or "\n" in key or "\n" in str(self.extra[key]):
                raise ConfigError(f"manifest entry {key!r} is not representable")
            lines.append(f"extra.{key}={self.extra[key]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        fixed, extra = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise FormatError(f"bad manifest line {line!r}")
            if key.startswith("extra."):
                extra[key[len("extra."):]] = val
            elif key in cls._fixed:
                fixed[key] = val
            else:
                raise FormatError(f"unknown manifest key {key!r}")
        kwargs = {}
        for key, val in fixed.items():
            if key == "seed":
                kwargs[key] = int(val)
            elif key in ("sigma_min", "sigma_max", "rho"):
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        return cls(extra=extra, **kwargs)

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def emit_csv(table: dict, path=None) -> str:
    """Write named columns as CSV (17 significant digits, LF endings).

    Returns the CSV text; writes it to ``path`` when given.
    """
    cols = list(table)
    lengths = {len(table[c]) for c in cols}
    if len(lengths) > 1:
        raise ShapeMismatch(f"ragged columns: { {c: len(table[c]) for c in cols} }")
    nrows = lengths.pop() if lengths else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in range(nrows):
        writer.writerow([_fmt(table[c][r]) for c in cols])
    text = buf.getvalue()
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path) -> dict:
    """Read a CSV written by :func:`emit_csv`; numeric cells become floats."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {h: [] for h in header}
    for row in body:
        for h, cell in zip(header, row):
            try:
                out[h].append(float(cell))
            except ValueError:
                out[h].append(cell)
    return out


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
