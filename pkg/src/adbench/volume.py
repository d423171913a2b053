"""Volume I/O, brain masking, resampling, normalization and slice extraction.

Voxels are stored as a numpy array indexed ``[z, y, x]`` so that memory order
is X-fastest, matching the raw on-disk payload.
"""
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

log = logging.getLogger(__name__)

UNIFORM_GRID = (128, 128, 77)
ADNI_GEOMETRY = ((160, 160, 96), (1.5, 1.5, 1.5))
FLENI_GEOMETRY = ((128, 128, 47), (2.0, 2.0, 3.27))
NORMALIZATION_MODES = ("zscore_per_image", "zscore_global", "minmax")


class VolumeFormatError(ValueError):
    pass


class CorruptVolumeError(VolumeFormatError):
    pass


class EmptyMaskError(ValueError):
    pass


class DegenerateImageWarning(UserWarning):
    pass


@dataclass
class Volume:
    dims: tuple
    spacing: tuple
    voxels: np.ndarray  # shape (Z, Y, X)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise VolumeFormatError(f"dims must be three extents >= 1, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")
        X, Y, Z = self.dims
        if self.voxels.shape != (Z, Y, X):
            raise VolumeFormatError(f"voxel array shape {self.voxels.shape} does not match dims {self.dims}")

    @classmethod
    def from_array(cls, voxels, spacing=(1.0, 1.0, 1.0)):
        Z, Y, X = voxels.shape
        return cls((X, Y, Z), spacing, np.ascontiguousarray(voxels, dtype=np.float32))

    def with_voxels(self, voxels):
        return Volume(self.dims, self.spacing, voxels)


# -- I/O -----------------------------------------------------------------------
def _base(path):
    path = str(path)
    for suffix in (".vol.json", ".vol.raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def volume_paths(path):
    base = _base(path)
    return base + ".vol.json", base + ".vol.raw"


def save_volume(v, path, extra=None):
    """Write ``<base>.vol.json`` + ``<base>.vol.raw``; returns the sidecar path."""
    meta_path, raw_path = volume_paths(path)
    meta = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": "float32", "byte_order": "little"}
    if extra:
        meta.update(extra)
    with open(raw_path, "wb") as fh:
        fh.write(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta_path


def read_sidecar(path):
    meta_path, _ = volume_paths(path)
    if not os.path.exists(meta_path):
        raise VolumeFormatError(f"missing sidecar {meta_path}")
    with open(meta_path) as fh:
        return json.load(fh)


def load_volume(path):
    meta = read_sidecar(path)
    _, raw_path = volume_paths(path)
    try:
        dims = tuple(meta["dims"])
        spacing = tuple(meta["spacing"])
    except KeyError as exc:
        raise VolumeFormatError(f"sidecar for {path} lacks field {exc}") from None
    if meta.get("dtype", "float32") != "float32" or meta.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"unsupported payload encoding in {path}: {meta.get('dtype')}/{meta.get('byte_order')}")
    payload = np.fromfile(raw_path, dtype="<f4")
    X, Y, Z = dims
    if payload.size != X * Y * Z:
        raise CorruptVolumeError(f"{raw_path}: payload holds {payload.size} values, dims {dims} need {X * Y * Z}")
    return Volume(dims, spacing, payload.reshape(Z, Y, X).astype(np.float32))


# -- masking ---------------------------------------------------------------------
def brain_mask(v, tau=0.1):
    """Foreground mask by thresholding between robust background and robust max.

    The threshold is ``lo + tau * (hi - lo)`` with ``lo``/``hi`` the 1st/99th
    percentiles of a 3x3x3 box-smoothed copy; a voxel is foreground when both
    its raw and smoothed values exceed it. Invariant to x -> a*x + b, a > 0.
    """
    x = v.voxels
    smooth = uniform_filter(x.astype(np.float64), size=3, mode="nearest")
    lo, hi = np.percentile(smooth, [1.0, 99.0])
    if not hi > lo:
        raise EmptyMaskError("empty mask")
    thr = lo + tau * (hi - lo)
    mask = (x > thr) & (smooth > thr)
    if not mask.any():
        raise EmptyMaskError("empty mask")
    return mask


# -- resampling --------------------------------------------------------------------
def nn_index_map(n_src, n_tgt):
    """Target index t reads source floor((t + 0.5) * n_src / n_tgt), clamped."""
    t = np.arange(n_tgt)
    idx = np.floor((t + 0.5) * n_src / n_tgt).astype(np.int64)
    return np.clip(idx, 0, n_src - 1)


def resample_nn(v, target_dims):
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise VolumeFormatError(f"target dims must be three extents >= 1, got {target_dims}")
    X, Y, Z = v.dims
    tx, ty, tz = target_dims
    ix, iy, iz = nn_index_map(X, tx), nn_index_map(Y, ty), nn_index_map(Z, tz)
    vox = v.voxels[np.ix_(iz, iy, ix)]
    spacing = tuple(s * d / t for s, d, t in zip(v.spacing, v.dims, target_dims))
    return Volume(target_dims, spacing, np.ascontiguousarray(vox))


# -- normalization -------------------------------------------------------------------
@dataclass
class NormalizationSpec:
    mode: str
    mean: float = None
    std: float = None
    provenance: str = None
    tau: float = 0.1

    def __post_init__(self):
        if self.mode not in NORMALIZATION_MODES:
            raise ValueError(f"normalization mode must be one of {NORMALIZATION_MODES}, got {self.mode!r}")

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GlobalStats:
    """Running masked-voxel moments; fed volumes in a fixed order."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    sources: list = field(default_factory=list)

    def add(self, v, tau=0.1, source=None):
        x = v.voxels[brain_mask(v, tau)].astype(np.float64)
        self.count += x.size
        self.total += float(x.sum())
        self.total_sq += float((x * x).sum())
        if source is not None:
            self.sources.append(source)

    def spec(self, provenance):
        if self.count == 0:
            raise ValueError("no voxels accumulated")
        mean = self.total / self.count
        var = max(self.total_sq / self.count - mean * mean, 0.0)
        return NormalizationSpec("zscore_global", mean=mean, std=float(np.sqrt(var)), provenance=provenance)


def normalize(v, spec, mask=None):
    """Apply ``spec`` to ``v``; voxels outside the brain mask are set to 0."""
    if mask is None:
        mask = brain_mask(v, spec.tau)
    x = v.voxels.astype(np.float64)
    inside = x[mask]
    if spec.mode == "zscore_per_image":
        mu, sd = inside.mean(), inside.std()
        if sd == 0:
            return _degenerate(v, "zero standard deviation inside the brain mask")
        y = (x - mu) / sd
    elif spec.mode == "minmax":
        lo, hi = inside.min(), inside.max()
        if hi == lo:
            return _degenerate(v, "max == min inside the brain mask")
        y = (x - lo) / (hi - lo)
    else:
        if spec.mean is None or spec.std is None:
            raise ValueError("zscore_global needs dataset mean/std computed on the training split")
        if spec.std == 0:
            return _degenerate(v, "global standard deviation is zero")
        y = (x - spec.mean) / spec.std
    y[~mask] = 0.0
    return v.with_voxels(y.astype(np.float32))


def _degenerate(v, reason):
    warnings.warn(f"degenerate image: {reason}; output set to zeros", DegenerateImageWarning, stacklevel=3)
    log.warning("degenerate image: %s", reason)
    return v.with_voxels(np.zeros_like(v.voxels))


def preprocess(v, spec, grid=UNIFORM_GRID):
    """Resample onto ``grid`` then mask and normalize."""
    if v.dims != tuple(grid):
        v = resample_nn(v, grid)
    return normalize(v, spec)


def prep_path(path):
    base = _base(path)
    return base + ".prep"


def save_preprocessed(v, src_path, spec):
    return save_volume(v, prep_path(src_path), extra={"normalization": spec.to_dict()})


# -- slices ----------------------------------------------------------------------------
@dataclass
class SliceSet:
    slices: np.ndarray  # (K, H, W)
    indices: np.ndarray
    plane: str = "axial"

    def __len__(self):
        return len(self.slices)


def centered_indices(n, k):
    return np.floor((np.arange(k) + 0.5) * n / k).astype(np.int64)


def select_axial_slices(v, k=16):
    Z = v.dims[2]
    if Z < k:
        raise ValueError(f"cannot select {k} axial slices from a volume with Z={Z}")
    idx = centered_indices(Z, k)
    return SliceSet(v.voxels[idx].copy(), idx, "axial")


def make_grid_montage(s):
    """Tile 16 slices row-major into a (4H, 4W) image."""
    if len(s) != 16:
        raise ValueError(f"montage needs exactly 16 slices, got {len(s)}")
    K, H, W = s.slices.shape
    return s.slices.reshape(4, 4, H, W).transpose(0, 2, 1, 3).reshape(4 * H, 4 * W).copy()


def montage_cells(montage):
    H, W = montage.shape[0] // 4, montage.shape[1] // 4
    return montage.reshape(4, H, 4, W).transpose(0, 2, 1, 3).reshape(16, H, W).copy()


def _pad_square(slices, side):
    K, H, W = slices.shape
    out = np.zeros((K, side, side), dtype=slices.dtype)
    out[:, :H, :W] = slices
    return out


def extract_plane_slices(v, slices=77):
    """Axial/coronal/sagittal SliceSets on the uniform grid.

    Coronal (Z x X) and sagittal (Z x Y) slices are zero-padded to 128x128.
    In 16-slice mode only the reduced axial set is returned.
    """
    if v.dims != UNIFORM_GRID:
        raise ValueError(f"plane extraction needs the uniform {UNIFORM_GRID} grid, got {v.dims}")
    if slices == 16:
        return {"axial": select_axial_slices(v, 16)}
    if slices != 77:
        raise ValueError(f"slices must be 16 or 77, got {slices}")
    X, Y, Z = v.dims
    vox = v.voxels
    side = max(X, Y)
    axial = SliceSet(vox.copy(), np.arange(Z), "axial")
    coronal = SliceSet(_pad_square(vox.transpose(1, 0, 2), side), np.arange(Y), "coronal")
    sagittal = SliceSet(_pad_square(vox.transpose(2, 0, 1), side), np.arange(X), "sagittal")
    return {"axial": axial, "coronal": coronal, "sagittal": sagittal}


def resize_slices(slices, size):
    """Resize (K, H, W) square slices to (K, size, size).

    Block mean when ``H`` is a multiple of ``size``, nearest neighbour otherwise.
    """
    K, H, W = slices.shape
    if H == size and W == size:
        return slices
    if H % size == 0 and W % size == 0:
        fh, fw = H // size, W // size
        return slices.reshape(K, size, fh, size, fw).mean(axis=(2, 4)).astype(slices.dtype)
    return slices[:, nn_index_map(H, size)][:, :, nn_index_map(W, size)]
