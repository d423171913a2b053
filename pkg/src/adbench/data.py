"""Turn cohort volumes into model-ready arrays.

Each scan is reduced once to the slices a model consumes, stored as
``resize(x * mask)`` and ``resize(mask)`` plus masked moments of the whole
volume. Every normalization mode is ``(x - a) / b`` inside the mask and 0
outside, and resizing is linear, so the normalized input is recovered as
``(xm - a * m) / b`` without revisiting the volume. This matters for global
z-score, whose statistics change with every training split.
"""
import os
from dataclasses import dataclass

import numpy as np

from .volume import (
    UNIFORM_GRID, NormalizationSpec, brain_mask, extract_plane_slices, load_volume,
    make_grid_montage, resample_nn, resize_slices, SliceSet,
)


@dataclass
class ScanInput:
    xm: np.ndarray  # (T, S, S) resized masked intensities
    m: np.ndarray  # (T, S, S) resized mask
    count: int
    total: float
    total_sq: float
    lo: float
    hi: float

    @property
    def mean(self):
        return self.total / self.count

    @property
    def std(self):
        return float(np.sqrt(max(self.total_sq / self.count - self.mean ** 2, 0.0)))


def prepare_scan(volume, slices=16, image_size=128, tau=0.1):
    """Resample to the uniform grid, mask, and keep the model's slices."""
    if volume.dims != UNIFORM_GRID:
        volume = resample_nn(volume, UNIFORM_GRID)
    mask = brain_mask(volume, tau)
    x = volume.voxels.astype(np.float64)
    inside = x[mask]
    xm_vol = volume.with_voxels(np.where(mask, x, 0.0).astype(np.float64))
    m_vol = volume.with_voxels(mask.astype(np.float64))
    planes_x = extract_plane_slices(xm_vol, slices)
    planes_m = extract_plane_slices(m_vol, slices)
    xm = np.concatenate([resize_slices(planes_x[p].slices, image_size) for p in planes_x])
    m = np.concatenate([resize_slices(planes_m[p].slices, image_size) for p in planes_m])
    return ScanInput(
        xm.astype(np.float32), m.astype(np.float32), int(inside.size),
        float(inside.sum()), float((inside * inside).sum()), float(inside.min()), float(inside.max()),
    )


def affine_params(scan, spec):
    """(a, b) such that the normalized voxel is (x - a) / b, or None when degenerate."""
    if spec.mode == "zscore_per_image":
        a, b = scan.mean, scan.std
    elif spec.mode == "minmax":
        a, b = scan.lo, scan.hi - scan.lo
    else:
        if spec.mean is None or spec.std is None:
            raise ValueError("zscore_global needs training-split statistics")
        a, b = spec.mean, spec.std
    return None if b == 0 else (a, b)


def normalized_input(scan, spec):
    ab = affine_params(scan, spec)
    if ab is None:
        return np.zeros_like(scan.xm)
    a, b = ab
    return ((scan.xm.astype(np.float64) - a * scan.m) / b).astype(np.float32)


def global_spec(scans, provenance):
    """Pool masked moments over ``scans`` (an iterable of ScanInput)."""
    count = total = total_sq = 0
    for s in scans:
        count += s.count
        total += s.total
        total_sq += s.total_sq
    if count == 0:
        raise ValueError("no scans to compute global statistics from")
    mean = total / count
    std = float(np.sqrt(max(total_sq / count - mean * mean, 0.0)))
    return NormalizationSpec("zscore_global", mean=mean, std=std, provenance=provenance)


def to_model_input(stack, kind):
    """(T, S, S) normalized slices -> the per-sample array ``forward`` expects."""
    if kind == "inception_grid":
        montage = make_grid_montage(SliceSet(stack, np.arange(len(stack))))
        return montage[None]
    return stack


def batch_inputs(stacks, kind):
    return np.stack([to_model_input(s, kind) for s in stacks]).astype(np.float32)


class ScanStore:
    """Lazily prepared ScanInputs keyed by scan id."""

    def __init__(self, slices=16, image_size=128, tau=0.1, root=""):
        self.slices = slices
        self.image_size = image_size
        self.tau = tau
        self.root = root
        self._cache = {}

    def add_volume(self, scan_id, volume):
        self._cache[scan_id] = prepare_scan(volume, self.slices, self.image_size, self.tau)

    def get(self, sample):
        scan = self._cache.get(sample.scan_id)
        if scan is None:
            path = sample.volume_path
            if self.root and not os.path.isabs(path):
                path = os.path.join(self.root, path)
            scan = prepare_scan(load_volume(path), self.slices, self.image_size, self.tau)
            self._cache[sample.scan_id] = scan
        return scan

    def __contains__(self, scan_id):
        return scan_id in self._cache


def stack_from_volume(volume, slices=16, image_size=128):
    """Model slices of an already normalized volume on the uniform grid."""
    planes = extract_plane_slices(volume, slices)
    return np.concatenate([resize_slices(planes[p].slices, image_size) for p in planes]).astype(np.float32)
