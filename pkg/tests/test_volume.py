import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adbench.volume import (
    FLENI_GEOMETRY, UNIFORM_GRID, CorruptVolumeError, DegenerateImageWarning, EmptyMaskError, NormalizationSpec,
    GlobalStats, SliceSet, Volume, VolumeFormatError, brain_mask, centered_indices, extract_plane_slices,
    load_volume, make_grid_montage, montage_cells, nn_index_map, normalize, preprocess, read_sidecar,
    resample_nn, resize_slices, save_preprocessed, save_volume, select_axial_slices, volume_paths,
)


def ellipsoid_phantom(dims=(24, 20, 16), value=1.0, background=0.0):
    X, Y, Z = dims
    z, y, x = np.meshgrid(*(np.linspace(-1, 1, n) for n in (Z, Y, X)), indexing="ij")
    inside = (x / 0.7) ** 2 + (y / 0.75) ** 2 + (z / 0.8) ** 2 <= 1
    vox = np.where(inside, value, background).astype(np.float32)
    return Volume(dims, (1.0, 1.0, 1.0), vox), inside


def textured(rng, dims=(24, 20, 16)):
    v, inside = ellipsoid_phantom(dims)
    vox = np.where(inside, 1.0 + 0.2 * rng.standard_normal(inside.shape), 0.0)
    return v.with_voxels(vox.astype(np.float32))


# -- I/O -------------------------------------------------------------------------------
def test_save_load_round_trip(tmp_path, rng):
    v = Volume((8, 8, 4), (1.5, 1.5, 1.5), rng.standard_normal((4, 8, 8)).astype(np.float32))
    save_volume(v, tmp_path / "a")
    w = load_volume(tmp_path / "a.vol.json")
    assert w.dims == v.dims and w.spacing == v.spacing
    assert w.voxels.tobytes() == v.voxels.tobytes()


def test_raw_payload_is_x_fastest(tmp_path):
    vox = np.arange(2 * 3 * 4, dtype=np.float32).reshape(4, 3, 2)  # (Z, Y, X)
    save_volume(Volume((2, 3, 4), (1, 1, 1), vox), tmp_path / "b")
    raw = np.fromfile(volume_paths(tmp_path / "b")[1], dtype="<f4")
    assert raw[1] == vox[0, 0, 1] and raw[2] == vox[0, 1, 0]


def test_truncated_payload(tmp_path, rng):
    save_volume(Volume((8, 8, 4), (1, 1, 1), np.ones((4, 8, 8), np.float32)), tmp_path / "c")
    _, raw = volume_paths(tmp_path / "c")
    data = open(raw, "rb").read()
    open(raw, "wb").write(data[:-4])
    with pytest.raises(CorruptVolumeError):
        load_volume(tmp_path / "c")


def test_missing_sidecar(tmp_path):
    with pytest.raises(VolumeFormatError, match="sidecar"):
        load_volume(tmp_path / "nothing")


def test_fleni_geometry_accepted(tmp_path):
    dims, spacing = FLENI_GEOMETRY
    X, Y, Z = dims
    save_volume(Volume(dims, spacing, np.zeros((Z, Y, X), np.float32)), tmp_path / "f")
    meta = read_sidecar(tmp_path / "f")
    assert meta["dims"] == [128, 128, 47] and meta["spacing"] == [2.0, 2.0, 3.27]
    assert load_volume(tmp_path / "f").dims == (128, 128, 47)


def test_volume_invariants():
    with pytest.raises(VolumeFormatError):
        Volume((2, 2, 2), (1, 1, 0), np.zeros((2, 2, 2)))
    with pytest.raises(VolumeFormatError):
        Volume((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 3)))


# -- masking -----------------------------------------------------------------------------
def test_zero_volume_empty_mask():
    with pytest.raises(EmptyMaskError, match="empty mask"):
        brain_mask(Volume((8, 8, 8), (1, 1, 1), np.zeros((8, 8, 8), np.float32)))


def test_binary_phantom_mask_is_support():
    v, inside = ellipsoid_phantom()
    np.testing.assert_array_equal(brain_mask(v), inside)


@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_mask_affine_invariant(a, b):
    v = textured(np.random.default_rng(0))
    shifted = v.with_voxels((a * v.voxels.astype(np.float64) + b).astype(np.float32))
    assert (brain_mask(v) != brain_mask(shifted)).sum() <= 2


# -- resampling ----------------------------------------------------------------------------
def test_resample_identity(rng):
    v = Volume((5, 4, 3), (1, 2, 3), rng.standard_normal((3, 4, 5)).astype(np.float32))
    w = resample_nn(v, v.dims)
    np.testing.assert_array_equal(w.voxels, v.voxels)
    assert w.spacing == v.spacing


def test_resample_depth_doubling():
    v = Volume((1, 1, 2), (1, 1, 1), np.array([10.0, 20.0], np.float32).reshape(2, 1, 1))
    np.testing.assert_array_equal(resample_nn(v, (1, 1, 4)).voxels.ravel(), [10, 10, 20, 20])


def test_index_map_47_to_77():
    assert nn_index_map(47, 77)[38] == 23 == int(np.floor(38.5 * 47 / 77))


@given(st.integers(1, 200), st.integers(1, 200))
def test_index_map_bounds_and_monotone(src, tgt):
    m = nn_index_map(src, tgt)
    assert m.min() >= 0 and m.max() <= src - 1
    assert np.all(np.diff(m) >= 0)


def test_resample_spacing_and_values(rng):
    v = Volume((10, 8, 6), (2.0, 2.0, 3.27), rng.integers(0, 50, (6, 8, 10)).astype(np.float32))
    w = resample_nn(v, (5, 16, 7))
    assert w.spacing == pytest.approx((4.0, 1.0, 3.27 * 6 / 7))
    assert set(np.unique(w.voxels)) <= set(np.unique(v.voxels))


# -- normalization ---------------------------------------------------------------------------
def test_zscore_per_image_moments(rng):
    v = textured(rng)
    mask = brain_mask(v)
    y = normalize(v, NormalizationSpec("zscore_per_image")).voxels.astype(np.float64)
    assert abs(y[mask].mean()) < 1e-5 and abs(y[mask].std() - 1) < 1e-5
    assert np.all(y[~mask] == 0)


def test_minmax_range(rng):
    v = textured(rng)
    mask = brain_mask(v)
    y = normalize(v, NormalizationSpec("minmax")).voxels
    assert y[mask].min() == 0.0 and y[mask].max() == pytest.approx(1.0)


@pytest.mark.parametrize("mode", ["zscore_per_image", "minmax"])
@given(a=st.floats(0.2, 5.0), b=st.floats(-3.0, 3.0))
def test_affine_invariant_modes(mode, a, b):
    v = textured(np.random.default_rng(1))
    w = v.with_voxels((a * v.voxels.astype(np.float64) + b).astype(np.float32))
    mask = brain_mask(v)
    spec = NormalizationSpec(mode)
    np.testing.assert_allclose(normalize(w, spec, mask).voxels, normalize(v, spec, mask).voxels, atol=1e-5)


def test_global_zscore_not_affine_invariant(rng):
    v = textured(rng)
    mask = brain_mask(v)
    spec = NormalizationSpec("zscore_global", mean=1.0, std=0.2, provenance="train")
    y = normalize(v, spec, mask).voxels
    y13 = normalize(v.with_voxels(v.voxels * 1.3), spec, mask).voxels
    shift = y13[mask].mean() - y[mask].mean()
    assert shift == pytest.approx(0.3 * v.voxels[mask].astype(np.float64).mean() / 0.2, rel=1e-4)
    assert shift > 0.5


def test_global_needs_stats(rng):
    with pytest.raises(ValueError, match="training split"):
        normalize(textured(rng), NormalizationSpec("zscore_global"))


def test_degenerate_image_warns_and_zeros():
    v, _ = ellipsoid_phantom(value=2.0)
    with pytest.warns(DegenerateImageWarning):
        y = normalize(v, NormalizationSpec("zscore_per_image"))
    assert np.all(y.voxels == 0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        NormalizationSpec("zscore")


def test_global_stats_accumulate(rng):
    vols = [textured(np.random.default_rng(i)) for i in range(3)]
    stats = GlobalStats()
    for i, v in enumerate(vols):
        stats.add(v, source=f"s{i}")
    pooled = np.concatenate([v.voxels[brain_mask(v)].astype(np.float64) for v in vols])
    spec = stats.spec("train fold 0")
    assert spec.mean == pytest.approx(pooled.mean(), rel=1e-10)
    assert spec.std == pytest.approx(pooled.std(), rel=1e-8)
    assert spec.provenance == "train fold 0" and stats.sources == ["s0", "s1", "s2"]


def test_preprocess_deterministic_and_saved(tmp_path, rng):
    v = textured(rng, dims=(32, 32, 20))
    src = save_volume(v, tmp_path / "scan")
    spec = NormalizationSpec("zscore_per_image")
    a, b = preprocess(v, spec), preprocess(load_volume(src), spec)
    assert a.dims == UNIFORM_GRID
    assert a.voxels.tobytes() == b.voxels.tobytes()
    meta_path = save_preprocessed(a, src, spec)
    assert meta_path.endswith("scan.prep.vol.json")
    assert read_sidecar(meta_path)["normalization"]["mode"] == "zscore_per_image"


# -- slices and montages ---------------------------------------------------------------
def test_axial_indices_77():
    assert centered_indices(77, 16).tolist() == [2, 7, 12, 16, 21, 26, 31, 36, 40, 45, 50, 55, 60, 64, 69, 74]


def test_axial_indices_identity():
    assert centered_indices(16, 16).tolist() == list(range(16))


@given(st.integers(16, 300))
def test_axial_indices_increasing(Z):
    idx = centered_indices(Z, 16)
    assert np.all(np.diff(idx) > 0) and idx.min() >= 0 and idx.max() < Z


def test_select_too_few_slices():
    with pytest.raises(ValueError):
        select_axial_slices(Volume((4, 4, 10), (1, 1, 1), np.zeros((10, 4, 4), np.float32)))


def test_montage_placement():
    s = SliceSet(np.stack([np.full((128, 128), k, np.float32) for k in range(16)]), np.arange(16))
    m = make_grid_montage(s)
    assert m.shape == (512, 512)
    for k in range(16):
        r, c = divmod(k, 4)
        assert np.all(m[128 * r:128 * (r + 1), 128 * c:128 * (c + 1)] == k)


def test_montage_zero_and_round_trip(rng):
    zeros = SliceSet(np.zeros((16, 8, 8)), np.arange(16))
    assert not make_grid_montage(zeros).any()
    s = rng.standard_normal((16, 8, 6))
    np.testing.assert_array_equal(montage_cells(make_grid_montage(SliceSet(s, np.arange(16)))), s)


def test_montage_needs_16():
    with pytest.raises(ValueError):
        make_grid_montage(SliceSet(np.zeros((15, 4, 4)), np.arange(15)))


def _grid_volume(rng):
    X, Y, Z = UNIFORM_GRID
    return Volume(UNIFORM_GRID, (1, 1, 1), rng.standard_normal((Z, Y, X)).astype(np.float32))


def test_plane_slice_counts(rng):
    v = _grid_volume(rng)
    planes = extract_plane_slices(v)
    assert [len(planes[p]) for p in ("axial", "coronal", "sagittal")] == [77, 128, 128]
    assert sum(len(p) for p in planes.values()) == 333
    assert all(p.slices.shape[1:] == (128, 128) for p in planes.values())
    np.testing.assert_array_equal(planes["axial"].slices[30], v.voxels[30])
    np.testing.assert_array_equal(planes["coronal"].slices[5][:77], v.voxels[:, 5, :])
    assert not planes["sagittal"].slices[:, 77:].any()


def test_plane_16_mode(rng):
    planes = extract_plane_slices(_grid_volume(rng), 16)
    assert list(planes) == ["axial"] and len(planes["axial"]) == 16


def test_plane_needs_uniform_grid():
    with pytest.raises(ValueError):
        extract_plane_slices(Volume((4, 4, 4), (1, 1, 1), np.zeros((4, 4, 4), np.float32)))


def test_resize_block_mean_and_nearest(rng):
    s = rng.standard_normal((2, 8, 8))
    np.testing.assert_allclose(resize_slices(s, 4), s.reshape(2, 4, 2, 4, 2).mean(axis=(2, 4)))
    assert resize_slices(s, 3).shape == (2, 3, 3)
    assert resize_slices(s, 8) is s
