import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adbench.occlusion import (
    OcclusionConfig, OcclusionError, RelevanceMap, export_heatmap, grid_positions, occlusion_map, occlusion_volume,
    read_heatmap_csv, read_pgm, to_pgm_bytes,
)
from adbench.tensor import Tensor


class Logistic:
    """p(class 1) = sigmoid(<w, x> + b) over the channel-0 image."""

    training = False
    dtype = np.float64

    def __init__(self, w, b=0.0):
        self.w, self.b = w, b
        self.calls = 0

    def forward(self, x):
        self.calls += x.shape[0]
        z = np.einsum("nhw,hw->n", x.data[:, 0], self.w) + self.b
        p = 1.0 / (1.0 + np.exp(-z))
        return Tensor(np.stack([1 - p, p], axis=1))


class Constant(Logistic):
    def forward(self, x):
        return Tensor(np.tile([0.3, 0.7], (x.shape[0], 1)))


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def closed_form(img, w, b, patch, stride, target, base):
    ys = range(0, img.shape[0] - patch + 1, stride)
    xs = range(0, img.shape[1] - patch + 1, stride)
    z0 = float((img * w).sum()) + b
    p = lambda z: sigmoid(z) if target == 1 else 1 - sigmoid(z)
    out = np.zeros((len(ys), len(xs)))
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            blk = (slice(y, y + patch), slice(x, x + patch))
            dz = float(((base - img[blk]) * w[blk]).sum())
            out[i, j] = p(z0) - p(z0 + dz)
    return out


@pytest.mark.parametrize("baseline", ["zero", "mean"])
@pytest.mark.parametrize("target", ["predicted", "given"])
def test_logistic_closed_form(baseline, target):
    r = np.random.default_rng(0)
    img = r.random((40, 36))
    w = r.standard_normal((40, 36)) * 0.05
    cfg = OcclusionConfig(patch=8, stride=4, baseline=baseline, target=target, label=0 if target == "given" else None)
    m = occlusion_map(Logistic(w, 0.1), img, cfg)
    z0 = float((img * w).sum()) + 0.1
    want_target = (1 if sigmoid(z0) >= 0.5 else 0) if target == "predicted" else 0
    base = 0.0 if baseline == "zero" else img.mean()
    assert m.target == want_target
    np.testing.assert_allclose(m.values, closed_form(img, w, 0.1, 8, 4, want_target, base), atol=1e-6, rtol=0)


def test_grid_63_by_63():
    img = np.random.default_rng(1).random((512, 512))
    m = occlusion_map(Logistic(np.full((512, 512), 1e-4)), img)
    assert m.grid_shape == (63, 63) and m.pixels.shape == (512, 512)


@given(st.integers(1, 200), st.integers(1, 32), st.integers(1, 32))
def test_grid_positions_cover_range(n, patch, stride):
    pos = grid_positions(n, patch, stride)
    assert all(p + patch <= n for p in pos)
    assert len(pos) == (0 if patch > n else (n - patch) // stride + 1)


def test_constant_logit_gives_zero_map():
    img = np.random.default_rng(2).random((32, 32))
    m = occlusion_map(Constant(None), img, OcclusionConfig(patch=8, stride=8))
    assert np.all(m.values == 0.0) and np.all(m.pixels == 0.0)


def test_patch_equal_to_baseline_exact_zero():
    img = np.random.default_rng(3).random((32, 32)) + 1.0
    img[:8, :8] = 0.0
    model = Logistic(np.ones((32, 32)) * 0.01)
    m = occlusion_map(model, img, OcclusionConfig(patch=8, stride=8))
    assert m.values[0, 0] == 0.0
    assert np.all(m.values[1:, 1:] != 0.0)
    assert model.calls == 1 + 15  # clean input plus every position but the skipped one


def test_pixels_average_covering_patches():
    r = np.random.default_rng(6)
    m = occlusion_map(Logistic(r.standard_normal((16, 16))), r.random((16, 16)), OcclusionConfig(patch=8, stride=4))
    v = m.values
    assert m.grid_shape == (3, 3)
    assert m.pixels[0, 0] == pytest.approx(v[0, 0])
    assert m.pixels[0, 5] == pytest.approx(v[0, :2].mean())
    assert m.pixels[6, 6] == pytest.approx(v[:2, :2].mean())


def test_training_mode_rejected():
    model = Logistic(np.zeros((16, 16)))
    model.training = True
    with pytest.raises(OcclusionError, match="eval mode"):
        occlusion_map(model, np.ones((16, 16)))


@pytest.mark.parametrize("kw,shape", [(dict(stride=0), (32, 32)), (dict(patch=40), (32, 32)),
                                      (dict(target="given"), (32, 32)), (dict(baseline="blur"), (32, 32))])
def test_config_errors(kw, shape):
    with pytest.raises(OcclusionError):
        occlusion_map(Logistic(np.zeros(shape)), np.ones(shape), OcclusionConfig(**kw))


def test_non_2d_rejected():
    with pytest.raises(OcclusionError, match="2-D"):
        occlusion_map(Logistic(np.zeros((4, 4))), np.ones((2, 4, 4)))


def test_volume_occlusion_rebuilds_input():
    r = np.random.default_rng(4)
    vol = r.random((3, 16, 16))
    w = r.standard_normal((16, 16)) * 0.1
    # model sees the mean over slices: occluding slice z changes the mean
    maps = occlusion_volume(Logistic(w), vol, lambda v: v.mean(axis=0)[None], OcclusionConfig(patch=8, stride=8))
    assert len(maps) == 3 and [m.meta["axial_slice"] for m in maps] == [0, 1, 2]
    z0 = float((vol.mean(0) * w).sum())
    t = maps[0].target
    for z, m in enumerate(maps):
        occluded = vol.copy()
        occluded[z, :8, :8] = 0.0
        z1 = float((occluded.mean(0) * w).sum())
        want = (sigmoid(z0) - sigmoid(z1)) if t == 1 else (sigmoid(z1) - sigmoid(z0))
        assert m.values[0, 0] == pytest.approx(want, abs=1e-12)


# -- export -------------------------------------------------------------------------
def test_export_round_trip(tmp_path):
    vals = np.random.default_rng(5).standard_normal((12, 10))
    csv_path, pgm_path = export_heatmap(RelevanceMap(np.zeros((1, 1)), vals, 1, 0.5), str(tmp_path / "sub" / "s1"))
    assert csv_path.endswith("s1.relevance.csv") and pgm_path.endswith("s1.relevance.pgm")
    np.testing.assert_allclose(read_heatmap_csv(csv_path), vals, rtol=1e-8)
    img = read_pgm(pgm_path)
    assert img.shape == (12, 10)
    assert img.flat[np.argmax(vals)] == 255 and img.flat[np.argmin(vals)] == 0


def test_constant_map_pgm_is_zero():
    blob = to_pgm_bytes(np.full((3, 4), 0.2))
    assert blob.startswith(b"P5\n4 3\n255\n")
    assert blob.endswith(bytes(12))


def test_non_finite_export_rejected(tmp_path):
    with pytest.raises(OcclusionError):
        export_heatmap(np.array([[np.nan]]), str(tmp_path / "x"))
