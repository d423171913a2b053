"""Occlusion sensitivity: slide a baseline patch over the input and record the
drop in the target class probability."""
import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

BASELINES = ("zero", "mean")
TARGETS = ("predicted", "given")


class OcclusionError(ValueError):
    pass


@dataclass
class OcclusionConfig:
    patch: int = 16
    stride: int = 8
    baseline: str = "zero"
    target: str = "predicted"
    label: int = None  # class index when target == "given"
    batch_size: int = 32

    def validate(self, shape):
        h, w = shape
        if self.baseline not in BASELINES:
            raise OcclusionError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.target not in TARGETS:
            raise OcclusionError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.target == "given" and self.label is None:
            raise OcclusionError("target 'given' needs a class label")
        if not 1 <= self.stride <= self.patch:
            raise OcclusionError(f"stride must be in [1, patch={self.patch}], got {self.stride}")
        if self.patch > min(h, w):
            raise OcclusionError(f"patch {self.patch} does not fit a {h}x{w} image")

    def to_dict(self):
        return asdict(self)


@dataclass
class RelevanceMap:
    values: np.ndarray  # (gy, gx) relevance per patch position
    pixels: np.ndarray  # (H, W) mean relevance of the patches covering each pixel
    target: int
    base_prob: float
    meta: dict = field(default_factory=dict)

    @property
    def grid_shape(self):
        return self.values.shape


def grid_positions(n, patch, stride):
    return np.arange(0, n - patch + 1, stride)


def _probs(model, inputs):
    x = np.stack(inputs)
    dtype = getattr(model, "dtype", x.dtype)
    with no_grad():
        out = model.forward(Tensor(x.astype(dtype)))
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)


def occlusion_map(model, sample, cfg=None, to_input=None, sample_id="", model_id=""):
    """Relevance map over a 2-D ``sample`` (a montage or a single slice).

    ``to_input`` turns the 2-D image into one model input (default: add a
    channel axis). Positions whose patch already equals the baseline are
    exactly 0 without a forward pass.
    """
    cfg = cfg or OcclusionConfig()
    if getattr(model, "training", True):
        raise OcclusionError("model must be in eval mode (call model.eval()); dropout would add noise")
    img = np.asarray(sample)
    if img.ndim != 2:
        raise OcclusionError(f"occlusion expects a 2-D image, got shape {img.shape}")
    cfg.validate(img.shape)
    to_input = to_input or (lambda a: a[None])
    base_value = 0.0 if cfg.baseline == "zero" else float(img.mean())

    p0 = _probs(model, [to_input(img)])[0]
    target = int(np.argmax(p0)) if cfg.target == "predicted" else int(cfg.label)
    if not 0 <= target < p0.size:
        raise OcclusionError(f"target class {target} out of range for {p0.size} outputs")

    ys = grid_positions(img.shape[0], cfg.patch, cfg.stride)
    xs = grid_positions(img.shape[1], cfg.patch, cfg.stride)
    values = np.zeros((len(ys), len(xs)))
    pending = []

    def flush():
        if pending:
            probs = _probs(model, [inp for _, inp in pending])
            for (pos, _), p in zip(pending, probs):
                values[pos] = p0[target] - p[target]
            pending.clear()

    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            region = img[y:y + cfg.patch, x:x + cfg.patch]
            if np.all(region == base_value):
                continue  # input unchanged, relevance exactly 0
            occluded = img.copy()
            occluded[y:y + cfg.patch, x:x + cfg.patch] = base_value
            pending.append(((i, j), to_input(occluded)))
            if len(pending) >= cfg.batch_size:
                flush()
    flush()

    total = np.zeros(img.shape)
    cover = np.zeros(img.shape)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            total[y:y + cfg.patch, x:x + cfg.patch] += values[i, j]
            cover[y:y + cfg.patch, x:x + cfg.patch] += 1
    pixels = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    meta = {"model_id": model_id, "sample_id": sample_id, "config": cfg.to_dict(), "target": target}
    return RelevanceMap(values, pixels, target, float(p0[target]), meta)


def occlusion_volume(model, volume, build_input, cfg=None, slices=None, sample_id="", model_id=""):
    """Per-axial-slice occlusion in volume space.

    ``volume`` is (Z, Y, X); ``build_input(volume)`` rebuilds the model input,
    so a patch hidden in one axial slice also disappears from every coronal
    and sagittal slice that crosses it. Returns one RelevanceMap per slice.
    """
    vol = np.asarray(volume)
    slices = range(vol.shape[0]) if slices is None else slices
    out = []
    for z in slices:
        def to_input(img, z=z):
            v = vol.copy()
            v[z] = img
            return build_input(v)

        m = occlusion_map(model, vol[z], cfg, to_input, sample_id, model_id)
        m.meta["axial_slice"] = int(z)
        out.append(m)
    return out


def to_pgm_bytes(values):
    """8-bit min-max scaled image; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        img = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros(v.shape, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise OcclusionError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_heatmap(rmap, prefix):
    """Write ``<prefix>.relevance.csv`` and ``<prefix>.relevance.pgm`` from the pixel-space map."""
    values = rmap.pixels if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    if not np.all(np.isfinite(values)):
        raise OcclusionError("relevance map has non-finite values")
    d = os.path.dirname(prefix)
    if d:
        os.makedirs(d, exist_ok=True)
    csv_path, pgm_path = prefix + ".relevance.csv", prefix + ".relevance.pgm"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in values:
            w.writerow([f"{v:.9g}" for v in row])
    with open(pgm_path, "wb") as fh:
        fh.write(to_pgm_bytes(values))
    return csv_path, pgm_path


def read_heatmap_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
