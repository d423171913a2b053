"""Deterministic phantom FDG-PET cohorts.

A phantom is a bright brain ellipsoid with a dimmer core, plus two
posterior-lateral ellipsoids whose uptake is scaled by a class-dependent
hypometabolism factor. Geometry is defined in millimetres around the field
of view centre, so cohorts with different grids image the same anatomy.
"""
import datetime as dt
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .labeling import VisitRecord, write_manifest
from .volume import ADNI_GEOMETRY, FLENI_GEOMETRY, Volume, save_volume

DEFAULT_FACTORS = {"CN": 1.0, "MCI": 0.85, "AD": 0.7}
_RANK = {"CN": 0, "MCI": 1, "AD": 2}
_MCI_CODES = ("EMCI", "MCI", "LMCI")


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # mm, (x, y, z)
    axes: tuple  # semi-axes in mm

    def inside(self, x, y, z):
        cx, cy, cz = self.center
        ax, ay, az = self.axes
        return (((x - cx) / ax) ** 2)[None, None, :] + (((y - cy) / ay) ** 2)[None, :, None] + (
            ((z - cz) / az) ** 2
        )[:, None, None] <= 1.0

    def contains(self, other):
        """True when every point of ``other`` lies inside self (sampled surface check)."""
        u = np.linspace(0, np.pi, 25)
        v = np.linspace(0, 2 * np.pi, 49)
        uu, vv = np.meshgrid(u, v)
        pts = np.stack([
            other.center[0] + other.axes[0] * np.sin(uu) * np.cos(vv),
            other.center[1] + other.axes[1] * np.sin(uu) * np.sin(vv),
            other.center[2] + other.axes[2] * np.cos(uu),
        ])
        r = sum(((pts[i] - self.center[i]) / self.axes[i]) ** 2 for i in range(3))
        return bool(np.all(r <= 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    factors: dict = field(default_factory=lambda: dict(DEFAULT_FACTORS))
    brain: Ellipsoid = Ellipsoid((0.0, 0.0, 0.0), (65.0, 80.0, 55.0))
    core_scale: float = 0.55
    core_intensity: float = 0.7
    regions: tuple = (
        Ellipsoid((-32.0, -38.0, 12.0), (16.0, 20.0, 16.0)),
        Ellipsoid((32.0, -38.0, 12.0), (16.0, 20.0, 16.0)),
    )
    shape_jitter: float = 0.03
    intensity_jitter: float = 0.1
    factor_jitter: float = 0.0

    def validate(self):
        for c, f in self.factors.items():
            if not 0.0 < f <= 1.0:
                raise PhantomSpecError(f"hypometabolism factor for {c} must be in (0, 1], got {f}")
        for r in self.regions:
            if not self.brain.contains(r):
                raise PhantomSpecError(f"region {r} lies outside the brain ellipsoid")


@dataclass(frozen=True)
class CohortSpec:
    name: str
    dims: tuple
    spacing: tuple
    n_subjects: int
    mixture: dict
    scale: float = 1.0
    offset: float = 0.0
    noise: float = 0.1
    max_visits: int = 1
    cn_origin: float = 0.5  # P(trajectory starts at CN) for MCI/AD subjects with >1 visit
    mci_origin: float = 0.5  # P(AD trajectory starts at MCI rather than AD) when not CN-origin
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    start_year: int = 2006

    def validate(self):
        if self.n_subjects < 1:
            raise PhantomSpecError("subject count must be >= 1")
        if abs(sum(self.mixture.values()) - 1.0) > 1e-9:
            raise PhantomSpecError(f"class mixture must sum to 1, got {self.mixture}")
        if self.scale <= 0:
            raise PhantomSpecError("scale must be > 0")
        self.phantom.validate()


def adni_like(n_subjects=100, mixture=None, **kw):
    dims, spacing = ADNI_GEOMETRY
    mixture = mixture or {"CN": 0.35, "MCI": 0.35, "AD": 0.3}
    kw.setdefault("max_visits", 3)
    return CohortSpec("adni-like", dims, spacing, n_subjects, mixture, **kw)


def fleni_like(n_subjects=100, mixture=None, **kw):
    dims, spacing = FLENI_GEOMETRY
    mixture = mixture or {"CN": 0.5, "AD": 0.5}
    kw.setdefault("scale", 1.3)
    kw.setdefault("offset", 0.2)
    kw.setdefault("noise", 0.1)
    return CohortSpec("fleni-like", dims, spacing, n_subjects, mixture, **kw)


PRESETS = {"adni-like": adni_like, "fleni-like": fleni_like}


def _axis_mm(n, s):
    return (np.arange(n) + 0.5 - n / 2.0) * s


def _subject_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def class_counts(n, mixture):
    """Largest-remainder allocation of ``n`` subjects to the mixture."""
    classes = sorted(mixture)
    raw = np.array([n * mixture[c] for c in classes])
    base = np.floor(raw).astype(int)
    rem = n - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return dict(zip(classes, base.tolist()))


def render_phantom(dims, spacing, diagnosis, phantom, anatomy):
    """Noiseless phantom for one visit. ``anatomy`` carries the subject's jitter draws."""
    X, Y, Z = dims
    x, y, z = (_axis_mm(n, s) for n, s in zip(dims, spacing))
    stretch = anatomy["stretch"]

    def jittered(e):
        return Ellipsoid(tuple(c * stretch for c in e.center), tuple(a * stretch for a in e.axes))

    brain = jittered(phantom.brain)
    core = Ellipsoid(brain.center, tuple(a * phantom.core_scale for a in brain.axes))
    vol = np.zeros((Z, Y, X), dtype=np.float64)
    vol[brain.inside(x, y, z)] = 1.0
    vol[core.inside(x, y, z)] = phantom.core_intensity
    factor = phantom.factors[diagnosis] + anatomy["factor_offset"][diagnosis]
    factor = min(max(factor, 1e-3), 1.0)
    for r in phantom.regions:
        vol[jittered(r).inside(x, y, z)] *= factor
    return vol * anatomy["intensity"]


def inject_domain_shift(voxels, scale=1.0, offset=0.0, sigma=0.0, rng=None):
    """x -> scale * x + offset + N(0, sigma), voxelwise."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    out = scale * np.asarray(voxels, dtype=np.float64) + offset
    if sigma > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return out


def _trajectory(final, n_visits, spec, rng):
    """Monotone CN -> MCI -> AD diagnosis sequence ending at ``final``."""
    if n_visits == 1 or final == "CN":
        return [final] * n_visits
    if rng.random() < spec.cn_origin:
        start = "CN"
    elif final == "AD" and rng.random() < spec.mci_origin:
        start = "MCI"
    else:
        start = final
    levels = sorted({start, final}, key=_RANK.get)
    if start == "CN" and final == "AD" and n_visits >= 3:
        levels = ["CN", "MCI", "AD"]
    # spread the levels over the visits, last visit at the final class
    seq = [levels[min(len(levels) - 1, (i * len(levels)) // n_visits)] for i in range(n_visits)]
    seq[-1] = final
    return seq


def generate_subject(spec, seed, index, final_class):
    """Visit records and float32 volumes for subject ``index``.

    Returns a list of (VisitRecord, Volume). Pure function of the arguments.
    """
    spec.validate()
    rng = _subject_rng(seed, index)
    ph = spec.phantom
    anatomy = {
        "stretch": 1.0 + ph.shape_jitter * float(np.clip(rng.standard_normal(), -2, 2)),
        "intensity": 1.0 + ph.intensity_jitter * float(np.clip(rng.standard_normal(), -2.5, 2.5)),
        "factor_offset": {c: (0.0 if c == "CN" else ph.factor_jitter * float(rng.standard_normal())) for c in ("CN", "MCI", "AD")},
    }
    n_visits = int(rng.integers(1, spec.max_visits + 1)) if spec.max_visits > 1 else 1
    seq = _trajectory(final_class, n_visits, spec, rng)
    subject_id = f"{spec.name}-{index:04d}"
    year = spec.start_year + int(rng.integers(0, 4))
    out = []
    for v, diag in enumerate(seq):
        date = dt.date(year + 2 * v, 1 + int(rng.integers(0, 12)), 1 + int(rng.integers(0, 28)))
        code = diag if diag != "MCI" else _MCI_CODES[int(rng.integers(0, 3))]
        clean = render_phantom(spec.dims, spec.spacing, diag, ph, anatomy)
        noise_rng = np.random.default_rng([int(seed), int(index), v + 1])
        vox = inject_domain_shift(clean, spec.scale, spec.offset, spec.noise, noise_rng)
        scan_id = f"{subject_id}-v{v}"
        vol = Volume(spec.dims, spec.spacing, vox.astype(np.float32))
        out.append((VisitRecord(subject_id, scan_id, date, code, ""), vol))
    return out


def subject_classes(spec, seed):
    counts = class_counts(spec.n_subjects, spec.mixture)
    classes = [c for c in sorted(counts) for _ in range(counts[c])]
    perm = np.random.default_rng([int(seed), 2**31 - 1]).permutation(len(classes))
    return [classes[i] for i in perm]


def iter_cohort(spec, seed):
    """Yield (VisitRecord, Volume) for every scan without touching disk."""
    for i, cls in enumerate(subject_classes(spec, seed)):
        yield from generate_subject(spec, seed, i, cls)


def generate_cohort(spec, seed, out_dir):
    """Write volumes and ``manifest.csv`` into ``out_dir``; returns a summary dict."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    visits = []
    final = {}
    for rec, vol in iter_cohort(spec, seed):
        meta = save_volume(vol, os.path.join(out_dir, rec.scan_id))
        visits.append(replace(rec, volume_path=os.path.basename(meta)))
        final[rec.subject_id] = rec.diagnosis
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, visits)
    mix = {}
    for d in final.values():
        key = "MCI" if d in _MCI_CODES else d
        mix[key] = mix.get(key, 0) + 1
    return {"manifest": manifest, "subjects": len(final), "scans": len(visits), "class_mix": dict(sorted(mix.items()))}
