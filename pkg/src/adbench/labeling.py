"""Longitudinal labeling, sample selection, subject-level stratified k-fold."""
import csv
import datetime as dt
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

RAW_DIAGNOSES = ("CN", "SMC", "EMCI", "MCI", "LMCI", "AD")
_CANONICAL = {"CN": "CN", "SMC": None, "EMCI": "MCI", "MCI": "MCI", "LMCI": "MCI", "AD": "AD"}
MANIFEST_HEADER = ["subject_id", "scan_id", "acquisition_date", "diagnosis", "volume_path"]
STRATEGIES = ("visit953", "last")
SELECTIONS = ("all", "first", "first_w_train")
CLASS_NAMES = {"visit953": ("NonAD", "AD"), "last": ("CN", "MCI", "AD")}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    subject_id: str
    scan_id: str
    acquisition_date: dt.date
    diagnosis: str
    volume_path: str = ""


@dataclass(frozen=True)
class LabeledSample:
    subject_id: str
    scan_id: str
    label: str
    strategy: str
    acquisition_date: dt.date = None
    volume_path: str = ""


@dataclass(frozen=True)
class Excluded:
    subject_id: str
    reason: str


def normalize_diagnosis(raw):
    """Map a raw code to CN/MCI/AD; returns None for codes that are dropped (SMC)."""
    code = str(raw).strip().upper()
    if code not in _CANONICAL:
        raise ValueError(f"unknown diagnosis code {raw!r}")
    return _CANONICAL[code]


def canonical_visits(visits):
    """Drop SMC scans, merge MCI variants, sort by date."""
    out = []
    for v in visits:
        d = normalize_diagnosis(v.diagnosis)
        if d is not None:
            out.append(VisitRecord(v.subject_id, v.scan_id, v.acquisition_date, d, v.volume_path))
    return sorted(out, key=lambda v: (v.acquisition_date, v.scan_id))


def closest_diagnosis(scan_date, visit_dates, diagnoses):
    """Diagnosis of the visit nearest to ``scan_date``; equidistant ties go to the earlier visit."""
    if not visit_dates:
        raise ValueError("no visits to match against")
    best = min(range(len(visit_dates)), key=lambda i: (abs((visit_dates[i] - scan_date).days), visit_dates[i]))
    return diagnoses[best]


def _audit(subject_id, strategy, decision, scan_id=None, flags=()):
    return {"subject_id": subject_id, "strategy": strategy, "decision": decision, "scan_id": scan_id, "flags": list(flags)}


def label_visit953(visits, audit=None):
    """Binary AD/NonAD label with one scan per subject, or Excluded.

    Any AD diagnosis makes the subject AD (latest AD scan). Otherwise a subject
    whose first diagnosis is CN is NonAD (earliest CN scan). Everyone else
    (never AD, did not start as CN) is excluded.
    """
    if not visits:
        raise ValueError("empty visit list")
    subject = visits[0].subject_id
    seq = canonical_visits(visits)
    if not seq:
        result = Excluded(subject, "no scans after dropping SMC")
        _log(audit, _audit(subject, "visit953", "excluded"))
        return result
    flags = []
    ad = [v for v in seq if v.diagnosis == "AD"]
    if ad:
        if seq[-1].diagnosis != "AD":
            flags.append("non_ad_after_ad")
        pick = ad[-1]
        label = "AD"
    elif seq[0].diagnosis == "CN":
        pick = next(v for v in seq if v.diagnosis == "CN")
        label = "NonAD"
    else:
        _log(audit, _audit(subject, "visit953", "excluded"))
        return Excluded(subject, "neither converted to AD nor originated from CN")
    _log(audit, _audit(subject, "visit953", label, pick.scan_id, flags))
    return LabeledSample(subject, pick.scan_id, label, "visit953", pick.acquisition_date, pick.volume_path)


def label_last(visits, audit=None):
    """Every retained scan gets the subject's final canonical diagnosis."""
    if not visits:
        raise ValueError("empty visit list")
    subject = visits[0].subject_id
    seq = canonical_visits(visits)
    if not seq:
        _log(audit, _audit(subject, "last", "excluded"))
        return []
    label = seq[-1].diagnosis
    _log(audit, _audit(subject, "last", label, seq[-1].scan_id))
    return [LabeledSample(subject, v.scan_id, label, "last", v.acquisition_date, v.volume_path) for v in seq]


def _log(audit, record):
    if audit is not None:
        audit.append(record)


def group_by_subject(visits):
    groups = defaultdict(list)
    for v in visits:
        groups[v.subject_id].append(v)
    return dict(sorted(groups.items()))


def label_cohort(visits, strategy, audit=None):
    """Label every subject; returns a flat list of LabeledSample."""
    if strategy not in STRATEGIES:
        raise ValueError(f"labeling must be one of {STRATEGIES}, got {strategy!r}")
    out = []
    for _, vs in group_by_subject(visits).items():
        if strategy == "visit953":
            r = label_visit953(vs, audit)
            if isinstance(r, LabeledSample):
                out.append(r)
        else:
            out.extend(label_last(vs, audit))
    return out


def write_audit(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- manifest CSV ------------------------------------------------------------------
def read_manifest(path):
    visits = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                date = dt.date.fromisoformat(row["acquisition_date"])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad date {row['acquisition_date']!r}") from None
            if row["diagnosis"] not in RAW_DIAGNOSES:
                raise ManifestError(f"{path}:{lineno}: unknown diagnosis {row['diagnosis']!r}")
            visits.append(VisitRecord(row["subject_id"], row["scan_id"], date, row["diagnosis"], row["volume_path"]))
    return visits


def write_manifest(path, visits):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for v in visits:
            w.writerow([v.subject_id, v.scan_id, v.acquisition_date.isoformat(), v.diagnosis, v.volume_path])


# -- selection ----------------------------------------------------------------------
def first_scans(samples):
    """Keep each subject's earliest scan."""
    best = {}
    for s in samples:
        cur = best.get(s.subject_id)
        if cur is None or (s.acquisition_date, s.scan_id) < (cur.acquisition_date, cur.scan_id):
            best[s.subject_id] = s
    keep = {id(s) for s in best.values()}
    return [s for s in samples if id(s) in keep]


def select_samples(train, val, test, strategy):
    """Apply a sample-selection strategy to the three inventories."""
    if strategy not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}, got {strategy!r}")
    if strategy == "all":
        return list(train), list(val), list(test)
    val, test = first_scans(val), first_scans(test)
    if strategy == "first_w_train":
        train = first_scans(train)
    return list(train), val, test


# -- splitting ---------------------------------------------------------------------
@dataclass
class SplitPlan:
    folds: list  # list of sorted subject-id lists
    seed: int
    selection: str = "all"
    val_offset: int = 1
    assignments: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.folds)

    def round(self, f):
        """(train, val, test) subject sets for CV round ``f``."""
        test = set(self.folds[f])
        val = set(self.folds[(f + self.val_offset) % self.k])
        train = {s for i, fold in enumerate(self.folds) if i not in (f, (f + self.val_offset) % self.k) for s in fold}
        return train, val, test

    def split_samples(self, samples, f):
        train_s, val_s, test_s = self.round(f)
        train = [s for s in samples if s.subject_id in train_s]
        val = [s for s in samples if s.subject_id in val_s]
        test = [s for s in samples if s.subject_id in test_s]
        return select_samples(train, val, test, self.selection)


def stratified_subject_kfold(subject_labels, k=10, seed=0, selection="all", val_offset=1):
    """Deal each class's shuffled subjects round-robin over ``k`` folds.

    The dealing position carries over between classes, so fold sizes differ by
    at most one and per-class fold counts differ from n_c / k by less than one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_class = defaultdict(list)
    for subj, label in sorted(subject_labels.items()):
        by_class[label].append(subj)
    for label, subs in by_class.items():
        if len(subs) < k:
            raise ValueError(f"class {label!r} has {len(subs)} subjects, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    pos = 0
    for label in sorted(by_class):
        subs = by_class[label]
        for i in rng.permutation(len(subs)):
            folds[pos % k].append(subs[i])
            pos += 1
    folds = [sorted(f) for f in folds]
    assignments = {s: i for i, f in enumerate(folds) for s in f}
    return SplitPlan(folds, seed, selection, val_offset, assignments)


def subject_labels(samples):
    """subject -> label; raises if a subject carries two labels."""
    out = {}
    for s in samples:
        if out.setdefault(s.subject_id, s.label) != s.label:
            raise ValueError(f"subject {s.subject_id} has mixed labels")
    return out


def class_weights(counts):
    """Inverse-frequency weights w_c = N / (C * n_c)."""
    counts = dict(counts)
    if not counts:
        raise ValueError("no classes")
    for c, n in counts.items():
        if n <= 0:
            raise ValueError(f"class {c!r} has count {n}; weights need counts > 0")
    total = sum(counts.values())
    C = len(counts)
    return {c: total / (C * n) for c, n in counts.items()}


def label_counts(samples, classes):
    cnt = Counter(s.label for s in samples)
    return {c: cnt.get(c, 0) for c in classes}
