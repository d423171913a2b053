import datetime as dt
import itertools
import json
import re
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from adbench.labeling import (
    Excluded, LabeledSample, ManifestError, VisitRecord, class_weights, closest_diagnosis, first_scans,
    label_cohort, label_last, label_visit953, normalize_diagnosis, read_manifest, select_samples,
    stratified_subject_kfold, subject_labels, write_audit, write_manifest,
)


def visits(codes, subject="s1", start=2006):
    return [VisitRecord(subject, f"{subject}-v{i}", dt.date(start + 2 * i, 3, 1), c, f"{subject}-v{i}.vol.json")
            for i, c in enumerate(codes)]


# Rule table, written against a one-letter string encoding of the sequence.
# First matching rule wins; the group marks which visit supplies the scan.
RULES = [
    (re.compile(r"^.*(A)"), "AD"),  # any AD: the last one
    (re.compile(r"^(C)"), "NonAD"),  # CN origin: the first visit, which is CN
    (re.compile(r"^"), None),  # everything else excluded
]


def oracle(codes):
    s = "".join({"CN": "C", "MCI": "M", "AD": "A"}[c] for c in codes)
    for pattern, label in RULES:
        m = pattern.search(s)
        if m:
            return ("Excluded", None) if label is None else (label, m.start(1))


ALL_SEQUENCES = [seq for n in (1, 2, 3) for seq in itertools.product(("CN", "MCI", "AD"), repeat=n)]


def test_enumeration_size():
    assert len(ALL_SEQUENCES) == 39


@pytest.mark.parametrize("seq", ALL_SEQUENCES, ids="-".join)
def test_visit953_matches_rule_table(seq):
    want_label, want_idx = oracle(seq)
    got = label_visit953(visits(seq))
    if want_label == "Excluded":
        assert isinstance(got, Excluded)
    else:
        assert isinstance(got, LabeledSample)
        assert (got.label, got.scan_id) == (want_label, f"s1-v{want_idx}")


def test_visit953_examples():
    assert label_visit953(visits(["CN", "MCI", "AD"])).scan_id == "s1-v2"
    r = label_visit953(visits(["CN", "MCI"]))
    assert (r.label, r.scan_id) == ("NonAD", "s1-v0")
    assert isinstance(label_visit953(visits(["MCI", "MCI"])), Excluded)


def test_visit953_latest_ad_scan_and_flag():
    audit = []
    r = label_visit953(visits(["MCI", "AD", "AD", "MCI"]), audit)
    assert (r.label, r.scan_id) == ("AD", "s1-v2")
    assert audit[0]["flags"] == ["non_ad_after_ad"]


def test_visit953_raw_codes_merge_and_smc_drop():
    r = label_visit953(visits(["SMC", "CN", "EMCI", "LMCI"]))
    assert (r.label, r.scan_id) == ("NonAD", "s1-v1")
    assert isinstance(label_visit953(visits(["SMC"])), Excluded)


def test_empty_visits_error():
    with pytest.raises(ValueError):
        label_visit953([])
    with pytest.raises(ValueError):
        label_last([])


@pytest.mark.parametrize("raw,want", [("EMCI", "MCI"), ("LMCI", "MCI"), ("MCI", "MCI"), ("SMC", None), ("CN", "CN"), ("AD", "AD")])
def test_normalize_diagnosis(raw, want):
    assert normalize_diagnosis(raw) == want


def test_unknown_code_named():
    with pytest.raises(ValueError, match="XYZ"):
        normalize_diagnosis("XYZ")


def test_label_last_examples():
    assert {s.label for s in label_last(visits(["CN", "MCI"]))} == {"MCI"}
    assert [s.label for s in label_last(visits(["AD"]))] == ["AD"]
    out = label_last(visits(["CN", "EMCI", "LMCI"]))
    assert [s.label for s in out] == ["MCI"] * 3


@given(st.lists(st.sampled_from(["CN", "SMC", "EMCI", "MCI", "LMCI", "AD"]), min_size=1, max_size=6))
def test_label_last_never_mixes(codes):
    labels = {s.label for s in label_last(visits(codes))}
    assert len(labels) <= 1


def test_closest_diagnosis_tie_prefers_earlier():
    dates = [dt.date(2010, 1, 1), dt.date(2010, 1, 11)]
    assert closest_diagnosis(dt.date(2010, 1, 6), dates, ["CN", "MCI"]) == "CN"
    assert closest_diagnosis(dt.date(2010, 1, 7), dates, ["CN", "MCI"]) == "MCI"


# -- manifest and audit ---------------------------------------------------------------
def test_manifest_round_trip(tmp_path):
    vs = visits(["CN", "EMCI", "AD"]) + visits(["SMC"], subject="s2")
    path = tmp_path / "manifest.csv"
    write_manifest(path, vs)
    assert open(path).readline().strip() == "subject_id,scan_id,acquisition_date,diagnosis,volume_path"
    assert read_manifest(path) == vs


def test_manifest_errors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("subject_id,scan_id,acquisition_date,diagnosis,volume_path\ns,a,2010-13-01,CN,x\n")
    with pytest.raises(ManifestError, match="bad date"):
        read_manifest(path)
    path.write_text("subject_id,scan_id,acquisition_date,diagnosis,volume_path\ns,a,2010-01-01,XX,x\n")
    with pytest.raises(ManifestError, match="diagnosis"):
        read_manifest(path)
    path.write_text("subject,scan\n")
    with pytest.raises(ManifestError, match="header"):
        read_manifest(path)


def test_audit_jsonl(tmp_path):
    audit = []
    label_cohort(visits(["CN"]) + visits(["MCI"], subject="s2"), "visit953", audit)
    write_audit(tmp_path / "a.jsonl", audit)
    rows = [json.loads(line) for line in open(tmp_path / "a.jsonl")]
    assert [r["decision"] for r in rows] == ["NonAD", "excluded"]


# -- selection ----------------------------------------------------------------------
def _samples(subjects=3, scans=2):
    out = []
    for s in range(subjects):
        for i in range(scans):
            out.append(LabeledSample(f"s{s}", f"s{s}-v{i}", "CN", "last", dt.date(2006 + 2 * i, 1, 1)))
    return out


def test_first_keeps_earliest_in_val_test():
    train, val, test = select_samples(_samples(), _samples(), _samples(), "first")
    assert len(train) == 6
    assert all(s.acquisition_date.year == 2006 for s in val + test) and len(test) == 3


def test_first_w_train_one_scan_per_subject():
    train, val, test = select_samples(_samples(), _samples(), _samples(), "first_w_train")
    assert Counter(s.subject_id for s in train) == {"s0": 1, "s1": 1, "s2": 1}


def test_all_is_identity():
    inv = _samples()
    assert select_samples(inv, inv, inv, "all") == (inv, inv, inv)


def test_first_scans_order_independent():
    inv = _samples()
    assert set(s.scan_id for s in first_scans(inv[::-1])) == {"s0-v0", "s1-v0", "s2-v0"}


# -- k-fold -----------------------------------------------------------------------------
def test_kfold_ten_and_ten():
    labels = {f"ad{i}": "AD" for i in range(10)} | {f"cn{i}": "CN" for i in range(10)}
    plan = stratified_subject_kfold(labels, k=10, seed=3)
    for fold in plan.folds:
        assert sorted(labels[s] for s in fold) == ["AD", "CN"]


@given(st.dictionaries(st.text("abcdefgh", min_size=3, max_size=6), st.sampled_from(["AD", "CN", "MCI"]), min_size=30, max_size=80),
       st.integers(2, 5), st.integers(0, 1000))
def test_kfold_partition_and_balance(labels, k, seed):
    counts = Counter(labels.values())
    if min(counts.values()) < k:
        with pytest.raises(ValueError):
            stratified_subject_kfold(labels, k, seed)
        return
    plan = stratified_subject_kfold(labels, k, seed)
    flat = [s for f in plan.folds for s in f]
    assert sorted(flat) == sorted(labels) and len(set(flat)) == len(flat)
    for c, n in counts.items():
        per_fold = [sum(labels[s] == c for s in f) for f in plan.folds]
        assert all(abs(x - n / k) < 1 for x in per_fold)
    assert stratified_subject_kfold(labels, k, seed).folds == plan.folds


def test_round_roles():
    labels = {f"s{i}": "A" if i % 2 else "B" for i in range(20)}
    plan = stratified_subject_kfold(labels, k=5, seed=0)
    train, val, test = plan.round(4)
    assert test == set(plan.folds[4]) and val == set(plan.folds[0])
    assert not (train & val) and not (train & test) and len(train) == 12


def test_kfold_too_few():
    with pytest.raises(ValueError, match="fewer than k"):
        stratified_subject_kfold({"a": "AD", "b": "CN"}, k=2)


def test_mixed_subject_labels_rejected():
    with pytest.raises(ValueError):
        subject_labels([LabeledSample("s", "a", "CN", "last"), LabeledSample("s", "b", "AD", "last")])


# -- class weights --------------------------------------------------------------------------
def test_class_weights_cohort_counts():
    w = class_weights({"AD": 486, "NonAD": 467})
    assert w["AD"] == pytest.approx(953 / 972, rel=1e-12)
    assert w["NonAD"] == pytest.approx(953 / 934, rel=1e-12)
    assert round(w["AD"], 4) == 0.9805 and round(w["NonAD"], 4) == 1.0203


def test_class_weights_balanced_and_scale_invariant():
    assert class_weights({"a": 5, "b": 5, "c": 5}) == {"a": 1.0, "b": 1.0, "c": 1.0}
    assert class_weights({"a": 3, "b": 7}) == pytest.approx(class_weights({"a": 6, "b": 14}))


@given(st.dictionaries(st.sampled_from("abcd"), st.integers(1, 1000), min_size=2))
def test_class_weights_minority_largest(counts):
    w = class_weights(counts)
    assert min(counts, key=counts.get) in [c for c in w if w[c] == max(w.values())]
    assert sum(w[c] * n for c, n in counts.items()) == pytest.approx(sum(counts.values()))


def test_class_weights_zero_count():
    with pytest.raises(ValueError):
        class_weights({"a": 0, "b": 1})
