from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest

from semrobust import metrics
from semrobust.attack import AttackRecord
from semrobust.dataio import Dataset
from semrobust.errors import (AllPrototypesSameLabel, EmptyInput, NoPeer,
                              NoPreservedRecord)


def _identity_model():
    # concepts are the raw pixels, so distances are hand-computable
    return SimpleNamespace(concepts=lambda X: np.atleast_2d(np.asarray(X, np.float64)))


def _ds(H, labels):
    return Dataset(images=np.asarray(H, np.float32),
                   labels=np.asarray(labels, np.int64), split_tag="test")


def test_in_class_distance_duplicate_is_zero():
    test = _ds([[1, 2], [5, 5], [1, 2]], [0, 1, 0])
    d = metrics.in_class_distance(np.array([1.0, 2.0]), 0, test, _identity_model())
    assert d == 0.0


def test_in_class_distance_hand_case():
    # three same-label candidates at distances 5, 2, 7
    test = _ds([[3, 4], [2, 0], [0, 7], [9, 9]], [1, 1, 1, 2])
    d = metrics.in_class_distance(np.array([0.0, 0.0]), 1, test, _identity_model())
    assert d == pytest.approx(2.0)


def test_in_class_distance_excludes_self():
    test = _ds([[0, 0], [3, 4]], [1, 1])
    d = metrics.in_class_distance(test.images[0], 1, test, _identity_model(),
                                  exclude_index=0)
    assert d == pytest.approx(5.0)


def test_in_class_distance_no_peer():
    test = _ds([[0, 0]], [1])
    with pytest.raises(NoPeer):
        metrics.in_class_distance(test.images[0], 1, test, _identity_model(),
                                  exclude_index=0)


def test_out_class_distance_identical_pair_is_zero():
    test = _ds([[2, 2], [9, 9]], [0, 1])
    d = metrics.out_class_distance(np.array([2.0, 2.0]), 1, test, _identity_model())
    assert d == 0.0


def test_out_class_distance_hand_case_and_min_property():
    test = _ds([[1, 0], [0, 3], [6, 6]], [0, 0, 1])
    x = np.array([0.0, 0.0])
    d = metrics.out_class_distance(x, 1, test, _identity_model())
    assert d == pytest.approx(1.0)
    for row in test.images[test.labels != 1]:
        assert d <= np.linalg.norm(row - x) + 1e-12


def test_concept_distance_records_batched_agrees_with_single():
    rng = np.random.default_rng(0)
    H = rng.uniform(0, 1, size=(30, 3))
    labels = rng.integers(0, 3, size=30)
    test = _ds(H, labels)
    model = _identity_model()
    records = metrics.concept_distance_records(model, test, [4, 9])
    assert [r.kind for r in records] == ["in_class", "out_class"] * 2
    single_in = metrics.in_class_distance(test.images[4], labels[4], test,
                                          model, exclude_index=4)
    single_out = metrics.out_class_distance(test.images[4], labels[4], test, model)
    assert records[0].value == pytest.approx(single_in)
    assert records[1].value == pytest.approx(single_out)


def _rec(h_distance=None, preserved=None, summary=None, status="ok"):
    return AttackRecord(kind="senn", example_id=0, status=status,
                        label_preserved=preserved, h_distance=h_distance,
                        target_summary=summary)


def test_adv_out_class_single_record():
    assert metrics.adv_out_class_distance([_rec(h_distance=0.7, preserved=True)]) == 0.7


def test_adv_out_class_two_target_hand_case():
    rec = _rec(summary=[[3, 0.9, True], [8, 0.4, True], [5, 0.1, False]])
    assert metrics.adv_out_class_distance([rec]) == pytest.approx(0.4)


def test_adv_out_class_requires_preserved():
    rec = _rec(summary=[[3, 0.9, False]])
    with pytest.raises(NoPreservedRecord):
        metrics.adv_out_class_distance([rec])
    with pytest.raises(NoPreservedRecord):
        metrics.adv_out_class_distance([_rec(status="skipped")])


def _proto_stub(H, proto_labels, preds=None):
    H = np.asarray(H, np.float64)
    return SimpleNamespace(
        prototype_distances=lambda X: H[:np.atleast_2d(X).shape[0]],
        proto_labels_=np.asarray(proto_labels),
        predict=lambda X: np.asarray(preds)[:np.atleast_2d(X).shape[0]],
    )


def test_consistency_rate_collapsing_encoder_is_one():
    # every example's smallest distance falls on its own class prototype
    H = np.array([[0.0, 5, 5], [5, 0.0, 5], [5, 5, 0.0]])
    ds = _ds(np.zeros((3, 4)), [0, 1, 2])
    model = _proto_stub(H, [0, 1, 2], preds=[0, 1, 2])
    assert metrics.consistency_rate(model, ds) == 1.0
    assert metrics.consistency_rate(model, ds, use_pred=True) == 1.0


def test_consistency_rate_bounds_and_ties():
    # tie between prototypes 0 and 1 resolves to the lowest index
    H = np.array([[1.0, 1.0], [0.2, 0.1]])
    ds = _ds(np.zeros((2, 4)), [0, 1])
    model = _proto_stub(H, [0, 1], preds=[0, 1])
    rate = metrics.consistency_rate(model, ds)
    assert rate == pytest.approx(1.0)
    ds_wrong = _ds(np.zeros((2, 4)), [1, 0])
    assert metrics.consistency_rate(model, ds_wrong) == 0.0


def test_overall_distance_records_hand_case():
    H = np.array([[3.0, 4.0, 1.0, 2.0]])
    model = _proto_stub(H, [0, 0, 1, 1])
    records = metrics.overall_distance_records(model, np.zeros((1, 4), np.float32),
                                               [0], [17], adversarial=False)
    assert len(records) == 2
    by_kind = {r.kind: r for r in records}
    assert by_kind["D_correct"].value == pytest.approx(np.sqrt(12.5))
    assert by_kind["D_min_wrong"].value == pytest.approx(np.sqrt(2.5))
    assert by_kind["D_correct"].example_id == 17


def test_overall_distance_records_adversarial_kinds_and_count():
    rng = np.random.default_rng(1)
    H = rng.uniform(0, 2, size=(5, 4))
    model = _proto_stub(H, [0, 0, 1, 2])
    records = metrics.overall_distance_records(model, np.zeros((5, 4), np.float32),
                                               [0, 1, 2, 0, 1], np.arange(5),
                                               adversarial=True)
    assert len(records) == 10
    assert {r.kind for r in records} == {"D_adv_correct", "D_adv_min_wrong"}


def test_overall_distance_records_single_label_degenerate():
    model = _proto_stub(np.ones((1, 3)), [4, 4, 4])
    with pytest.raises(AllPrototypesSameLabel):
        metrics.overall_distance_records(model, np.zeros((1, 4), np.float32),
                                         [4], [0], adversarial=False)


# --- box stats -----------------------------------------------------------------

def test_box_stats_singleton():
    s = metrics.box_stats([5.0])
    assert (s.min, s.q1, s.median, s.q3, s.max, s.count) == (5, 5, 5, 5, 5, 1)


def test_box_stats_even_median():
    assert metrics.box_stats([1, 2, 3, 4]).median == pytest.approx(2.5)


def test_box_stats_against_sorted_array_oracle():
    rng = np.random.default_rng(42)
    values = rng.standard_normal(1000)
    s = metrics.box_stats(values)
    srt = np.sort(values)

    def quantile_hf8(p):
        pos = (len(srt) + 1 / 3) * p + 1 / 3
        pos = min(max(pos, 1.0), float(len(srt)))
        lo = int(np.floor(pos))
        frac = pos - lo
        hi = min(lo + 1, len(srt))
        return srt[lo - 1] * (1 - frac) + srt[hi - 1] * frac

    assert s.q1 == pytest.approx(quantile_hf8(0.25), abs=1e-12)
    assert s.median == pytest.approx(quantile_hf8(0.5), abs=1e-12)
    assert s.q3 == pytest.approx(quantile_hf8(0.75), abs=1e-12)
    assert s.min == srt[0] and s.max == srt[-1] and s.count == 1000


def test_box_stats_empty():
    with pytest.raises(EmptyInput):
        metrics.box_stats([])


def test_distance_record_validation():
    with pytest.raises(ValueError):
        metrics.DistanceRecord(kind="bogus", value=1.0, example_id=0)
    with pytest.raises(ValueError):
        metrics.DistanceRecord(kind="in_class", value=-0.5, example_id=0)


# --- csv -------------------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    records = [metrics.DistanceRecord(kind="in_class", value=float(v),
                                      example_id=i,
                                      aux_id=(i if i % 2 else None))
               for i, v in enumerate(rng.uniform(0, 2, size=20))]
    path = tmp_path / "d.csv"
    metrics.write_distance_csv(path, records)
    assert path.read_text().splitlines()[0] == "example_id,aux_id,kind,value"
    back = metrics.read_distance_csv(path)
    assert len(back) == 20
    for a, b in zip(records, back):
        assert a.value == b.value  # repr() round-trips floats exactly
        assert a.aux_id == b.aux_id


def test_summary_lines():
    records = [metrics.DistanceRecord("in_class", 1.0, 0),
               metrics.DistanceRecord("in_class", 2.0, 1),
               metrics.DistanceRecord("out_class", 3.0, 0)]
    lines = metrics.format_summary_lines(metrics.summarize_by_kind(records))
    assert any(line.startswith("in_class ") for line in lines)
    assert any(line.startswith("out_class ") for line in lines)
