"""Distance statistics and consistency measures over concept vectors and
prototype distances, plus box-plot summaries and the CSV record format."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (AllPrototypesSameLabel, EmptyInput, NoPeer,
                     NoPreservedRecord)
from .protodl import overall_distance_D, rest_distance_R  # noqa: F401  (re-export)

KINDS = ("in_class", "out_class", "adv_out_class",
         "D_correct", "D_min_wrong", "D_adv_correct", "D_adv_min_wrong")

# Quartile convention used everywhere: linear interpolation with the
# median-unbiased plotting positions (Hyndman-Fan type 8).
QUANTILE_METHOD = "median_unbiased"


@dataclass
class DistanceRecord:
    kind: str
    value: float
    example_id: int
    aux_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("distances are non-negative")


@dataclass
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    count: int


def box_stats(values):
    """Five-number summary with median-unbiased interpolated quartiles."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("no values to summarize")
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return BoxStats(min=float(values.min()), q1=float(q1), median=float(med),
                    q3=float(q3), max=float(values.max()), count=int(values.size))


# --- concept-space pair distances --------------------------------------------

def _min_pair_distance(h_x, H_pool, mask):
    if not mask.any():
        raise NoPeer("no candidate with the required label relation")
    diffs = H_pool[mask].astype(np.float64) - h_x.astype(np.float64)
    return float(np.sqrt((diffs ** 2).sum(axis=1)).min())


def in_class_distance(x, y, test, model, exclude_index=None):
    """min over same-label test examples x_t != x of ||h(x) - h(x_t)||_2.
    Pass exclude_index when x itself sits in the test split."""
    h_x = model.concepts(np.atleast_2d(x))[0]
    H = model.concepts(test.images)
    mask = test.labels == y
    if exclude_index is not None:
        mask = mask.copy()
        mask[exclude_index] = False
    return _min_pair_distance(h_x, H, mask)


def out_class_distance(x, y, test, model):
    """min over differently-labeled test examples x_t of ||h(x) - h(x_t)||_2."""
    h_x = model.concepts(np.atleast_2d(x))[0]
    H = model.concepts(test.images)
    return _min_pair_distance(h_x, H, test.labels != y)


def concept_distance_records(model, test, example_ids):
    """Batched in-class / out-class minima for the given test indices,
    against the whole test split (self-pairs excluded)."""
    H = model.concepts(test.images).astype(np.float64)
    records = []
    for i in example_ids:
        i = int(i)
        d2 = ((H - H[i]) ** 2).sum(axis=1)
        same = test.labels == test.labels[i]
        same[i] = False
        diff = test.labels != test.labels[i]
        if not same.any() or not diff.any():
            raise NoPeer(f"example {i} lacks a same- or different-label peer")
        records.append(DistanceRecord("in_class", float(np.sqrt(d2[same].min())), i))
        records.append(DistanceRecord("out_class", float(np.sqrt(d2[diff].min())), i))
    return records


def adv_out_class_distance(records):
    """min over an example's label-preserved attack records of the
    adversarial concept distance to the record's target."""
    values = []
    for rec in records:
        if rec.status != "ok":
            continue
        if rec.target_summary:
            values.extend(d for _, d, preserved in rec.target_summary if preserved)
        elif rec.label_preserved and rec.h_distance is not None:
            values.append(rec.h_distance)
    if not values:
        raise NoPreservedRecord("no label-preserved record for this example")
    return float(min(values))


# --- prototype-space statistics -----------------------------------------------

def overall_distance_matrix(H, proto_labels):
    """Per-example D(x, c) for every class c that owns a prototype.
    Returns (class_values, D) with D of shape [n, n_present_classes]."""
    H = np.asarray(H, dtype=np.float64)
    proto_labels = np.asarray(proto_labels)
    classes = np.unique(proto_labels)
    cols = [np.sqrt((H[:, proto_labels == c] ** 2).mean(axis=1)) for c in classes]
    return classes, np.stack(cols, axis=1)


def overall_distance_records(model, images, labels, example_ids, adversarial):
    """Per example: D at the true label and min D over the other labels,
    tagged adversarial or natural."""
    classes, D = overall_distance_matrix(model.prototype_distances(images),
                                         model.proto_labels_)
    if classes.size < 2:
        raise AllPrototypesSameLabel("need prototypes of >= 2 labels")
    kind_c = "D_adv_correct" if adversarial else "D_correct"
    kind_w = "D_adv_min_wrong" if adversarial else "D_min_wrong"
    records = []
    for row, (i, y) in enumerate(zip(example_ids, labels)):
        col = np.searchsorted(classes, y)
        if col >= classes.size or classes[col] != y:
            raise NoPeer(f"label {y} has no prototype")
        wrong = np.delete(D[row], col)
        records.append(DistanceRecord(kind_c, float(D[row, col]), int(i)))
        records.append(DistanceRecord(kind_w, float(wrong.min()), int(i)))
    return records


def consistency_rate(model, ds, use_pred=False, images=None):
    """Fraction of examples whose nearest prototype (lowest index on ties)
    carries the reference label: the prediction if use_pred, else the true
    label. Pass `images` to score adversarial pixels against ds.labels."""
    X = ds.images if images is None else images
    h = model.prototype_distances(X)
    nearest_label = model.proto_labels_[h.argmin(axis=1)]
    ref = model.predict(X) if use_pred else ds.labels
    return float((nearest_label == ref).mean())


# --- CSV + summary io -----------------------------------------------------------

CSV_HEADER = ["example_id", "aux_id", "kind", "value"]


def write_distance_csv(path, records):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for rec in records:
            aux = "" if rec.aux_id is None else rec.aux_id
            writer.writerow([rec.example_id, aux, rec.kind, repr(rec.value)])


def read_distance_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        for example_id, aux, kind, value in reader:
            records.append(DistanceRecord(
                kind=kind, value=float(value), example_id=int(example_id),
                aux_id=int(aux) if aux else None))
    return records


def summarize_by_kind(records):
    """BoxStats per kind, in KINDS order, for the kinds present."""
    out = {}
    for kind in KINDS:
        values = [r.value for r in records if r.kind == kind]
        if values:
            out[kind] = box_stats(values)
    return out


def format_summary_lines(stats_by_kind):
    lines = [f"# quartiles: linear interpolation, {QUANTILE_METHOD} convention"]
    lines.append("kind min q1 median q3 max count")
    for kind, s in stats_by_kind.items():
        lines.append(f"{kind} {s.min:.6g} {s.q1:.6g} {s.median:.6g} "
                     f"{s.q3:.6g} {s.max:.6g} {s.count}")
    return lines
