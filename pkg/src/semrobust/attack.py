"""Projected sign-gradient attacks on explanations.

Two objectives over the L-infinity ball intersected with the pixel box:

* targeted (concept models): pull the concept vector h(x*) toward the
  concept vector of a differently-labeled target image while a
  cross-entropy term holds the prediction at the natural label
  (minimized);
* untargeted (prototype models): push the prototype distances of the
  predicted label up and the others down, again with a cross-entropy
  anchor and a norm regularizer (maximized).

PGD iterates are kept in float64 (the model runs in its own precision
inside the objective), so the emitted images satisfy the ball and box
constraints to well below the 1e-9 reporting tolerance.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import read_idx, write_idx
from .errors import (AllPrototypesSameLabel, FeasibilityViolation,
                     InsufficientTargets, KindMismatch, NoPrototypeForLabel)
from .protodl import PrototypeClassifier
from .senn import SennClassifier
from .validation import check_images

FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of one attack run.

    lam weights the cross-entropy anchor in the targeted objective and the
    other-label distance R inside D - lam*R in the untargeted one; xi and
    alpha only apply to the untargeted objective.
    """

    epsilon: float = 0.3
    steps: int = 100
    step_size: float = 0.01
    lam: float = 1.0
    xi: float = 1.0
    alpha: float = 0.01
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when steps > 0")


@dataclass
class PgdResult:
    x: np.ndarray        # [B, D] float64, best iterate per row
    value: np.ndarray    # [B] objective at the best iterate
    trace: np.ndarray    # [n_evals, B] objective at every visited iterate
    non_finite: bool


def pgd(objective, x0, cfg, sense="maximize", x_start=None):
    """Iterate x <- clip(x +/- step_size * sign(grad objective)) inside the
    epsilon-ball around x0 and the [0, 1] box; return the best iterate seen.

    `objective` maps a float64 torch tensor [B, D] to per-row values [B].
    A non-finite objective or gradient aborts the run; the best finite
    iterate so far comes back with non_finite=True.
    """
    if sense not in ("maximize", "minimize"):
        raise ValueError(f"unknown sense {sense!r}")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    lo = np.maximum(x0 - cfg.epsilon, 0.0)
    hi = np.minimum(x0 + cfg.epsilon, 1.0)
    if x_start is not None:
        x = np.clip(np.atleast_2d(np.asarray(x_start, dtype=np.float64)), lo, hi)
    elif cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        x = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), lo, hi)
    else:
        x = x0.copy()
    direction = 1.0 if sense == "maximize" else -1.0

    best_x = x.copy()
    best_v = np.full(x0.shape[0], -np.inf)
    trace = []
    non_finite = False
    for step in range(cfg.steps + 1):
        needs_grad = step < cfg.steps
        xt = torch.from_numpy(x)
        if needs_grad:
            xt.requires_grad_(True)
        values = objective(xt)
        v = values.detach().to(torch.float64).numpy().copy()
        if not np.isfinite(v).all():
            non_finite = True
            break
        trace.append(v)
        signed = direction * v
        improved = signed > best_v
        best_v = np.where(improved, signed, best_v)
        best_x[improved] = x[improved]
        if needs_grad:
            (g,) = torch.autograd.grad(values.sum(), xt)
            g = g.detach().to(torch.float64).numpy()
            if not np.isfinite(g).all():
                non_finite = True
                break
            x = np.clip(x + direction * cfg.step_size * np.sign(g), lo, hi)
    return PgdResult(x=best_x, value=best_v * direction,
                     trace=np.asarray(trace), non_finite=non_finite)


# --- objectives ---------------------------------------------------------------

def senn_objective(net, h_target, y_class_index, lam):
    """Per-row ||h(x) - h_target||_2 + lam * CE(logits(x), y). Minimize it."""
    dtype = next(net.parameters()).dtype
    ht = torch.as_tensor(np.asarray(h_target), dtype=dtype)
    yt = torch.as_tensor(np.asarray(y_class_index), dtype=torch.long)

    def objective(xb):
        xb = xb.to(dtype)
        h = net.concepts(xb)
        logits = torch.einsum("bk,bkc->bc", h, net.relevances(xb))
        dist = torch.linalg.vector_norm(h - ht, dim=1)
        yy = yt.expand(xb.shape[0]) if yt.ndim == 0 else yt
        return dist + lam * F.cross_entropy(logits, yy, reduction="none")

    return objective


def proto_objective(net, proto_labels, y_label, y_class_index, lam, xi, alpha):
    """Per-row D(x, y) - lam*R(x, y) - xi*CE(logits(x), y) - alpha*||h(x)||_2.
    Maximize it."""
    dtype = next(net.parameters()).dtype
    Y = torch.as_tensor(np.asarray(proto_labels))
    y_label = torch.as_tensor(np.asarray(y_label))
    yt = torch.as_tensor(np.asarray(y_class_index), dtype=torch.long)
    if not (Y[None] == y_label.reshape(-1, 1)).any(dim=1).all():
        raise NoPrototypeForLabel("an attacked label has no prototype")
    if not (Y[None] != y_label.reshape(-1, 1)).any(dim=1).all():
        raise AllPrototypesSameLabel("no prototype with a different label")

    def objective(xb):
        xb = xb.to(dtype)
        h = net.distances(xb)
        logits = h @ net.head.t()
        yy_label = y_label.expand(xb.shape[0]) if y_label.ndim == 0 else y_label
        yy = yt.expand(xb.shape[0]) if yt.ndim == 0 else yt
        mask_y = (Y[None, :] == yy_label[:, None]).to(dtype)
        mask_r = 1.0 - mask_y
        d_val = torch.sqrt((h * h * mask_y).sum(dim=1) / mask_y.sum(dim=1))
        r_val = torch.sqrt((h * h * mask_r).sum(dim=1) / mask_r.sum(dim=1))
        ce = F.cross_entropy(logits, yy, reduction="none")
        return (d_val - lam * r_val - xi * ce
                - alpha * torch.linalg.vector_norm(h, dim=1))

    return objective


# --- records ------------------------------------------------------------------

@dataclass
class AttackRecord:
    kind: str
    example_id: int
    status: str = "ok"              # "ok" | "skipped"
    reason: str = ""
    aux_id: int | None = None       # chosen target index (targeted attack)
    true_label: int | None = None
    pred_nat: int | None = None
    pred_adv: int | None = None
    label_preserved: bool | None = None
    h_nat: list | None = None
    h_adv: list | None = None
    h_distance: float | None = None      # ||h(x*) - h(x_t)|| at the chosen target
    h_distance_nat: float | None = None  # ||h(x) - h(x_t)|| at the same target
    theta_shift: float | None = None     # Frobenius shift of the relevance scores
    D_nat: float | None = None
    R_nat: float | None = None
    D_adv: float | None = None
    R_adv: float | None = None
    objective_best: float | None = None
    objective_trace: list = field(default_factory=list)
    linf: float | None = None
    non_finite: bool = False
    target_summary: list | None = None   # [[target_id, h_distance, preserved], ...]
    x_nat: np.ndarray | None = None      # images live in companion IDX files
    x_adv: np.ndarray | None = None


def _check_feasibility(x_adv, x_nat, epsilon):
    """Hard per-record check of the ball and box constraints."""
    x_nat = np.asarray(x_nat, dtype=np.float64)
    linf = np.abs(x_adv - x_nat).max(axis=-1)
    if (linf > epsilon + FEASIBILITY_TOL).any():
        raise FeasibilityViolation(f"linf {linf.max()} exceeds {epsilon}")
    if x_adv.size and (x_adv.min() < 0.0 or x_adv.max() > 1.0):
        raise FeasibilityViolation("pixels left [0, 1]")
    return linf


def _require_kind(model, kind):
    if kind == "senn":
        if not isinstance(model, SennClassifier):
            raise KindMismatch(f"expected a SennClassifier, got {type(model).__name__}")
    elif kind == "proto":
        if not isinstance(model, PrototypeClassifier):
            raise KindMismatch(f"expected a PrototypeClassifier, got {type(model).__name__}")
    else:
        raise KindMismatch(f"unknown attack kind {kind!r}")


def select_targets(y, test, n=100, seed=0, exclude_index=None):
    """Uniformly random indices of test examples whose label differs from y.
    Deterministic per seed; raises InsufficientTargets when fewer than n exist."""
    pool = np.flatnonzero(test.labels != y)
    if exclude_index is not None:
        pool = pool[pool != exclude_index]
    if pool.size < n:
        raise InsufficientTargets(f"{pool.size} candidates for {n} targets")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=n, replace=False))


def attack_senn(model, x, y, x_target, cfg, example_id=-1, target_id=None):
    """Targeted concept-matching attack on a single input."""
    _require_kind(model, "senn")
    x = check_images(x, model.n_features_in_)
    x_target = check_images(x_target, model.n_features_in_)
    h_t = model.concepts(x_target)
    target_ids = np.array([target_id if target_id is not None else -1])
    return _senn_attack_batch(model, x[0], int(y), target_ids, h_t, cfg, example_id)


def _senn_attack_batch(model, x_nat, y, target_ids, h_targets, cfg, example_id):
    """Run the targeted attack against every target at once (one PGD batch);
    return the record for the best target by adversarial concept distance,
    preferring label-preserved rows."""
    net = model.net_
    n = h_targets.shape[0]
    x0 = np.repeat(x_nat[None, :], n, axis=0)
    y_index = int(np.searchsorted(model.classes_, y))
    objective = senn_objective(net, h_targets, y_index, cfg.lam)
    res = pgd(objective, x0, cfg, sense="minimize")
    linf = _check_feasibility(res.x, x_nat, cfg.epsilon)

    h_nat, th_nat = model.explain(x_nat[None, :])
    pred_nat = int(model.predict(x_nat[None, :])[0])
    h_adv, th_adv = model.explain(res.x)
    preds_adv = model.predict(res.x)
    dist_adv = np.linalg.norm(h_adv.astype(np.float64) - h_targets.astype(np.float64), axis=1)
    dist_nat = np.linalg.norm(h_nat.astype(np.float64) - h_targets.astype(np.float64), axis=1)
    preserved = preds_adv == pred_nat

    pick_pool = np.flatnonzero(preserved) if preserved.any() else np.arange(n)
    pick = int(pick_pool[dist_adv[pick_pool].argmin()])
    summary = [[int(t), float(d), bool(p)]
               for t, d, p in zip(target_ids, dist_adv, preserved)]
    theta_shift = float(np.linalg.norm(
        th_adv[pick].astype(np.float64) - th_nat[0].astype(np.float64)))
    return AttackRecord(
        kind="senn",
        example_id=int(example_id),
        aux_id=int(target_ids[pick]),
        true_label=int(y),
        pred_nat=pred_nat,
        pred_adv=int(preds_adv[pick]),
        label_preserved=bool(preserved[pick]),
        h_nat=h_nat[0].astype(float).tolist(),
        h_adv=h_adv[pick].astype(float).tolist(),
        h_distance=float(dist_adv[pick]),
        h_distance_nat=float(dist_nat[pick]),
        theta_shift=theta_shift,
        objective_best=float(res.value[pick]),
        objective_trace=res.trace[:, pick].astype(float).tolist(),
        linf=float(linf[pick]),
        non_finite=res.non_finite,
        target_summary=summary,
        x_nat=x_nat.copy(),
        x_adv=res.x[pick].copy(),
    )


def attack_proto(model, x, y, cfg, example_id=-1):
    """Untargeted interpretation-inconsistency attack on a single input."""
    _require_kind(model, "proto")
    x = check_images(x, model.n_features_in_)
    return _proto_attack_batch(model, x, np.asarray([int(y)]), cfg,
                               np.asarray([example_id]))[0]


def _proto_attack_batch(model, x_nat, y, cfg, example_ids):
    from .protodl import overall_distance_D, rest_distance_R

    net = model.net_
    Y = model.proto_labels_
    y_index = np.searchsorted(model.classes_, y)
    objective = proto_objective(net, Y, y, y_index, cfg.lam, cfg.xi, cfg.alpha)
    res = pgd(objective, x_nat, cfg, sense="maximize")
    linf = _check_feasibility(res.x, x_nat, cfg.epsilon)

    h_nat = model.prototype_distances(x_nat)
    h_adv = model.prototype_distances(res.x)
    preds_nat = model.predict(x_nat)
    preds_adv = model.predict(res.x)
    records = []
    for i in range(x_nat.shape[0]):
        records.append(AttackRecord(
            kind="proto",
            example_id=int(example_ids[i]),
            true_label=int(y[i]),
            pred_nat=int(preds_nat[i]),
            pred_adv=int(preds_adv[i]),
            label_preserved=bool(preds_adv[i] == preds_nat[i]),
            h_nat=h_nat[i].astype(float).tolist(),
            h_adv=h_adv[i].astype(float).tolist(),
            D_nat=overall_distance_D(h_nat[i], Y, y[i]),
            R_nat=rest_distance_R(h_nat[i], Y, y[i]),
            D_adv=overall_distance_D(h_adv[i], Y, y[i]),
            R_adv=rest_distance_R(h_adv[i], Y, y[i]),
            objective_best=float(res.value[i]),
            objective_trace=res.trace[:, i].astype(float).tolist(),
            linf=float(linf[i]),
            non_finite=res.non_finite,
            x_nat=np.asarray(x_nat[i], dtype=np.float64),
            x_adv=res.x[i].copy(),
        ))
    return records


def run_attack_suite(model, dataset, cfg, kind, n_targets=100, example_ids=None,
                     proto_chunk=128, progress=None):
    """One attack per selected example (all of `dataset` by default;
    `example_ids` restricts the attacked set while targets still come from
    the whole dataset). Targeted runs try all n_targets targets per example
    in one batched PGD and keep the best one; per-example failures become
    flagged skip records, so the output always has one entry per example."""
    _require_kind(model, kind)
    if example_ids is None:
        example_ids = np.arange(dataset.n)
    example_ids = np.asarray(example_ids, dtype=np.int64)
    records = []
    if kind == "senn":
        H_pool = model.concepts(dataset.images)
        for done, i in enumerate(example_ids):
            i = int(i)
            y = int(dataset.labels[i])
            seed_i = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
            try:
                targets = select_targets(y, dataset, n=n_targets, seed=seed_i,
                                         exclude_index=i)
            except InsufficientTargets as exc:
                records.append(AttackRecord(kind=kind, example_id=i,
                                            status="skipped", reason=str(exc),
                                            true_label=y))
                continue
            records.append(_senn_attack_batch(
                model, dataset.images[i], y, targets, H_pool[targets], cfg, i))
            if progress:
                progress(done + 1, example_ids.size)
    else:
        have_protos = np.unique(model.proto_labels_)
        if have_protos.size < 2:
            raise AllPrototypesSameLabel("attack needs prototypes of >= 2 labels")
        ok = np.isin(dataset.labels[example_ids], have_protos)
        for start in range(0, example_ids.size, proto_chunk):
            idx = example_ids[start:start + proto_chunk]
            good = idx[ok[start:start + proto_chunk]]
            chunk_records = {}
            if good.size:
                batch = _proto_attack_batch(model, dataset.images[good],
                                            dataset.labels[good], cfg, good)
                chunk_records = {r.example_id: r for r in batch}
            for i in idx:
                i = int(i)
                if i in chunk_records:
                    records.append(chunk_records[i])
                else:
                    records.append(AttackRecord(
                        kind=kind, example_id=i, status="skipped",
                        reason="no prototype carries this label",
                        true_label=int(dataset.labels[i])))
            if progress:
                progress(min(start + proto_chunk, example_ids.size), example_ids.size)
    return records


# --- serialization ------------------------------------------------------------

def save_records(records, records_path, nat_images_path=None, adv_images_path=None):
    """Write one JSON object per line; images go to companion float64 IDX
    files with one row per record (zeros for skipped records)."""
    records_path = Path(records_path)
    with open(records_path, "w") as f:
        for rec in records:
            d = asdict(rec)
            d.pop("x_nat")
            d.pop("x_adv")
            f.write(json.dumps(d, sort_keys=True) + "\n")
    dim = next((r.x_nat.size for r in records if r.x_nat is not None), 0)
    if nat_images_path is not None:
        nat = np.stack([
            np.asarray(r.x_nat, dtype=np.float64) if r.x_nat is not None
            else np.zeros(dim) for r in records]) if records else np.zeros((0, dim))
        write_idx(nat_images_path, nat)
    if adv_images_path is not None:
        adv = np.stack([
            np.asarray(r.x_adv, dtype=np.float64) if r.x_adv is not None
            else np.zeros(dim) for r in records]) if records else np.zeros((0, dim))
        write_idx(adv_images_path, adv)


def load_records(records_path, nat_images_path=None, adv_images_path=None):
    records = []
    with open(records_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(AttackRecord(**json.loads(line)))
    nat = read_idx(nat_images_path) if nat_images_path else None
    adv = read_idx(adv_images_path) if adv_images_path else None
    for i, rec in enumerate(records):
        if rec.status == "ok":
            if nat is not None:
                rec.x_nat = nat[i]
            if adv is not None:
                rec.x_adv = adv[i]
    return records
