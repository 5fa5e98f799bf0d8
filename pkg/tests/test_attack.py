import copy
import hashlib
import json
import time
import warnings

import numpy as np
import numpy.testing as npt
import pytest
import torch

from semrobust import attack, protodl, senn
from semrobust.dataio import Dataset
from semrobust.errors import InsufficientTargets, KindMismatch


@pytest.fixture(scope="module")
def senn_model(tiny_xy):
    X, y = tiny_xy
    return senn.SennClassifier(n_concepts=3, hidden_dim=12, arch="dense",
                               epochs=3, batch_size=32, seed=1).fit(X, y)


@pytest.fixture(scope="module")
def proto_model(tiny_xy):
    X, y = tiny_xy
    model = protodl.PrototypeClassifier(n_prototypes=6, latent_dim=4,
                                        hidden_dim=12, arch="dense",
                                        epochs=3, batch_size=32, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return model.fit(X, y)


@pytest.fixture(scope="module")
def tiny_ds(tiny_xy):
    X, y = tiny_xy
    return Dataset(images=X, labels=y, split_tag="test")


# --- pgd engine ----------------------------------------------------------------

def _bowl(peak):
    peak_t = torch.as_tensor(peak, dtype=torch.float64)

    def objective(xb):
        return -((xb - peak_t) ** 2).sum(dim=1)

    return objective


def test_pgd_zero_steps_returns_input():
    x0 = np.array([[0.3, 0.8]])
    res = attack.pgd(_bowl([0.9, 0.1]), x0, attack.AttackConfig(steps=0), "maximize")
    npt.assert_array_equal(res.x, x0)
    assert res.trace.shape == (1, 1)


def test_pgd_zero_epsilon_pins_iterates():
    x0 = np.array([[0.3, 0.8]])
    cfg = attack.AttackConfig(epsilon=0.0, steps=5, step_size=0.1)
    res = attack.pgd(_bowl([0.9, 0.1]), x0, cfg, "maximize")
    npt.assert_array_equal(res.x, x0)


def test_pgd_feasibility_and_best_iterate():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(0, 1, size=(4, 6))
    cfg = attack.AttackConfig(epsilon=0.25, steps=40, step_size=0.02, seed=1,
                              random_start=True)
    res = attack.pgd(_bowl(rng.uniform(0, 1, size=6)), x0, cfg, "maximize")
    assert np.abs(res.x - x0).max() <= cfg.epsilon + 1e-9
    assert res.x.min() >= 0.0 and res.x.max() <= 1.0
    for b in range(4):
        assert (res.trace[:, b] <= res.value[b] + 1e-12).all()


def test_pgd_minimize_sense():
    x0 = np.array([[0.52, 0.48]])
    cfg = attack.AttackConfig(epsilon=0.4, steps=60, step_size=0.02)
    res = attack.pgd(_bowl([0.5, 0.5]), x0, cfg, "minimize")
    # minimizing the bowl objective walks away from the peak
    assert res.value[0] < -0.1


def test_pgd_nonfinite_objective_aborts_with_flag():
    x0 = np.array([[0.5, 0.5]])

    def objective(xb):
        vals = xb.sum(dim=1)
        # poisoned away from the start point
        return torch.where(vals > 1.0001, torch.full_like(vals, float("nan")), vals)

    cfg = attack.AttackConfig(epsilon=0.3, steps=10, step_size=0.25)
    res = attack.pgd(objective, x0, cfg, "maximize")
    assert res.non_finite
    assert np.isfinite(res.value).all()
    npt.assert_array_equal(res.x, x0)


def test_pgd_bad_sense():
    with pytest.raises(ValueError):
        attack.pgd(_bowl([0.5]), np.array([[0.5]]), attack.AttackConfig(), "sideways")


def test_attack_config_validation():
    with pytest.raises(ValueError):
        attack.AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        attack.AttackConfig(steps=-1)
    with pytest.raises(ValueError):
        attack.AttackConfig(steps=5, step_size=0.0)


# --- objective composition -------------------------------------------------------

def _softmax_ce(logits, y):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[y])


def test_senn_objective_matches_composed_terms(senn_model, tiny_xy):
    X, y = tiny_xy
    net = copy.deepcopy(senn_model.net_).double()
    h_t = net.concepts(torch.from_numpy(X[5][None, :]).double()).detach().numpy()
    y_index = int(np.searchsorted(senn_model.classes_, y[0]))
    objective = attack.senn_objective(net, h_t, y_index, lam=0.7)
    x = torch.from_numpy(X[0][None, :]).double()
    with torch.no_grad():
        got = float(objective(x)[0])
    with torch.no_grad():
        h = net.concepts(x)[0].numpy()
        logits = net.logits(x)[0].numpy()
    expect = float(np.linalg.norm(h - h_t[0])) + 0.7 * _softmax_ce(logits, y_index)
    assert got == pytest.approx(expect, abs=1e-9)


def test_proto_objective_matches_composed_terms(proto_model, tiny_xy):
    X, y = tiny_xy
    net = copy.deepcopy(proto_model.net_).double()
    Y = proto_model.proto_labels_
    y0 = int(y[3])
    y_index = int(np.searchsorted(proto_model.classes_, y0))
    objective = attack.proto_objective(net, Y, y0, y_index,
                                       lam=1.0, xi=0.5, alpha=0.01)
    x = torch.from_numpy(X[3][None, :]).double()
    with torch.no_grad():
        got = float(objective(x)[0])
    with torch.no_grad():
        h = net.distances(x)[0].numpy()
        logits = (net.distances(x) @ net.head.t().double())[0].numpy()
    expect = (protodl.interp_loss_Lh(h, Y, y0, 1.0)
              - 0.5 * _softmax_ce(logits, y_index)
              - 0.01 * float(np.linalg.norm(h)))
    assert got == pytest.approx(expect, abs=1e-9)


# --- 4-pixel toy vs exhaustive grid (both objectives) ----------------------------

def _grid_eval(objective, x0, epsilon, resolution=0.01, chunk=200000):
    lo = np.maximum(x0 - epsilon, 0.0)
    hi = np.minimum(x0 + epsilon, 1.0)
    axes = [np.arange(lo[d], hi[d] + 1e-12, resolution) for d in range(x0.size)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, x0.size)
    best_min, best_max = np.inf, -np.inf
    with torch.no_grad():
        for s in range(0, len(mesh), chunk):
            vals = objective(torch.from_numpy(mesh[s:s + chunk]))
            vals = vals.to(torch.float64).numpy()
            best_min = min(best_min, float(vals.min()))
            best_max = max(best_max, float(vals.max()))
    return best_min, best_max, len(mesh)


@pytest.fixture(scope="module")
def toy4(tiny_xy):
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 1, size=(80, 4)).astype(np.float32)
    y = (X[:, 0] + 2 * X[:, 1] > X[:, 2] + 2 * X[:, 3]).astype(np.int64)
    return X, y


def test_pgd_vs_grid_targeted_objective(toy4):
    X, y = toy4
    start = time.monotonic()
    model = senn.SennClassifier(n_concepts=2, hidden_dim=8, arch="dense",
                                epochs=3, batch_size=20, seed=0).fit(X, y)
    x0 = X[0].astype(np.float64)
    target = X[int(np.flatnonzero(y != y[0])[0])]
    h_t = model.concepts(target[None, :])
    y_index = int(np.searchsorted(model.classes_, y[0]))
    objective = attack.senn_objective(model.net_, h_t, y_index, lam=1.0)
    cfg = attack.AttackConfig(epsilon=0.3, steps=100, step_size=0.01)
    res = attack.pgd(objective, x0[None, :], cfg, "minimize")
    grid_min, _, n_points = _grid_eval(objective, x0, cfg.epsilon)
    assert n_points > 10 ** 6
    assert float(res.value[0]) <= grid_min + 0.05 * abs(grid_min)
    assert time.monotonic() - start < 60.0


def test_pgd_vs_grid_untargeted_objective(toy4):
    X, y = toy4
    start = time.monotonic()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = protodl.PrototypeClassifier(n_prototypes=4, latent_dim=3,
                                            hidden_dim=8, arch="dense",
                                            epochs=3, batch_size=20,
                                            seed=0).fit(X, y)
    if np.unique(model.proto_labels_).size < 2:
        pytest.skip("toy prototypes collapsed onto one label")
    x0 = X[1].astype(np.float64)
    y0 = int(y[1])
    y_index = int(np.searchsorted(model.classes_, y0))
    objective = attack.proto_objective(model.net_, model.proto_labels_, y0,
                                       y_index, lam=1.0, xi=1.0, alpha=0.01)
    cfg = attack.AttackConfig(epsilon=0.3, steps=100, step_size=0.01)
    res = attack.pgd(objective, x0[None, :], cfg, "maximize")
    _, grid_max, _ = _grid_eval(objective, x0, cfg.epsilon)
    assert float(res.value[0]) >= grid_max - 0.05 * abs(grid_max)
    assert time.monotonic() - start < 60.0


# --- single-input attacks ---------------------------------------------------------

def test_attack_senn_zero_epsilon_keeps_natural_distance(senn_model, tiny_xy):
    X, y = tiny_xy
    target = int(np.flatnonzero(y != y[0])[0])
    cfg = attack.AttackConfig(epsilon=0.0, steps=5, step_size=0.01)
    rec = attack.attack_senn(senn_model, X[0], int(y[0]), X[target], cfg,
                             example_id=0, target_id=target)
    assert rec.h_distance == pytest.approx(rec.h_distance_nat, abs=1e-9)
    npt.assert_allclose(rec.x_adv, X[0].astype(np.float64), atol=1e-12)


def test_attack_senn_extreme_label_weight_preserves_confidence(senn_model, tiny_xy):
    X, y = tiny_xy
    target = int(np.flatnonzero(y != y[2])[0])
    y_index = int(np.searchsorted(senn_model.classes_, y[2]))
    cfg = attack.AttackConfig(epsilon=0.3, steps=40, step_size=0.01, lam=1e6)
    rec = attack.attack_senn(senn_model, X[2], int(y[2]), X[target], cfg)
    ce_nat = _softmax_ce(senn_model.decision_function(X[2][None, :])[0], y_index)
    ce_adv = _softmax_ce(
        senn_model.decision_function(rec.x_adv.astype(np.float32)[None, :])[0],
        y_index)
    assert ce_adv - ce_nat <= 0.01


def test_attack_proto_zero_steps_keeps_interp_loss(proto_model, tiny_xy):
    X, y = tiny_xy
    cfg = attack.AttackConfig(epsilon=0.3, steps=0, step_size=0.01)
    rec = attack.attack_proto(proto_model, X[4], int(y[4]), cfg)
    assert rec.D_adv == pytest.approx(rec.D_nat, abs=1e-9)
    assert rec.R_adv == pytest.approx(rec.R_nat, abs=1e-9)


def test_attack_proto_zero_weights_reduce_to_interp_loss(proto_model, tiny_xy):
    X, y = tiny_xy
    net = proto_model.net_
    Y = proto_model.proto_labels_
    y0 = int(y[6])
    y_index = int(np.searchsorted(proto_model.classes_, y0))
    full = attack.proto_objective(net, Y, y0, y_index, lam=1.0, xi=0.0, alpha=0.0)

    yy = torch.as_tensor([y0])
    Yt = torch.as_tensor(np.asarray(Y))

    def lh_only(xb):
        h = net.distances(xb.to(torch.float32))
        mask_y = (Yt[None, :] == yy.expand(xb.shape[0])[:, None]).to(h.dtype)
        mask_r = 1.0 - mask_y
        d_val = torch.sqrt((h * h * mask_y).sum(dim=1) / mask_y.sum(dim=1))
        r_val = torch.sqrt((h * h * mask_r).sum(dim=1) / mask_r.sum(dim=1))
        return d_val - r_val

    cfg = attack.AttackConfig(epsilon=0.2, steps=15, step_size=0.02)
    res_full = attack.pgd(full, X[6][None, :], cfg, "maximize")
    res_lh = attack.pgd(lh_only, X[6][None, :], cfg, "maximize")
    npt.assert_array_equal(res_full.trace, res_lh.trace)
    npt.assert_array_equal(res_full.x, res_lh.x)


def test_attack_kind_mismatch(senn_model, proto_model, tiny_xy):
    X, y = tiny_xy
    cfg = attack.AttackConfig(steps=1)
    with pytest.raises(KindMismatch):
        attack.attack_senn(proto_model, X[0], int(y[0]), X[1], cfg)
    with pytest.raises(KindMismatch):
        attack.attack_proto(senn_model, X[0], int(y[0]), cfg)


# --- target selection --------------------------------------------------------------

def test_select_targets_single_candidate():
    ds = Dataset(images=np.zeros((2, 4), np.float32),
                 labels=np.array([0, 1], np.int64), split_tag="test")
    idx = attack.select_targets(0, ds, n=1, seed=0)
    npt.assert_array_equal(idx, [1])


def test_select_targets_all_differently_labeled(tiny_ds):
    idx = attack.select_targets(1, tiny_ds, n=20, seed=3)
    assert (tiny_ds.labels[idx] != 1).all()
    assert len(set(idx.tolist())) == 20


def test_select_targets_deterministic(tiny_ds):
    a = attack.select_targets(0, tiny_ds, n=15, seed=9)
    b = attack.select_targets(0, tiny_ds, n=15, seed=9)
    npt.assert_array_equal(a, b)


def test_select_targets_insufficient(tiny_ds):
    with pytest.raises(InsufficientTargets):
        attack.select_targets(0, tiny_ds, n=10 ** 6, seed=0)


# --- suite --------------------------------------------------------------------------

def _suite_digest(records):
    from dataclasses import asdict

    payload = []
    for r in records:
        d = asdict(r)
        d["x_nat"] = None if r.x_nat is None else hashlib.sha256(
            np.ascontiguousarray(r.x_nat).tobytes()).hexdigest()
        d["x_adv"] = None if r.x_adv is None else hashlib.sha256(
            np.ascontiguousarray(np.asarray(r.x_adv, np.float64)).tobytes()).hexdigest()
        payload.append(d)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def test_suite_counts_and_feasibility(senn_model, tiny_ds):
    cfg = attack.AttackConfig(epsilon=0.3, steps=4, step_size=0.05, seed=0)
    ids = np.array([0, 3, 7, 11])
    records = attack.run_attack_suite(senn_model, tiny_ds, cfg, "senn",
                                      n_targets=8, example_ids=ids)
    assert len(records) == 4
    for rec in records:
        assert rec.status == "ok"
        assert rec.linf <= cfg.epsilon + 1e-9
        assert np.asarray(rec.x_adv).min() >= 0.0
        assert np.asarray(rec.x_adv).max() <= 1.0
        assert len(rec.target_summary) == 8
        preserved = [d for _, d, p in rec.target_summary if p]
        pool = preserved if preserved else [d for _, d, _ in rec.target_summary]
        assert rec.h_distance == min(pool)


def test_suite_skips_when_targets_insufficient(senn_model, tiny_xy):
    X, y = tiny_xy
    small = Dataset(images=X[:4], labels=y[:4], split_tag="test")
    cfg = attack.AttackConfig(steps=1, step_size=0.05)
    records = attack.run_attack_suite(senn_model, small, cfg, "senn",
                                      n_targets=50)
    assert len(records) == 4
    assert all(r.status == "skipped" for r in records)


def test_suite_deterministic_digest(senn_model, tiny_ds):
    cfg = attack.AttackConfig(epsilon=0.2, steps=3, step_size=0.05, seed=5)
    ids = np.array([1, 2, 5])
    a = attack.run_attack_suite(senn_model, tiny_ds, cfg, "senn",
                                n_targets=6, example_ids=ids)
    b = attack.run_attack_suite(senn_model, tiny_ds, cfg, "senn",
                                n_targets=6, example_ids=ids)
    assert _suite_digest(a) == _suite_digest(b)


def test_proto_suite_records(proto_model, tiny_ds):
    cfg = attack.AttackConfig(epsilon=0.3, steps=5, step_size=0.05)
    ids = np.arange(10)
    records = attack.run_attack_suite(proto_model, tiny_ds, cfg, "proto",
                                      example_ids=ids)
    assert len(records) == 10
    covered = set(np.unique(proto_model.proto_labels_).tolist())
    for rec in records:
        if rec.true_label in covered:
            assert rec.status == "ok"
            assert rec.linf <= cfg.epsilon + 1e-9
            assert rec.label_preserved == (rec.pred_adv == rec.pred_nat)
        else:
            assert rec.status == "skipped"


def test_records_roundtrip(tmp_path, senn_model, tiny_ds):
    cfg = attack.AttackConfig(epsilon=0.2, steps=2, step_size=0.05)
    records = attack.run_attack_suite(senn_model, tiny_ds, cfg, "senn",
                                      n_targets=5, example_ids=np.array([0, 9]))
    attack.save_records(records, tmp_path / "records.jsonl",
                        tmp_path / "nat.idx", tmp_path / "adv.idx")
    back = attack.load_records(tmp_path / "records.jsonl",
                               tmp_path / "nat.idx", tmp_path / "adv.idx")
    assert len(back) == len(records)
    for orig, loaded in zip(records, back):
        assert loaded.example_id == orig.example_id
        assert loaded.aux_id == orig.aux_id
        assert loaded.h_distance == orig.h_distance
        assert loaded.target_summary == [[t, d, p] for t, d, p in orig.target_summary]
        npt.assert_array_equal(np.asarray(loaded.x_adv),
                               np.asarray(orig.x_adv, np.float64))
