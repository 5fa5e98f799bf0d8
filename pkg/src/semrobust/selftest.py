"""First-class invariant battery behind `semrobust selftest`: gradient
checks on the shipped maps plus the algebraic identities the metrics rely
on. Fast smoke-sized instances; the test suite runs the full-size ones."""

import tempfile
from pathlib import Path

import numpy as np
import torch

from .attack import AttackConfig, pgd
from .diffcore import adam_init, adam_step, finite_diff_check
from .metrics import box_stats
from .protodl import _ProtoNet, overall_distance_D, rest_distance_R
from .senn import _SennNet, aggregate_logits


def _scalar_loss(fn, out_dim, seed):
    rng = np.random.default_rng(seed)
    w = torch.from_numpy(rng.standard_normal(out_dim))

    def loss(x):
        out = fn(x.reshape(1, -1))
        return (out.flatten().to(w.dtype) * w).sum()

    return loss


def _check_adam():
    w = {"w": torch.tensor([1.0], dtype=torch.float64)}
    state = adam_init(w)
    out, state2 = adam_step(w, {"w": torch.zeros(1, dtype=torch.float64)}, state)
    if float(out["w"][0]) != 1.0 or float(state2.m["w"][0]) != 0.0:
        return "zero gradients moved the parameters"
    out, _ = adam_step(w, {"w": w["w"].clone()}, state, lr=0.1)
    if not float(out["w"][0]) < 1.0:
        return "no descent on a quadratic"
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    state = adam_init(p)
    for _ in range(200):
        g = {"w": 2.0 * (p["w"] - 3.0)}
        p, state = adam_step(p, g, state, lr=0.1)
    if abs(float(p["w"][0]) - 3.0) > 0.05:
        return f"convergence miss: w={float(p['w'][0])}"
    return None


def _check_gradients():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    worst = {}
    senn = _SennNet(64, 4, 3, (4, 8), 16, "conv").double()
    proto = _ProtoNet(64, 5, 3, 6, (4, 8), 16, "conv", True).double()
    maps = {
        "senn.concepts": (senn.concepts, 4),
        "senn.logits": (senn.logits, 3),
        "senn.reconstruct": (lambda x: senn.reconstruct(senn.concepts(x)), 64),
        "proto.distances": (proto.distances, 5),
        "proto.logits": (proto.logits, 3),
        "proto.reconstruct": (lambda x: proto.decode(proto.encode(x)), 64),
    }
    for name, (fn, out_dim) in maps.items():
        errs = []
        for point in range(3):
            x = rng.uniform(0.05, 0.95, size=64)
            # h=3e-5 balances truncation against rounding noise on the
            # deep conv stacks, whose weakest input coordinate can carry a
            # ~1e-7 gradient
            errs.append(finite_diff_check(_scalar_loss(fn, out_dim, point), x, h=3e-5))
        worst[name] = max(errs)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    return f"gradient check failures: {bad}" if bad else None


def _check_aggregation():
    torch.manual_seed(1)
    net = _SennNet(16, 3, 4, (4, 8), 8, "dense")
    x = torch.rand(20, 16)
    with torch.no_grad():
        logits, h, th = net(x)
    recomposed = aggregate_logits(h.numpy(), th.numpy())
    err = np.abs(recomposed - logits.numpy().astype(np.float64)).max()
    return f"aggregation identity off by {err}" if err > 1e-6 else None


def _check_distance_algebra():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        m = int(rng.integers(2, 20))
        h = rng.uniform(0, 5, size=m)
        labels = rng.integers(0, 4, size=m)
        y = int(labels[rng.integers(m)])
        if (labels != y).all() or (labels == y).all():
            continue
        ny = int((labels == y).sum())
        nr = m - ny
        lhs = ny * overall_distance_D(h, labels, y) ** 2 \
            + nr * rest_distance_R(h, labels, y) ** 2
        rhs = float((h.astype(np.float64) ** 2).sum())
        if abs(lhs - rhs) > 1e-9 * max(rhs, 1.0):
            return f"distance algebra off: {lhs} vs {rhs}"
    return None


def _check_box_stats():
    rng = np.random.default_rng(3)
    values = rng.standard_normal(1000)
    s = box_stats(values)
    srt = np.sort(values)

    def hf8(p):
        # Hyndman-Fan type 8 plotting position, 1-indexed
        pos = (len(srt) + 1.0 / 3.0) * p + 1.0 / 3.0
        pos = min(max(pos, 1.0), float(len(srt)))
        lo = int(np.floor(pos))
        frac = pos - lo
        hi = min(lo + 1, len(srt))
        return srt[lo - 1] * (1 - frac) + srt[hi - 1] * frac

    for got, p in ((s.q1, 0.25), (s.median, 0.5), (s.q3, 0.75)):
        if abs(got - hf8(p)) > 1e-12:
            return f"quantile mismatch at p={p}"
    return None


def _check_idx_roundtrip():
    from .dataio import read_idx, write_idx

    rng = np.random.default_rng(4)
    with tempfile.TemporaryDirectory() as tmp:
        for arr in (rng.integers(0, 256, size=(3, 5, 5)).astype(np.uint8),
                    rng.standard_normal((4, 7)).astype(np.float32),
                    rng.standard_normal(9).astype(np.float64)):
            path = Path(tmp) / "roundtrip.idx"
            write_idx(path, arr)
            back = read_idx(path)
            if back.dtype != arr.dtype or not np.array_equal(back, arr):
                return f"round trip broke for {arr.dtype}"
    return None


def _check_pgd():
    peak = torch.tensor([0.6, 0.4, 0.5, 0.7], dtype=torch.float64)

    def objective(xb):
        return -((xb - peak) ** 2).sum(dim=1)

    x0 = np.array([[0.2, 0.9, 0.1, 0.8]])
    cfg = AttackConfig(epsilon=0.3, steps=50, step_size=0.02)
    res = pgd(objective, x0, cfg, sense="maximize")
    if np.abs(res.x - x0).max() > cfg.epsilon + 1e-9:
        return "left the epsilon ball"
    if res.x.min() < 0 or res.x.max() > 1:
        return "left the pixel box"
    if (res.trace[:, 0] > res.value[0] + 1e-12).any():
        return "a visited iterate beat the reported best"
    frozen = pgd(objective, x0, AttackConfig(epsilon=0.0, steps=10, step_size=0.02),
                 sense="maximize")
    if not np.array_equal(frozen.x, x0):
        return "epsilon=0 moved the input"
    return None


CHECKS = [
    ("adaptive-moment optimizer", _check_adam),
    ("finite-difference gradient agreement", _check_gradients),
    ("additive aggregation identity", _check_aggregation),
    ("prototype distance algebra", _check_distance_algebra),
    ("box statistics vs sorted-array oracle", _check_box_stats),
    ("idx round trip", _check_idx_roundtrip),
    ("pgd ball and best-iterate invariants", _check_pgd),
]


def run_selftest():
    failures = 0
    for name, check in CHECKS:
        detail = check()
        if detail is None:
            print(f"PASS {name}")
        else:
            failures += 1
            print(f"FAIL {name}: {detail}")
    return failures
