"""Command-line surface.

Subcommands: data-verify, train, attack, eval, report, selftest. A run
directory (--out) collects one subdirectory per stage; every stage writes
its resolved configuration, the toolkit version, seeds and the dataset
checksums next to its outputs, which is enough to re-run bit-identically.

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 data/artifact
error, 4 training divergence.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import (AttackConfig, load_records, run_attack_suite,
                     save_records)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .dataio import (load_raw_dataset, normalize, sha256_file,
                     stratified_indices, subsample, verify_checksum_manifest,
                     write_pgm)
from .dataio import Dataset
from .errors import (BadMagic, ChecksumMismatch, ConfigError,
                     DivergedTraining, FeasibilityViolation,
                     InsufficientTargets, KindMismatch, MissingArtifact,
                     NoPeer, NoPreservedRecord, NTooLarge, TruncatedFile)
from .metrics import (DistanceRecord, adv_out_class_distance, box_stats,
                      concept_distance_records, consistency_rate,
                      format_summary_lines, overall_distance_records,
                      read_distance_csv, summarize_by_kind,
                      write_distance_csv)
from .protodl import PrototypeClassifier, export_prototypes
from .senn import (SennClassifier, build_concept_gallery, export_gallery,
                   local_lipschitz)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_DATA_ERRORS = (BadMagic, TruncatedFile, ChecksumMismatch, NTooLarge,
                MissingArtifact, KindMismatch, InsufficientTargets, NoPeer,
                NoPreservedRecord, FeasibilityViolation)


# --- shared plumbing ---------------------------------------------------------

def _resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "model", None):
        cfg.set("model.kind", args.model)
    if getattr(args, "workers", None) is not None:
        cfg.set("run.workers", args.workers)
    if getattr(args, "seed", None) is not None:
        cfg.set_master_seed(args.seed)
    if cfg["model.kind"] not in ("senn", "proto"):
        raise ConfigError(f"model.kind must be senn or proto, got {cfg['model.kind']!r}")
    return cfg


def _stage_dir(args, stage):
    d = Path(args.out) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_stage_manifest(stage_dir, cfg, extra=None):
    (stage_dir / "resolved.cfg").write_text(cfg.render())
    lines = [f"toolkit_version {__version__}",
             f"config_digest {cfg.digest()}",
             f"data_seed {cfg['data.seed']}",
             f"train_seed {cfg['train.seed']}",
             f"attack_seed {cfg['attack.seed']}",
             f"lipschitz_seed {cfg['lipschitz.seed']}",
             f"workers {cfg['run.workers']}"]
    manifest = Path(cfg["data.dir"]) / cfg["data.checksums"]
    if manifest.exists():
        lines.append("dataset_checksums:")
        lines += ["  " + ln for ln in manifest.read_text().splitlines() if ln.strip()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    (stage_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _load_splits(cfg):
    data_dir = Path(cfg["data.dir"])
    verify_checksum_manifest(data_dir, cfg["data.checksums"])
    train_raw = load_raw_dataset(data_dir / cfg["data.train_images"],
                                 data_dir / cfg["data.train_labels"])
    test_raw = load_raw_dataset(data_dir / cfg["data.test_images"],
                                data_dir / cfg["data.test_labels"])
    train = subsample(normalize(train_raw, "train"), cfg["data.n_train"],
                      cfg["data.seed"])
    test = subsample(normalize(test_raw, "test"), cfg["data.n_test"],
                     cfg["data.seed"])
    return train, test


def _build_model(cfg):
    kind = cfg["model.kind"]
    if kind == "senn":
        return SennClassifier(
            n_concepts=cfg["senn.n_concepts"],
            hidden_dim=cfg["senn.hidden_dim"],
            conv_channels=cfg.conv_channels("senn"),
            stability_weight=cfg["senn.stability_weight"],
            recon_weight=cfg["senn.recon_weight"],
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            lr=cfg["train.lr"],
            seed=cfg["train.seed"])
    return PrototypeClassifier(
        n_prototypes=cfg["proto.n_prototypes"],
        latent_dim=cfg["proto.latent_dim"],
        hidden_dim=cfg["proto.hidden_dim"],
        conv_channels=cfg.conv_channels("proto"),
        squared_distances=cfg["proto.squared_distances"],
        recon_weight=cfg["proto.recon_weight"],
        ground_proto_weight=cfg["proto.ground_proto_weight"],
        ground_data_weight=cfg["proto.ground_data_weight"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        seed=cfg["train.seed"])


def _attack_config(cfg):
    return AttackConfig(epsilon=cfg["attack.epsilon"],
                        steps=cfg["attack.steps"],
                        step_size=cfg["attack.step_size"],
                        lam=cfg["attack.lam"],
                        xi=cfg["attack.xi"],
                        alpha=cfg["attack.alpha"],
                        seed=cfg["attack.seed"],
                        random_start=cfg["attack.random_start"])


def _fmt(value):
    return f"{value:.6f}" if isinstance(value, float) else str(value)


# --- subcommands ---------------------------------------------------------------

def cmd_data_verify(cfg, args):
    data_dir = Path(cfg["data.dir"])
    digests = verify_checksum_manifest(data_dir, cfg["data.checksums"])
    train_raw = load_raw_dataset(data_dir / cfg["data.train_images"],
                                 data_dir / cfg["data.train_labels"])
    test_raw = load_raw_dataset(data_dir / cfg["data.test_images"],
                                data_dir / cfg["data.test_labels"])
    print(f"checksums ok for {len(digests)} files in {data_dir}")
    print(f"train: {train_raw.n} examples, test: {test_raw.n} examples")
    return EXIT_OK


def cmd_train(cfg, args):
    out = _stage_dir(args, "train")
    train, test = _load_splits(cfg)
    missing = np.setdiff1d(np.arange(10), np.unique(train.labels))
    if missing.size:
        print(f"warning: classes {missing.tolist()} absent from the training subset",
              file=sys.stderr)
    model = _build_model(cfg)
    model.fit(train.images, train.labels)
    accuracy = float(model.score(test.images, test.labels))
    kind = cfg["model.kind"]
    metrics = {"kind": kind, "accuracy": accuracy,
               "final_loss": model.history_[-1]["loss"],
               "train_examples": train.n, "test_examples": test.n}
    if kind == "senn":
        metrics["n_concepts"] = model.n_concepts
    else:
        metrics["n_prototypes"] = model.n_prototypes
        metrics["label_coverage"] = int(np.unique(model.proto_labels_).size)
    save_checkpoint(out / "checkpoint.zip", model,
                    config_digest=cfg.digest(), metrics=metrics)
    line = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(metrics.items()))
    (out / "metrics.txt").write_text(line + "\n")
    if kind == "senn":
        gallery = build_concept_gallery(model, train.images, cfg["senn.gallery_m"])
        export_gallery(gallery, train.images, out / "gallery")
    else:
        export_prototypes(model, out / "prototypes")
    _write_stage_manifest(out, cfg, {"accuracy": _fmt(accuracy)})
    print(f"trained {kind}: test accuracy {accuracy:.4f} -> {out / 'checkpoint.zip'}")
    return EXIT_OK


def cmd_attack(cfg, args):
    out = _stage_dir(args, "attack")
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "train" / "checkpoint.zip"
    model, manifest = load_checkpoint(ckpt)
    kind = cfg["model.kind"]
    if manifest["kind"] != kind:
        raise KindMismatch(f"checkpoint is {manifest['kind']!r}, run asks {kind!r}")
    _, test = _load_splits(cfg)
    acfg = _attack_config(cfg)
    n_examples = min(cfg["attack.n_examples"], test.n)
    ids = stratified_indices(test.labels, n_examples, cfg["data.seed"])
    records = run_attack_suite(model, test, acfg, kind,
                               n_targets=cfg["attack.n_targets"],
                               example_ids=ids)
    save_records(records, out / "records.jsonl",
                 out / "nat_images.idx", out / "adv_images.idx")
    ok = [r for r in records if r.status == "ok"]
    preserved = [r for r in ok if r.label_preserved]
    attack_manifest = {
        "kind": kind,
        "epsilon": acfg.epsilon,
        "steps": acfg.steps,
        "step_size": acfg.step_size,
        "lam": acfg.lam,
        "xi": acfg.xi,
        "alpha": acfg.alpha,
        "seed": acfg.seed,
        "random_start": acfg.random_start,
        "n_targets": cfg["attack.n_targets"] if kind == "senn" else None,
        "n_records": len(records),
        "n_ok": len(ok),
        "n_preserved": len(preserved),
        "preserved_rate": (len(preserved) / len(ok)) if ok else None,
        "checkpoint": str(ckpt),
        "records_digest": sha256_file(out / "records.jsonl"),
    }
    (out / "attack_manifest.json").write_text(
        json.dumps(attack_manifest, indent=1, sort_keys=True) + "\n")
    _write_stage_manifest(out, cfg, {"n_records": len(records)})
    rate = attack_manifest["preserved_rate"]
    print(f"attacked {len(records)} examples "
          f"(label preserved: {rate if rate is None else f'{rate:.3f}'}) -> {out}")
    return EXIT_OK


def _senn_eval(model, test, records, cfg):
    ok = [r for r in records if r.status == "ok"]
    ids = [r.example_id for r in ok]
    base = concept_distance_records(model, test, ids)
    filtered = list(base)
    unfiltered = list(base)
    for r in ok:
        entries = r.target_summary or []
        preserved_vals = [(d, t) for t, d, p in entries if p]
        all_vals = [(d, t) for t, d, p in entries]
        if preserved_vals:
            d, t = min(preserved_vals)
            filtered.append(DistanceRecord("adv_out_class", d, r.example_id, int(t)))
        if all_vals:
            d, t = min(all_vals)
            unfiltered.append(DistanceRecord("adv_out_class", d, r.example_id, int(t)))
    theta_shifts = np.asarray([r.theta_shift for r in ok if r.theta_shift is not None])
    extra = []
    if theta_shifts.size:
        s = box_stats(theta_shifts)
        extra.append(f"theta_shift_median {s.median:.6g}")
        extra.append(f"theta_shift_max {s.max:.6g}")
    return filtered, unfiltered, extra


def _proto_eval(model, test, records, cfg):
    ok = [r for r in records if r.status == "ok"]
    preserved = [r for r in ok if r.label_preserved]
    ids = np.asarray([r.example_id for r in ok], dtype=np.int64)
    labels = np.asarray([r.true_label for r in ok], dtype=np.int64)
    clean = overall_distance_records(model, test.images[ids], labels, ids,
                                     adversarial=False)

    def adv_records(subset):
        if not subset:
            return []
        imgs = np.stack([r.x_adv for r in subset]).astype(np.float32)
        sub_ids = [r.example_id for r in subset]
        sub_labels = [r.true_label for r in subset]
        return overall_distance_records(model, imgs, sub_labels, sub_ids,
                                        adversarial=True)

    filtered = clean + adv_records(preserved)
    unfiltered = clean + adv_records(ok)

    extra = [f"consistency_clean_true {consistency_rate(model, test):.6f}",
             f"consistency_clean_pred {consistency_rate(model, test, use_pred=True):.6f}"]
    if preserved:
        adv_imgs = np.stack([r.x_adv for r in preserved]).astype(np.float32)
        adv_ds = Dataset(images=adv_imgs,
                         labels=np.asarray([r.true_label for r in preserved]),
                         split_tag="adv")
        extra.append(f"consistency_adv_true {consistency_rate(model, adv_ds):.6f}")
        extra.append(f"consistency_adv_pred "
                     f"{consistency_rate(model, adv_ds, use_pred=True):.6f}")
    convention = "squared" if model.squared_distances else "plain"
    extra.append(f"distance_convention {convention}")
    return filtered, unfiltered, extra


def _lipschitz_lines(model, test, cfg):
    n = min(cfg["lipschitz.n_points"], test.n)
    rng = np.random.default_rng(cfg["lipschitz.seed"])
    ids = np.sort(rng.choice(test.n, size=n, replace=False))
    lines = ["example_id value"]
    values = []
    for i in ids:
        est = local_lipschitz(model, test.images[int(i)], cfg["lipschitz.epsilon"],
                              steps=cfg["lipschitz.steps"],
                              restarts=cfg["lipschitz.restarts"],
                              seed=cfg["lipschitz.seed"] + int(i))
        values.append(est.value)
        lines.append(f"{int(i)} {est.value!r}")
    values = np.asarray(values)
    lines.append(f"# median {np.median(values)!r} max {values.max()!r}")
    return lines


def cmd_eval(cfg, args):
    out = _stage_dir(args, "eval")
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "train" / "checkpoint.zip"
    model, manifest = load_checkpoint(ckpt)
    kind = manifest["kind"]
    attack_dir = Path(args.out) / "attack"
    records_path = attack_dir / "records.jsonl"
    if not records_path.exists():
        raise MissingArtifact(f"{records_path} not found (run the attack stage first)")
    records = load_records(records_path, attack_dir / "nat_images.idx",
                           attack_dir / "adv_images.idx")
    ok = [r for r in records if r.status == "ok"]
    preserved = [r for r in ok if r.label_preserved]
    _, test = _load_splits(cfg)
    if kind == "senn":
        filtered, unfiltered, extra = _senn_eval(model, test, records, cfg)
    else:
        filtered, unfiltered, extra = _proto_eval(model, test, records, cfg)
    write_distance_csv(out / "distances.csv", filtered)
    write_distance_csv(out / "distances_unfiltered.csv", unfiltered)

    lines = [f"# toolkit {__version__}", f"# model_kind {kind}"]
    lines.append(f"n_records {len(records)}")
    lines.append(f"n_ok {len(ok)}")
    lines.append(f"n_label_preserved {len(preserved)}")
    if ok:
        lines.append(f"label_preserved_rate {len(preserved) / len(ok):.6f}")
    lines += extra
    lines.append("")
    lines.append("[distances label_preserved_only]")
    lines += format_summary_lines(summarize_by_kind(filtered))
    lines.append("")
    lines.append("[distances all_records]")
    lines += format_summary_lines(summarize_by_kind(unfiltered))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    (out / "lipschitz.txt").write_text(
        "\n".join(_lipschitz_lines(model, test, cfg)) + "\n")
    _write_stage_manifest(out, cfg, {"model_kind": kind})
    print(f"eval: {len(filtered)} distance records -> {out}")
    return EXIT_OK


def _render_box_dat(stats_by_kind):
    lines = ["kind min q1 median q3 max count"]
    for kind, s in stats_by_kind.items():
        lines.append(f"{kind} {s.min!r} {s.q1!r} {s.median!r} {s.q3!r} {s.max!r} {s.count}")
    return "\n".join(lines) + "\n"


def _render_values_dat(records):
    lines = ["kind example_id value"]
    for r in records:
        lines.append(f"{r.kind} {r.example_id} {r.value!r}")
    return "\n".join(lines) + "\n"


def _senn_case_study(model, test, records, train_dir, out_dir):
    ok = [r for r in records if r.status == "ok" and r.x_adv is not None]
    if not ok:
        return ["no usable attack record for a case study"]
    pick = next((r for r in ok if r.label_preserved), ok[0])
    side = test.side
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(out_dir / "natural.pgm", np.asarray(pick.x_nat).reshape(side, side))
    write_pgm(out_dir / "adversarial.pgm", np.asarray(pick.x_adv).reshape(side, side))
    target_img = test.images[pick.aux_id]
    write_pgm(out_dir / "target.pgm", target_img.reshape(side, side))
    h_nat = np.asarray(pick.h_nat)
    h_adv = np.asarray(pick.h_adv)
    h_tgt = model.concepts(target_img[None, :])[0]
    x_nat = np.asarray(pick.x_nat, dtype=np.float32)[None, :]
    x_adv = np.asarray(pick.x_adv, dtype=np.float32)[None, :]
    th_nat = model.relevances(x_nat)[0]
    th_adv = model.relevances(x_adv)[0]
    col_nat = int(np.searchsorted(model.classes_, pick.pred_nat))
    col_adv = int(np.searchsorted(model.classes_, pick.pred_adv))
    lines = [
        f"example_id {pick.example_id} target_id {pick.aux_id}",
        f"true_label {pick.true_label} pred_nat {pick.pred_nat} pred_adv {pick.pred_adv}",
        f"label_preserved {pick.label_preserved}",
        f"h_distance_nat {pick.h_distance_nat!r}",
        f"h_distance_adv {pick.h_distance!r}",
        f"theta_shift {pick.theta_shift!r}",
        "concept h_nat h_adv h_target theta_nat(pred) theta_adv(pred)",
    ]
    for i in range(h_nat.size):
        lines.append(f"{i} {h_nat[i]:.6f} {h_adv[i]:.6f} {h_tgt[i]:.6f} "
                     f"{th_nat[i, col_nat]:.6f} {th_adv[i, col_adv]:.6f}")
    gallery_index = train_dir / "gallery" / "gallery_index.txt"
    if gallery_index.exists():
        lines.append("")
        lines.append(f"concept gallery: {gallery_index}")
        lines += gallery_index.read_text().splitlines()
    (out_dir / "case_study.txt").write_text("\n".join(lines) + "\n")
    return [f"case study written to {out_dir}"]


def _proto_matrix(model, records, n_cases):
    ok = [r for r in records if r.status == "ok" and r.x_adv is not None]
    cases, seen = [], set()
    for r in sorted(ok, key=lambda r: (not r.label_preserved, r.example_id)):
        if r.true_label not in seen:
            cases.append(r)
            seen.add(r.true_label)
        if len(cases) == n_cases:
            break
    if not cases:
        return ["no usable attack record for the prototype matrix"]
    convention = "squared" if model.squared_distances else "plain"
    lines = [f"# prototype distances h(x), {convention} convention",
             "# [v] marks rows whose prototype carries the column's true label;"
             " * marks the column minimum"]
    header = ["prototype(label)"]
    for r in cases:
        header.append(f"ex{r.example_id}(y={r.true_label})_nat")
        header.append("adv")
    lines.append(" ".join(header))
    nat_cols = [np.asarray(r.h_nat) for r in cases]
    adv_cols = [np.asarray(r.h_adv) for r in cases]
    for j in range(model.n_prototypes):
        row = [f"P{j}({int(model.proto_labels_[j])})"]
        for r, nat, adv in zip(cases, nat_cols, adv_cols):
            own = int(model.proto_labels_[j]) == r.true_label
            for col in (nat, adv):
                cell = f"{col[j]:.3f}"
                if j == int(col.argmin()):
                    cell += "*"
                if own:
                    cell = f"[{cell}]"
                row.append(cell)
        lines.append(" ".join(row))
    return lines


def cmd_report(cfg, args):
    eval_dir = Path(args.out) / "eval"
    attack_dir = Path(args.out) / "attack"
    train_dir = Path(args.out) / "train"
    out = _stage_dir(args, "report")
    csv_path = eval_dir / "distances.csv"
    if not csv_path.exists():
        print("nothing to report: no eval outputs found")
        return EXIT_OK
    filtered = read_distance_csv(csv_path)
    unfiltered_path = eval_dir / "distances_unfiltered.csv"
    unfiltered = read_distance_csv(unfiltered_path) if unfiltered_path.exists() else []
    stats = summarize_by_kind(filtered)
    concept_kinds = {k: s for k, s in stats.items()
                     if k in ("in_class", "out_class", "adv_out_class")}
    proto_kinds = {k: s for k, s in stats.items() if k.startswith("D_")}
    if concept_kinds:
        (out / "concept_distances_box.dat").write_text(_render_box_dat(concept_kinds))
        (out / "concept_distances_values.dat").write_text(
            _render_values_dat([r for r in filtered if r.kind in concept_kinds]))
    if proto_kinds:
        (out / "overall_distances_box.dat").write_text(_render_box_dat(proto_kinds))
        (out / "overall_distances_values.dat").write_text(
            _render_values_dat([r for r in filtered if r.kind in proto_kinds]))

    lines = [f"# explanation-robustness report (toolkit {__version__})", ""]
    summary_path = eval_dir / "summary.txt"
    if summary_path.exists():
        lines += summary_path.read_text().splitlines()
    if unfiltered:
        lines.append("")
        lines.append("[unfiltered distances, all records]")
        lines += format_summary_lines(summarize_by_kind(unfiltered))

    records = []
    if (attack_dir / "records.jsonl").exists():
        records = load_records(attack_dir / "records.jsonl",
                               attack_dir / "nat_images.idx",
                               attack_dir / "adv_images.idx")
    ckpt = train_dir / "checkpoint.zip"
    if records and ckpt.exists():
        model, manifest = load_checkpoint(ckpt)
        _, test = _load_splits(cfg)
        lines.append("")
        if manifest["kind"] == "senn":
            lines += _senn_case_study(model, test, records, train_dir,
                                      out / "case_study")
        else:
            matrix = _proto_matrix(model, records, cfg["report.n_cases"])
            (out / "prototype_matrix.txt").write_text("\n".join(matrix) + "\n")
            lines.append(f"prototype matrix written to {out / 'prototype_matrix.txt'}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    _write_stage_manifest(out, cfg)
    print(f"report -> {out / 'report.txt'}")
    return EXIT_OK


def cmd_selftest(cfg, args):
    from .selftest import run_selftest
    failures = run_selftest()
    return EXIT_OK if failures == 0 else EXIT_FAIL


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="semrobust",
        description="Train self-explaining classifiers and measure the "
                    "robustness of their explanations.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (flat dotted keys)")
    common.add_argument("--seed", type=int, help="master seed overriding every *.seed key")
    common.add_argument("--workers", type=int, help="compute thread cap")
    common.add_argument("--out", default="runs", help="run directory")
    common.add_argument("--model", choices=["senn", "proto"], help="model kind")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("data-verify", parents=[common]).set_defaults(func=cmd_data_verify)
    sub.add_parser("train", parents=[common]).set_defaults(func=cmd_train)
    p_attack = sub.add_parser("attack", parents=[common])
    p_attack.add_argument("--checkpoint", help="checkpoint path (default <out>/train/checkpoint.zip)")
    p_attack.set_defaults(func=cmd_attack)
    p_eval = sub.add_parser("eval", parents=[common])
    p_eval.add_argument("--checkpoint", help="checkpoint path (default <out>/train/checkpoint.zip)")
    p_eval.set_defaults(func=cmd_eval)
    sub.add_parser("report", parents=[common]).set_defaults(func=cmd_report)
    sub.add_parser("selftest", parents=[common]).set_defaults(func=cmd_selftest)
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        torch.set_num_threads(max(1, cfg["run.workers"]))
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedTraining as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    raise SystemExit(main())
