"""Batch command-line surface.

Subcommands: synth, preprocess, train3d, train25d, predict, ensemble,
evaluate, report. Config precedence is defaults < config file < flags; the
resolved config is echoed into the output directory for exact replay.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import synthgen, preprocess as pp, multiview, trainer, objectives as obj
from .backbones import (Encoder25DCfg, Model3DCfg, MultiView25D, ResNet3D,
                        load_model_weights)
from .ensemble_eval import (LogitTable, MetricsReport, compute_report, ensemble,
                            predict_labels, render_report, save_predictions)

PROFILES = {
    "paper": {"target_side": 128, "slice_size": 224, "width_multiplier": 1.0,
              "k_slices": 10, "epoch_factor": 1.0,
              "encoder": "external_pretrained"},
    "desk": {"target_side": 32, "slice_size": 64, "width_multiplier": 0.25,
             "k_slices": 10, "epoch_factor": 0.2,
             "encoder": "builtin_small_transformer"},
}


class ValidationError(ValueError):
    pass


def _resolve(defaults: dict, cfg_file: str | None, flags: dict) -> dict:
    resolved = dict(defaults)
    if cfg_file:
        path = Path(cfg_file)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        with open(path) as fh:
            file_cfg = yaml.safe_load(fh) or {}
        for k, v in file_cfg.items():
            if k not in resolved:
                raise ValidationError(f"unknown config key {k!r}")
            resolved[k] = v
    for k, v in flags.items():
        if v is not None:
            resolved[k] = v
    return resolved


def _run_root() -> Path:
    return Path(os.environ.get("CTFUSE_RUN_ROOT", "."))


def _out_path(raw: str) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else _run_root() / p


def _echo_config(out_dir: Path, resolved: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.yaml", "w") as fh:
        yaml.safe_dump({"command": command, "config": resolved}, fh, sort_keys=True)


def cmd_synth(args) -> int:
    defaults = {"sources": 4, "classes": 2, "per_cell": 5, "val_fraction": 0.2,
                "signature_strength": 1.0, "volume_side": 64, "gender_ratio": 0.5,
                "source_shift_scale": 1.0, "seed": 0}
    resolved = _resolve(defaults, args.config, {
        "sources": args.sources, "classes": args.classes, "per_cell": args.per_cell,
        "val_fraction": args.val_fraction, "signature_strength": args.signature_strength,
        "volume_side": args.volume_side, "gender_ratio": args.gender_ratio,
        "source_shift_scale": args.source_shift_scale, "seed": args.seed})
    try:
        spec = synthgen.SynthSpec(
            n_scans_per_class_per_source=resolved["per_cell"],
            n_classes=resolved["classes"], n_sources=resolved["sources"],
            volume_side=resolved["volume_side"],
            class_signature_strength=resolved["signature_strength"],
            source_shift=synthgen.default_source_effects(
                resolved["sources"], resolved["source_shift_scale"]),
            gender_ratio=resolved["gender_ratio"],
            val_fraction=resolved["val_fraction"], seed=resolved["seed"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    out_dir = _out_path(args.out)
    try:
        manifest = synthgen.generate_dataset(spec, out_dir)
    except OSError as exc:
        print(f"error: cannot write dataset under {out_dir}: {exc}", file=sys.stderr)
        return 2
    _echo_config(out_dir, resolved, "synth")
    print(f"wrote {len(manifest.records)} scans to {out_dir}")
    return 0


def _stack_hash(scan_dir: Path, cfg: pp.PreprocCfg) -> str:
    h = hashlib.sha256()
    for p in sorted(scan_dir.iterdir()):
        if p.suffix.lower() == ".png":
            h.update(p.name.encode())
            h.update(p.read_bytes())
    h.update(json.dumps(asdict(cfg), sort_keys=True).encode())
    return h.hexdigest()


def cmd_preprocess(args) -> int:
    defaults = {"target_side": 128, "denoise_sigma": 1.0, "sharpen_amount": 0.5,
                "sharpen_sigma": 1.0}
    resolved = _resolve(defaults, args.config, {
        "target_side": args.target_side, "denoise_sigma": args.denoise_sigma,
        "sharpen_amount": args.sharpen_amount, "sharpen_sigma": args.sharpen_sigma})
    try:
        cfg = pp.PreprocCfg(**resolved)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    data_dir = Path(args.data)
    if not (data_dir / synthgen.MANIFEST_NAME).exists():
        raise ValidationError(f"no manifest in {data_dir}")
    manifest = synthgen.DatasetManifest.load(data_dir)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_done = n_skipped = 0
    for rec in manifest.records:
        scan_dir = data_dir / rec.scan_id
        out_path = out_dir / f"{rec.scan_id}.vol"
        hash_path = out_dir / f"{rec.scan_id}.hash"
        digest = _stack_hash(scan_dir, cfg)
        if out_path.exists() and hash_path.exists() and hash_path.read_text() == digest:
            n_skipped += 1
            continue
        vol = pp.preprocess_scan(scan_dir, cfg)
        pp.save_volume(vol, out_path)
        hash_path.write_text(digest)
        n_done += 1
    _echo_config(out_dir, resolved, "preprocess")
    print(f"preprocessed {n_done} scans ({n_skipped} up to date) -> {out_dir}")
    return 0


def _load_branch_data(data_dir: Path, vol_dir: Path, branch: str,
                      profile: dict, domain_key: str) -> trainer.BranchData:
    manifest = synthgen.DatasetManifest.load(data_dir)
    n_classes = max(r.label for r in manifest.records) + 1
    class_names = [f"class_{c}" for c in range(n_classes)]
    view_cfg = multiview.ViewCfg(k_slices=profile["k_slices"],
                                 slice_size=profile["slice_size"])
    split_data = {"train": [], "val": []}
    for rec in manifest.records:
        vol = pp.load_volume(vol_dir / f"{rec.scan_id}.vol")
        if branch == "3d":
            feats = vol.data.astype(np.float32)
        else:
            vs = multiview.extract_views(vol, view_cfg)
            feats = vs.as_array()[..., 0].astype(np.float32)
        domain = rec.source if domain_key == "source" else (0 if rec.gender == "F" else 1)
        split_data[rec.split].append((feats, rec.label, domain, rec.scan_id))
    if not split_data["train"] or not split_data["val"]:
        raise ValidationError("dataset needs both train and val records")

    def _pack(rows):
        feats, labels, domains, ids = zip(*rows)
        return (np.stack(feats), np.array(labels), np.array(domains), list(ids))

    tr, va = _pack(split_data["train"]), _pack(split_data["val"])
    return trainer.BranchData(inputs=tr[0], labels=tr[1], domains=tr[2], ids=tr[3],
                              val_inputs=va[0], val_labels=va[1], val_domains=va[2],
                              val_ids=va[3], class_names=class_names)


def _train(args, branch: str) -> int:
    defaults = {"profile": "desk", "seed": 0, "batch_size": 8 if branch == "3d" else 4,
                "domain_key": "source", "lambda_vrex": 1.0, "supcon_weight": 0.5,
                "supcon_tau": 0.07, "mixup_alpha": 0.4, "augment": True,
                "warmup_frac": 0.05, "epoch_factor": None}
    resolved = _resolve(defaults, args.config, {
        "profile": args.profile, "seed": args.seed, "batch_size": args.batch_size,
        "domain_key": args.domain_key, "warmup_frac": args.warmup_frac,
        "epoch_factor": args.epoch_factor,
        "augment": None if args.no_augment is None else not args.no_augment})
    if resolved["profile"] not in PROFILES:
        raise ValidationError(f"unknown profile {resolved['profile']!r}")
    if not (0 <= resolved["warmup_frac"] < 0.5):
        raise ValidationError("warmup_frac must be in [0, 0.5)")
    profile = dict(PROFILES[resolved["profile"]])
    if resolved["epoch_factor"] is not None:
        profile["epoch_factor"] = resolved["epoch_factor"]
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, resolved, f"train{branch}")
    data = _load_branch_data(Path(args.data), Path(args.volumes), branch, profile,
                             resolved["domain_key"])
    n_classes = len(data.class_names)
    if branch == "3d":
        model_cfg = Model3DCfg(n_classes=n_classes,
                               width_multiplier=profile["width_multiplier"])
        model = ResNet3D(model_cfg)
        plans = trainer.plan_3d(profile["epoch_factor"])
    else:
        model_cfg = Encoder25DCfg(backbone_kind="builtin_small_transformer",
                                  n_classes=n_classes)
        model = MultiView25D(model_cfg, slice_size=profile["slice_size"])
        plans = trainer.plan_25d(profile["epoch_factor"])
    for plan in plans:
        plan.warmup_frac = resolved["warmup_frac"]
    aug = trainer.AugCfg() if resolved["augment"] else trainer.AugCfg.disabled()
    state = trainer.train_branch(
        model, data, plans, seed=resolved["seed"], out_dir=out_dir,
        batch_size=resolved["batch_size"], aug_cfg=aug,
        vrex_cfg=obj.VRExCfg(resolved["lambda_vrex"]),
        supcon_cfg=obj.SupConCfg(resolved["supcon_tau"], resolved["supcon_weight"]),
        mixup_cfg=obj.MixUpCfg(resolved["mixup_alpha"]),
        model_cfg=model_cfg, resume=args.resume)
    _plot_losses(out_dir)
    print(f"best val macro F1 {state.best_val_metric:.4f}; checkpoint {state.best_checkpoint}")
    return 0


def _plot_losses(run_dir: Path) -> None:
    log_path = run_dir / "train_log.jsonl"
    if not log_path.exists():
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    steps, losses = [], []
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "loss" in rec:
                steps.append(rec["step"])
                losses.append(rec["loss"])
    if not steps:
        return
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(steps, losses)
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    fig.tight_layout()
    fig.savefig(run_dir / "loss_curve.png")
    plt.close(fig)


def cmd_predict(args) -> int:
    profile_name = args.profile or "desk"
    if profile_name not in PROFILES:
        raise ValidationError(f"unknown profile {profile_name!r}")
    profile = PROFILES[profile_name]
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    data = _load_branch_data(Path(args.data), Path(args.volumes), args.branch,
                             profile, "source")
    n_classes = len(data.class_names)
    if args.branch == "3d":
        model = ResNet3D(Model3DCfg(n_classes=n_classes,
                                    width_multiplier=profile["width_multiplier"]))
    else:
        model = MultiView25D(Encoder25DCfg(n_classes=n_classes),
                             slice_size=profile["slice_size"])
    load_model_weights(model, ckpt)
    split_inputs = data.val_inputs if args.split == "val" else data.inputs
    split_ids = data.val_ids if args.split == "val" else data.ids
    table = trainer.predict_logits(model, split_inputs, split_ids, data.class_names,
                                   args.branch, model_tag=args.branch)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    print(f"wrote logits for {len(split_ids)} scans to {out}")
    return 0


def cmd_ensemble(args) -> int:
    if not (0.0 <= args.w <= 1.0):
        raise ValidationError("--w must be in [0, 1]")
    za = LogitTable.load(args.logits_25d, model_tag="2.5D")
    zb = LogitTable.load(args.logits_3d, model_tag="3D")
    table = ensemble(za, zb, args.w, probability_space=args.probability_space)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    print(f"w={args.w} weights the 2.5D logits; (1-w) weights the 3D logits -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    if args.group_by not in ("source", "gender"):
        raise ValidationError("--group-by must be 'source' or 'gender'")
    table = LogitTable.load(args.logits)
    manifest = synthgen.DatasetManifest.load(Path(args.data))
    by_id = {r.scan_id: r for r in manifest.records}
    missing = sorted(set(table.entries) - set(by_id))
    if missing:
        raise ValidationError(f"scans missing from manifest: {missing}")
    ids = sorted(table.entries)
    preds_map = predict_labels(table)
    preds = [preds_map[sid] for sid in ids]
    labels = [by_id[sid].label for sid in ids]
    if args.group_by == "source":
        groups = [f"Source {by_id[sid].source}" for sid in ids]
        layout = "task1_per_source"
    else:
        groups = ["Female" if by_id[sid].gender == "F" else "Male" for sid in ids]
        layout = "task2_gender"
    n_classes = len(table.class_names)
    report = compute_report(preds, labels, groups, n_classes, table.class_names)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "metrics.json")
    text = render_report(report, layout)
    (out_dir / "table.txt").write_text(text)
    save_predictions(preds_map, out_dir / "predictions.csv")
    print(text)
    return 0


def cmd_report(args) -> int:
    reports = {}
    for spec in args.metrics:
        if "=" in spec:
            tag, path = spec.split("=", 1)
        else:
            tag, path = Path(spec).stem, spec
        if not Path(path).exists():
            raise ValidationError(f"metrics file not found: {path}")
        reports[tag] = MetricsReport.load(path)
    metrics = reports if len(reports) > 1 else next(iter(reports.values()))
    text = render_report(metrics, args.layout, decimals=args.decimals)
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _plot_groups(reports, out.with_suffix(".png"))
    print(text)
    return 0


def _plot_groups(reports: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3))
    width = 0.8 / max(len(reports), 1)
    for i, (tag, rep) in enumerate(reports.items()):
        keys = list(rep.per_group)
        xs = np.arange(len(keys)) + i * width
        ax.bar(xs, [rep.per_group[k] for k in keys], width=width, label=tag or "model")
    ax.set_xticks(np.arange(len(keys)) + 0.4 - width / 2)
    ax.set_xticklabels(keys, rotation=20)
    ax.set_ylabel("macro F1")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctfuse",
                                     description="hybrid 2.5D-3D CT classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--sources", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-cell", dest="per_cell", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--signature-strength", dest="signature_strength", type=float)
    p.add_argument("--volume-side", dest="volume_side", type=int)
    p.add_argument("--gender-ratio", dest="gender_ratio", type=float)
    p.add_argument("--source-shift-scale", dest="source_shift_scale", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="preprocess slice stacks into volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--target-side", dest="target_side", type=int)
    p.add_argument("--denoise-sigma", dest="denoise_sigma", type=float)
    p.add_argument("--sharpen-amount", dest="sharpen_amount", type=float)
    p.add_argument("--sharpen-sigma", dest="sharpen_sigma", type=float)
    p.set_defaults(func=cmd_preprocess)

    for branch in ("3d", "25d"):
        p = sub.add_parser(f"train{branch}", help=f"train the {branch} branch")
        p.add_argument("--data", required=True)
        p.add_argument("--volumes", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--profile", choices=list(PROFILES))
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--domain-key", dest="domain_key", choices=["source", "gender"])
        p.add_argument("--warmup-frac", dest="warmup_frac", type=float)
        p.add_argument("--epoch-factor", dest="epoch_factor", type=float)
        p.add_argument("--no-augment", dest="no_augment", action="store_const", const=True)
        p.add_argument("--resume", action="store_true")
        p.set_defaults(func=lambda a, b=branch: _train(a, b))

    p = sub.add_parser("predict", help="run a checkpoint over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--branch", choices=["3d", "25d"], required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--profile", choices=list(PROFILES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="weighted logit average of two tables")
    p.add_argument("logits_25d")
    p.add_argument("logits_3d")
    p.add_argument("--w", type=float, default=0.5,
                   help="weight on the 2.5D logits; (1-w) on the 3D logits")
    p.add_argument("--probability-space", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="metrics from a logit table and manifest")
    p.add_argument("--logits", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--group-by", dest="group_by", default="source")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render metrics files as a table")
    p.add_argument("metrics", nargs="+", help="metrics.json paths, optionally tag=path")
    p.add_argument("--layout", choices=["task1_per_source", "task2_per_class",
                                        "task2_gender"], required=True)
    p.add_argument("--decimals", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
