"""Desk-profile end-to-end run on the synthetic phantom corpus.

Generates a 4-source / 2-class dataset (160 train / 48 val), preprocesses to
32^3, trains both branches with their staged schedules, and reports per-branch
and w=0.5 ensemble validation macro F1. Mirrors the acceptance configuration.
"""

import argparse
import shutil
import time
from pathlib import Path

from ctfuse import preprocess as pp
from ctfuse import synthgen, trainer
from ctfuse.backbones import Encoder25DCfg, Model3DCfg, MultiView25D, ResNet3D
from ctfuse.cli import PROFILES, _load_branch_data
from ctfuse.ensemble_eval import ensemble, macro_f1, predict_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/end_to_end"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-cell", type=int, default=26)
    ap.add_argument("--fresh", action="store_true", help="regenerate the dataset")
    args = ap.parse_args()

    profile = PROFILES["desk"]
    data_dir, vol_dir = args.out / "data", args.out / "volumes"
    if args.fresh:
        shutil.rmtree(args.out, ignore_errors=True)
    if not vol_dir.exists():
        t0 = time.time()
        spec = synthgen.SynthSpec(
            n_scans_per_class_per_source=args.per_cell, n_classes=2, n_sources=4,
            volume_side=48, class_signature_strength=1.0,
            val_fraction=6 / 26, seed=7)
        manifest = synthgen.generate_dataset(spec, data_dir)
        cfg = pp.PreprocCfg(target_side=profile["target_side"])
        vol_dir.mkdir(parents=True)
        for rec in manifest.records:
            pp.save_volume(pp.preprocess_scan(data_dir / rec.scan_id, cfg),
                           vol_dir / f"{rec.scan_id}.vol")
        print(f"dataset + preprocessing: {time.time() - t0:.1f}s")

    tables = {}
    for branch in ("3d", "25d"):
        data = _load_branch_data(data_dir, vol_dir, branch, profile, "source")
        if branch == "3d":
            model = ResNet3D(Model3DCfg(n_classes=2,
                                        width_multiplier=profile["width_multiplier"]))
            plans = trainer.plan_3d(profile["epoch_factor"])
        else:
            model = MultiView25D(Encoder25DCfg(n_classes=2),
                                 slice_size=profile["slice_size"])
            plans = trainer.plan_25d(profile["epoch_factor"])
        t0 = time.time()
        state = trainer.train_branch(model, data, plans, seed=args.seed,
                                     out_dir=args.out / f"run_{branch}",
                                     batch_size=4,
                                     aug_cfg=trainer.AugCfg.disabled())
        table = trainer.predict_logits(model, data.val_inputs, data.val_ids,
                                       data.class_names, branch, model_tag=branch)
        preds = predict_labels(table)
        f1 = macro_f1([preds[i] for i in data.val_ids], data.val_labels, 2)
        tables[branch] = (table, f1)
        print(f"{branch}: {time.time() - t0:.1f}s  val macro F1 {f1:.4f} "
              f"(best during training {state.best_val_metric:.4f})")

    fused = ensemble(tables["25d"][0], tables["3d"][0], 0.5)
    preds = predict_labels(fused)
    f1 = macro_f1([preds[i] for i in data.val_ids], data.val_labels, 2)
    print(f"ensemble w=0.5: val macro F1 {f1:.4f}")


if __name__ == "__main__":
    main()
