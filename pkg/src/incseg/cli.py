"""Batch entry points: pretrain, increment, sweep, eval."""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from .annotations import AnnotationBudget, simulate_clicks
from .data import generate_synthetic, load_manifest, SyntheticSpec
from .inference import predict_sliding
from .labels import LabelSpace
from .losses import LossConfig
from .metrics import aggregate_runs, iou_per_class
from .model import SegModel, load_checkpoint, save_checkpoint
from .trainer import FinetuneConfig, FinetuneSample, PretrainConfig, finetune_incremental, pretrain


def _input_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


@click.group()
def main():
    """Class-incremental segmentation toolkit."""


@main.command("pretrain")
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_checkpoint", type=click.Path())
@click.option("--learning-rate", default=1e-4, show_default=True)
@click.option("--pseudo-epochs", default=10, show_default=True)
@click.option("--samples-per-pseudo-epoch", default=10_000, show_default=True)
@click.option("--crop-size", default=256, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--base-width", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--include-new-class", is_flag=True,
              help="Train on the full label space (control-network path).")
def cmd_pretrain(manifest, out_checkpoint, learning_rate, pseudo_epochs,
                 samples_per_pseudo_epoch, crop_size, batch_size, base_width,
                 seed, include_new_class):
    """Dense-label pretraining; writes a checkpoint."""
    mf = load_manifest(manifest)
    names = mf.class_names if include_new_class else mf.class_names[:-1]
    space = LabelSpace.from_names(names, background=mf.background_name)
    model = SegModel(space, base_width=base_width)
    cfg = PretrainConfig(
        learning_rate=learning_rate,
        pseudo_epochs=pseudo_epochs,
        samples_per_pseudo_epoch=samples_per_pseudo_epoch,
        crop_size=crop_size,
        batch_size=batch_size,
        seed=seed,
    )
    remap = None
    if not include_new_class:
        # the future class reads as background during old-space pretraining
        dropped = len(mf.class_names) - 1
        remap = {dropped: space.background_id}
    model, trace = pretrain(model, mf.split("pretrain"), cfg, class_remap=remap)
    save_checkpoint(model, out_checkpoint)
    click.echo(f"wrote {out_checkpoint} after {len(trace.steps)} updates "
               f"(final loss {trace.steps[-1].loss_breakdown['ce']:.4f})")


def _run_increment(checkpoint, mf, new_class, budget_new, budget_bg, loss_cfg,
                   seeds, cap, steps, iterations, window, lr, batch_size, crop_size):
    entries = mf.split("incremental")
    new_id = mf.class_names.index(new_class)
    runs = []
    label_space = None
    for seed in seeds:
        model = load_checkpoint(checkpoint)
        memory = model.snapshot()
        model.expand_head(new_class)
        label_space = model.label_space
        samples = []
        for e in entries:
            gt = e.load_mask()
            gt_inc = np.where(gt == new_id, model.label_space.new_class_id, gt)
            clicks = simulate_clicks(
                gt_inc, model.label_space,
                AnnotationBudget(budget_new, budget_bg),
                rng_seed=seed * 10_007 + zlib.crc32(e.image_id.encode()) % 1000,
                image_id=e.image_id,
            )
            samples.append(FinetuneSample(image=e.load_image(), clicks=clicks, eval_gt=gt_inc))
        cfg = FinetuneConfig(
            learning_rate=lr, steps=steps, iterations_per_step=iterations,
            selection_window=window, loss=loss_cfg, pseudo_label_cap=cap,
            batch_size=batch_size, crop_size=crop_size, seed=seed,
            selection_mode="benchmark",
        )
        model, _ = finetune_incremental(model, memory, samples, cfg)
        per_image = []
        for s in samples:
            _, mask = predict_sliding(model, s.image)
            per_image.append(iou_per_class(mask, s.eval_gt, model.label_space))
        runs.append(per_image)
    return aggregate_runs(runs, label_space)


@main.command("increment")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_report", type=click.Path())
@click.option("--new-class", default=None, help="Class name to add (default: last manifest class).")
@click.option("--budget", default=300, show_default=True, help="Clicks per category per image.")
@click.option("--total-split", is_flag=True,
              help="Split the budget between new-class and background instead of giving each the full count.")
@click.option("--regularizer", type=click.Choice(["none", "festa", "disca", "podnet", "sdr"]),
              default="none", show_default=True)
@click.option("--seeds", default=3, show_default=True)
@click.option("--pseudo-label-cap", default=None, type=int)
@click.option("--steps", default=30, show_default=True)
@click.option("--iterations-per-step", default=10, show_default=True)
@click.option("--selection-window", default=15, show_default=True)
@click.option("--learning-rate", default=2e-5, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--crop-size", default=256, show_default=True)
def cmd_increment(checkpoint, manifest, out_report, new_class, budget, total_split,
                  regularizer, seeds, pseudo_label_cap, steps, iterations_per_step,
                  selection_window, learning_rate, batch_size, crop_size):
    """Add a class from simulated clicks and report multi-seed IoU."""
    mf = load_manifest(manifest)
    new_class = new_class or mf.class_names[-1]
    if total_split:
        b_new, b_bg = budget // 2, budget - budget // 2
    else:
        b_new = b_bg = budget
    report = _run_increment(
        checkpoint, mf, new_class, b_new, b_bg, LossConfig(regularizer=regularizer),
        list(range(seeds)), pseudo_label_cap, steps, iterations_per_step,
        selection_window, learning_rate, batch_size, crop_size,
    )
    payload = {
        "config": {
            "regularizer": regularizer, "budget": budget, "seeds": seeds,
            "steps": steps, "iterations_per_step": iterations_per_step,
            "inputs_hash": _input_hash(checkpoint, manifest),
        },
        "report": report.to_dict(),
    }
    Path(out_report).write_text(json.dumps(payload, indent=2))
    Path(out_report).with_suffix(".tsv").write_text(report.to_table())
    click.echo(report.to_table())


@main.command("sweep")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_csv", type=click.Path())
@click.option("--budgets", default="25,50,100,300", show_default=True)
@click.option("--regularizer", default="sdr", show_default=True)
@click.option("--seeds", default=3, show_default=True)
@click.option("--steps", default=30, show_default=True)
@click.option("--iterations-per-step", default=10, show_default=True)
@click.option("--selection-window", default=15, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--crop-size", default=256, show_default=True)
def cmd_sweep(checkpoint, manifest, out_csv, budgets, regularizer, seeds, steps,
              iterations_per_step, selection_window, batch_size, crop_size):
    """Annotation-count sweep; emits a CSV curve and a plot."""
    mf = load_manifest(manifest)
    new_class = mf.class_names[-1]
    rows = []
    for b in [int(x) for x in budgets.split(",")]:
        report = _run_increment(
            checkpoint, mf, new_class, b, b, LossConfig(regularizer=regularizer),
            list(range(seeds)), None, steps, iterations_per_step, selection_window,
            2e-5, batch_size, crop_size,
        )
        rows.append((b, report.miou_mean, report.miou_std))
        click.echo(f"budget {b}: mIoU {report.miou_mean:.4f} +- {report.miou_std:.4f}")
    Path(out_csv).write_text(
        "budget,miou_mean,miou_std\n" + "\n".join(f"{b},{m:.6f},{s:.6f}" for b, m, s in rows)
    )
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bs, ms, ss = zip(*rows)
    plt.errorbar(bs, ms, yerr=ss, marker="o")
    plt.xlabel("annotations per category")
    plt.ylabel("mIoU")
    plt.savefig(Path(out_csv).with_suffix(".png"))


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_report", type=click.Path())
@click.option("--split", default="incremental", show_default=True)
@click.option("--exclude-background", is_flag=True)
def cmd_eval(checkpoint, manifest, out_report, split, exclude_background):
    """Evaluate a checkpoint on a manifest split (control-network path included)."""
    mf = load_manifest(manifest)
    model = load_checkpoint(checkpoint)
    per_image = []
    for e in mf.split(split):
        _, mask = predict_sliding(model, e.load_image())
        gt = e.load_mask()
        gt = np.where(gt >= model.label_space.num_classes, 255, gt)
        per_image.append(iou_per_class(mask, gt, model.label_space))
    report = aggregate_runs([per_image], model.label_space, exclude_background)
    payload = {
        "config": {"split": split, "inputs_hash": _input_hash(checkpoint, manifest)},
        "report": report.to_dict(),
    }
    Path(out_report).write_text(json.dumps(payload, indent=2))
    Path(out_report).with_suffix(".tsv").write_text(report.to_table())
    click.echo(report.to_table())


@main.command("make-synthetic")
@click.argument("out_dir", type=click.Path())
@click.option("--image-size", default=256, show_default=True)
@click.option("--n-pretrain", default=20, show_default=True)
@click.option("--n-incremental", default=6, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_make_synthetic(out_dir, image_size, n_pretrain, n_incremental, seed):
    """Generate the synthetic shapes dataset."""
    spec = SyntheticSpec(image_size=image_size, n_pretrain=n_pretrain,
                         n_incremental=n_incremental, seed=seed)
    mf = generate_synthetic(spec, out_dir)
    click.echo(f"wrote {len(mf.entries)} images under {out_dir}")


if __name__ == "__main__":
    main()
