"""Acceptance suite: property checks plus the scaled-down synthetic
reproduction of the incremental-learning protocol.

Each criterion prints one PASS/FAIL line. The synthetic end-to-end runs
(criteria 6-8) share one pretrained checkpoint and a fixed set of seeds,
so the whole suite is deterministic.
"""
import math
import os

import numpy as np
import pytest
import torch

from helpers import check_gradients
from incseg.annotations import (
    IGNORE_VALUE,
    AnnotationBudget,
    SparseAnnotations,
    Point,
    pseudo_label,
    simulate_clicks,
)
from incseg.data import SyntheticSpec, generate_synthetic, load_manifest
from incseg.inference import coverage_counts, predict_sliding, window_origins
from incseg.labels import LabelSpace
from incseg.losses import (
    LossConfig,
    Prototypes,
    compute_prototypes,
    disca_loss,
    festa_loss,
    podnet_loss,
    sdr_loss,
    sparse_ce,
)
from incseg.metrics import iou_per_class, mean_iou_imagewise
from incseg.model import SegModel, load_checkpoint, save_checkpoint
from incseg.trainer import FinetuneConfig, FinetuneSample, PretrainConfig, finetune_incremental, pretrain

SEEDS = (0, 1, 2)


def report(criterion: str, passed: bool, detail: str = ""):
    print(f"\n[ACCEPTANCE] {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
    assert passed, f"{criterion} failed: {detail}"


# ------------------------------------------------- 1. head-expansion exactness

def test_criterion_1_head_expansion_exactness():
    ok = True
    for trial in range(100):
        torch.manual_seed(trial)
        for mode in ("zero", "background_copy"):
            model = SegModel(LabelSpace.from_names(["background", "road"]), base_width=8)
            x = torch.rand(3, 32, 32)
            before, _ = model(x)
            model.expand_head("building", init_mode=mode)
            after, _ = model(x)
            ok &= torch.equal(after[:, :2], before)
    report("criterion 1 (head-expansion exactness, 100 inputs x 2 modes)", ok)


# -------------------------------------------------------- 2. gradient suite

def test_criterion_2_loss_gradient_suite():
    prior = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(0)
        space = LabelSpace.from_names(["background", "road"])
        worst = 0.0

        for _ in range(5):
            logits = torch.tensor(rng.normal(0, 1, (1, 3, 4, 4)), requires_grad=True)
            target = torch.tensor(rng.integers(0, 3, (1, 4, 4)))
            worst = max(worst, check_gradients(lambda: sparse_ce(logits, target), logits))

        for _ in range(5):
            logits = torch.tensor(rng.normal(0, 1, (1, 3, 4, 4)), requires_grad=True)
            mem = torch.tensor(rng.normal(0, 1, (1, 2, 4, 4)))
            worst = max(worst, check_gradients(lambda: disca_loss(logits, mem, space), logits))

        for _ in range(5):
            f = torch.tensor(rng.normal(0, 1, (1, 2, 5, 5)), requires_grad=True)
            mem = torch.tensor(rng.normal(0, 1, (1, 2, 5, 5)))
            worst = max(worst, check_gradients(lambda: podnet_loss(f, mem), f))

        labels = torch.tensor([[0, 1], [1, 0]])
        pm = Prototypes(vectors={
            0: torch.nn.functional.normalize(torch.tensor([1.0, 0.2]), dim=0),
            1: torch.nn.functional.normalize(torch.tensor([0.1, 1.0]), dim=0),
        })
        for _ in range(5):
            f = torch.tensor(rng.normal(0, 1, (2, 2, 2)), requires_grad=True)
            for weights in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):  # each sub-term alone

                def fn():
                    pu = compute_prototypes(f, labels, Prototypes(), momentum=0.0)
                    total, _ = sdr_loss(f, labels, pu, pm, *weights)
                    return total

                worst = max(worst, check_gradients(fn, f))

        for _ in range(5):
            f = torch.tensor(rng.normal(0, 1, (2, 3, 3)), requires_grad=True)
            flabels = torch.full((3, 3), IGNORE_VALUE)
            flabels[0, 1], flabels[2, 2], flabels[1, 0] = 0, 1, 0
            worst = max(worst, check_gradients(lambda: festa_loss(f, flabels), f))
    finally:
        torch.set_default_dtype(prior)
    report("criterion 2 (analytic vs finite-difference gradients, rel err <= 1e-4)",
           worst <= 1e-4, f"(worst rel err {worst:.2e})")


# ------------------------------------------------------ 3. pseudo-label oracle

class FakeMemory:
    def __init__(self, logits, label_space):
        self.logits = logits
        self.label_space = label_space

    def __call__(self, image):
        return self.logits.unsqueeze(0), None


def test_criterion_3_pseudo_labeler_oracle():
    space = LabelSpace.from_names(["background", "road", "car"])
    rng = np.random.default_rng(42)
    ok = True
    for trial in range(200):
        logits = torch.tensor(rng.normal(0, 1.5, (3, 32, 32)), dtype=torch.float32)
        mem = FakeMemory(logits, space)
        clicks = SparseAnnotations("img", [Point(0, 0, 3), Point(5, 5, 0), Point(10, 20, 3)])
        cap = int(rng.integers(0, 40))
        out = pseudo_label(mem, torch.rand(3, 32, 32), clicks, cap)

        probs = torch.softmax(logits, dim=0).numpy()
        argmax = logits.argmax(dim=0).numpy()
        taken = clicks.positions()
        candidates = []
        for r in range(32):
            for c in range(32):
                if argmax[r, c] in (1, 2) and (r, c) not in taken:
                    candidates.append((-probs[argmax[r, c], r, c], r, c))
        candidates.sort()
        expected = [(r, c, int(argmax[r, c])) for _, r, c in candidates[:cap]]
        got = [(p.row, p.col, p.class_id) for p in out.pseudo()]
        ok &= got == expected
    report("criterion 3 (pseudo-labeler equals brute-force oracle, 200 maps)", ok)


# --------------------------------------------------------------- 4. IoU oracle

def test_criterion_4_iou_oracle():
    space = LabelSpace.from_names(["background", "road", "building"])
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(200):
        pred = rng.integers(0, 3, (12, 12))
        gt = rng.integers(0, 3, (12, 12))
        gt[rng.random((12, 12)) < 0.05] = IGNORE_VALUE
        got = iou_per_class(pred, gt, space)
        valid = gt != IGNORE_VALUE
        for c in range(3):
            inter = union = 0
            for r in range(12):
                for col in range(12):
                    if not valid[r, col]:
                        continue
                    p, g = pred[r, col] == c, gt[r, col] == c
                    inter += p and g
                    union += p or g
            expected = None if union == 0 else inter / union
            ok &= got[c] == expected
            if got[c] is not None:
                ok &= 0.0 <= got[c] <= 1.0
        ok &= got == iou_per_class(gt, pred, space)
    report("criterion 4 (IoU equals counting oracle; symmetric; bounded)", ok)


# ---------------------------------------------------- 5. sliding-window cover

def test_criterion_5_sliding_window_coverage():
    ok = True
    for size in (256, 300, 384, 511, 1024):
        counts = coverage_counts(size, size, 256, 0.5)
        origins = window_origins(size, 256, 0.5)
        axis = np.array(
            [sum(1 for o in origins if o <= i < o + 256) for i in range(size)]
        )
        oracle = np.outer(axis, axis)
        ok &= (counts == oracle).all() and counts.min() >= 1
    report("criterion 5 (coverage counts equal membership oracle; full cover)", ok)


# ------------------------------------------- 6-8. synthetic end-to-end suite

FT_LR = 2e-4  # desk-scale rate; the full-scale protocol value is 2e-5
SDR_WEIGHTS = dict(weight_sdr_match=5.0, weight_sdr_rep=1.0, weight_sdr_att=2.0)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    spec = SyntheticSpec(image_size=256, n_pretrain=20, n_incremental=6, seed=0)
    return generate_synthetic(spec, tmp_path_factory.mktemp("acceptance_synth"))


@pytest.fixture(scope="session")
def pretrained_ckpt(synth_manifest, tmp_path_factory):
    torch.manual_seed(0)
    model = SegModel(LabelSpace.from_names(["background", "line"]), base_width=8)
    cfg = PretrainConfig(learning_rate=1e-3, pseudo_epochs=2,
                         samples_per_pseudo_epoch=1000, crop_size=128,
                         batch_size=8, seed=0)
    model, _ = pretrain(model, synth_manifest.split("pretrain"), cfg, class_remap={2: 0})
    path = tmp_path_factory.mktemp("acceptance_ckpt") / "memory.ckpt"
    save_checkpoint(model, path)
    return path


def incremental_run(manifest, ckpt, loss_cfg, seed, budget):
    model = load_checkpoint(ckpt)
    memory = model.snapshot()
    model.expand_head("rect")
    samples = []
    for e in manifest.split("incremental"):
        gt = e.load_mask()
        clicks = simulate_clicks(
            gt, model.label_space, AnnotationBudget(budget, budget),
            rng_seed=seed * 7 + 1, image_id=e.image_id,
        )
        samples.append(FinetuneSample(image=e.load_image(), clicks=clicks, eval_gt=gt))
    cfg = FinetuneConfig(
        learning_rate=FT_LR, steps=30, iterations_per_step=10, selection_window=15,
        loss=loss_cfg, batch_size=4, crop_size=128, seed=seed, selection_mode="benchmark",
    )
    model, _ = finetune_incremental(model, memory, samples, cfg)
    per_image = [
        iou_per_class(predict_sliding(model, s.image)[1], s.eval_gt, model.label_space)
        for s in samples
    ]
    return model, per_image


@pytest.fixture(scope="session")
def baseline_runs(synth_manifest, pretrained_ckpt):
    return [
        incremental_run(synth_manifest, pretrained_ckpt, LossConfig(regularizer="none"), s, 300)[1]
        for s in SEEDS
    ]


@pytest.fixture(scope="session")
def sdr_runs(synth_manifest, pretrained_ckpt):
    cfg = LossConfig(regularizer="sdr", **SDR_WEIGHTS)
    return [
        incremental_run(synth_manifest, pretrained_ckpt, cfg, s, 300)[1] for s in SEEDS
    ]


def run_miou(per_image, space):
    return mean_iou_imagewise(per_image, space)


def test_criterion_6_synthetic_end_to_end(synth_manifest, pretrained_ckpt, baseline_runs):
    full_space = LabelSpace.from_names(["background", "line"]).with_new_class("rect")
    old_space = LabelSpace.from_names(["background", "line"])
    memory = load_checkpoint(pretrained_ckpt)

    # pre-expansion reference on the incremental images (old label space)
    pre = []
    for e in synth_manifest.split("incremental"):
        gt_old = np.where(e.load_mask() == 2, 0, e.load_mask())
        pre.append(iou_per_class(predict_sliding(memory, e.load_image())[1], gt_old, old_space))

    def class_mean(runs, cid):
        return float(np.mean([
            np.mean([ious[cid] for ious in run if ious[cid] is not None]) for run in runs
        ]))

    new_iou = class_mean(baseline_runs, 2)
    pre_old = {c: float(np.mean([p[c] for p in pre])) for c in (0, 1)}
    post_old = {c: class_mean(baseline_runs, c) for c in (0, 1)}
    degradation = max(pre_old[c] - post_old[c] for c in (0, 1))
    detail = (f"(new-class IoU {new_iou:.3f} >= 0.50; worst old-class drop "
              f"{degradation * 100:.1f} <= 10 points)")
    report("criterion 6 (synthetic end-to-end, baseline, 3 seeds)",
           new_iou >= 0.50 and degradation <= 0.10, detail)


def test_criterion_7_regularizer_ordering(baseline_runs, sdr_runs):
    space = LabelSpace.from_names(["background", "line"]).with_new_class("rect")
    base = [run_miou(r, space) for r in baseline_runs]
    sdr = [run_miou(r, space) for r in sdr_runs]
    base_mean, sdr_mean = float(np.mean(base)), float(np.mean(sdr))
    base_std = float(np.std(base, ddof=1))
    sdr_std = float(np.std(sdr, ddof=1))
    detail = (f"(mIoU sdr {sdr_mean:.4f} vs baseline {base_mean:.4f}; "
              f"std sdr {sdr_std:.4f} vs baseline {base_std:.4f} [reported, not asserted])")
    report("criterion 7 (regularizer ordering: sdr >= baseline, 3 seeds)",
           sdr_mean >= base_mean, detail)


def test_criterion_8_annotation_sweep_trend(synth_manifest, pretrained_ckpt, sdr_runs):
    space = LabelSpace.from_names(["background", "line"]).with_new_class("rect")
    cfg = LossConfig(regularizer="sdr", **SDR_WEIGHTS)
    low = [
        run_miou(incremental_run(synth_manifest, pretrained_ckpt, cfg, s, 25)[1], space)
        for s in SEEDS
    ]
    high = [run_miou(r, space) for r in sdr_runs]
    gap = float(np.mean(high)) - float(np.mean(low))
    detail = f"(mIoU at 300 clicks {np.mean(high):.4f} - at 25 clicks {np.mean(low):.4f} = {gap * 100:.1f} points >= 5)"
    report("criterion 8 (annotation sweep trend, 3 seeds)", gap >= 0.05, detail)


# ----------------------------------------------- 9. optional full-scale path

@pytest.mark.skipif(
    "INCSEG_VAIHINGEN_MANIFEST" not in os.environ,
    reason="full-scale path is compute-bound; set INCSEG_VAIHINGEN_MANIFEST to run",
)
def test_criterion_9_full_scale_optional(tmp_path):
    """Full-resolution aerial benchmark with the prototype regularizer.

    Expects a prepared manifest (see README) and a machine able to run the
    complete pretraining plus fine-tuning protocol. Targets an overall IoU
    of 0.797 within +-0.03.
    """
    from click.testing import CliRunner

    from incseg.cli import main

    manifest = os.environ["INCSEG_VAIHINGEN_MANIFEST"]
    ckpt = os.environ.get("INCSEG_VAIHINGEN_CHECKPOINT")
    assert ckpt, "set INCSEG_VAIHINGEN_CHECKPOINT to a pretrained old-space checkpoint"
    out = tmp_path / "report.json"
    result = CliRunner().invoke(main, [
        "increment", ckpt, manifest, str(out), "--regularizer", "sdr", "--seeds", "3",
    ])
    assert result.exit_code == 0, result.output
    import json

    miou = json.loads(out.read_text())["report"]["miou_mean"]
    report("criterion 9 (full-scale benchmark, optional)", abs(miou - 0.797) <= 0.03,
           f"(mIoU {miou:.4f} vs 0.797 +- 0.03)")
