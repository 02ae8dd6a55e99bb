"""Pretraining and the incremental fine-tuning loop.

Fine-tuning runs a fixed budget of steps, each made of several gradient
updates, evaluating after every step; in benchmark mode the best weights
from the trailing selection window are restored at the end.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .annotations import IGNORE_VALUE, SparseAnnotations, pseudo_label, rasterize
from .data import DatasetEntry, image_to_tensor, sample_crop
from .inference import predict_fast
from .labels import LabelSpace
from .losses import (
    BatchContext,
    LossConfig,
    Prototypes,
    compute_prototypes,
    downsample_labels,
    sparse_ce,
    total_loss,
)
from .metrics import iou_per_class, mean_iou_imagewise
from .model import ModelSnapshot, SegModel


class ConfigurationError(ValueError):
    pass


@dataclass
class PretrainConfig:
    learning_rate: float = 1e-4
    pseudo_epochs: int = 10
    samples_per_pseudo_epoch: int = 10_000
    crop_size: int = 256
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "pseudo_epochs", "samples_per_pseudo_epoch", "crop_size", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class FinetuneConfig:
    learning_rate: float = 2e-5
    steps: int = 30
    iterations_per_step: int = 10
    selection_window: int = 15
    loss: LossConfig = field(default_factory=LossConfig)
    pseudo_label_cap: int | None = None  # default: number of new-class clicks
    batch_size: int = 8
    crop_size: int = 256
    seed: int = 0
    selection_mode: str = "deployment"  # "benchmark" | "deployment"

    def __post_init__(self):
        if self.selection_mode not in ("benchmark", "deployment"):
            raise ConfigurationError(f"unknown selection mode {self.selection_mode!r}")
        if self.selection_window > self.steps:
            raise ConfigurationError("selection window cannot exceed step count")
        for name in ("steps", "iterations_per_step", "selection_window", "batch_size", "crop_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class StepRecord:
    step: int
    loss_breakdown: dict[str, float]
    miou: float | None = None
    wall_time: float = 0.0


@dataclass
class TrainTrace:
    steps: list[StepRecord] = field(default_factory=list)
    selected_step: int | None = None

    def to_records(self) -> list[dict]:
        return [
            {"step": s.step, "miou": s.miou, "wall_time": s.wall_time, **s.loss_breakdown}
            for s in self.steps
        ]


@dataclass
class FinetuneSample:
    """One image of the incremental scenario."""

    image: np.ndarray
    clicks: SparseAnnotations
    eval_gt: np.ndarray | None = None


ProgressCallback = "callable(step: int, fraction: float) -> None"


def pretrain(
    model: SegModel,
    entries: list[DatasetEntry],
    cfg: PretrainConfig,
    class_remap: dict[int, int] | None = None,
    progress=None,
) -> tuple[SegModel, TrainTrace]:
    """Dense-label pretraining on random crops, fixed pseudo-epoch budget.

    class_remap rewrites mask ids before training; the incremental scenario
    maps the held-out future class onto background here.
    """
    if not entries:
        raise ConfigurationError("pretraining needs at least one dataset entry")
    data = []
    for e in entries:
        mask = e.load_mask()
        for src, dst in (class_remap or {}).items():
            mask = np.where(mask == src, dst, mask)
        data.append((e.load_image(), mask))
    n_classes = model.label_space.num_classes
    for _, mask in data:
        bad = set(np.unique(mask)) - set(range(n_classes)) - {IGNORE_VALUE}
        if bad:
            raise ConfigurationError(f"dataset class ids {sorted(bad)} outside model label space")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    updates_per_epoch = max(1, cfg.samples_per_pseudo_epoch // cfg.batch_size)
    trace = TrainTrace()
    model.train()
    step = 0
    total_updates = cfg.pseudo_epochs * updates_per_epoch
    for _epoch in range(cfg.pseudo_epochs):
        for _ in range(updates_per_epoch):
            t0 = time.perf_counter()
            imgs, masks = [], []
            for _ in range(cfg.batch_size):
                img, mask = data[int(rng.integers(0, len(data)))]
                ic, mc = sample_crop(img, mask, cfg.crop_size, rng)
                imgs.append(image_to_tensor(ic))
                masks.append(torch.from_numpy(np.ascontiguousarray(mc)))
            x = torch.stack(imgs)
            y = torch.stack(masks)
            logits, _ = model(x)
            loss = sparse_ce(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            trace.steps.append(
                StepRecord(step, {"ce": float(loss.detach())}, wall_time=time.perf_counter() - t0)
            )
            if progress is not None:
                progress(step, step / total_updates)
    trace.selected_step = step
    model.eval()
    return model, trace


def _build_targets(
    samples: list[FinetuneSample], memory: ModelSnapshot, cap: int | None
) -> list[np.ndarray]:
    """Pseudo-label once per image and rasterize the combined sparse target."""
    targets = []
    for s in samples:
        if len(s.clicks) == 0:
            raise ConfigurationError("clicks must be non-empty")
        new_id = memory.label_space.num_classes  # first id beyond the memory's space
        n_new = sum(1 for p in s.clicks.points if p.class_id == new_id)
        effective_cap = n_new if cap is None else cap
        combined = pseudo_label(memory, image_to_tensor(s.image), s.clicks, effective_cap)
        h, w = s.image.shape[:2]
        targets.append(rasterize(combined, h, w))
    return targets


def finetune_incremental(
    model: SegModel,
    memory: ModelSnapshot,
    samples: list[FinetuneSample],
    cfg: FinetuneConfig,
    progress=None,
) -> tuple[SegModel, TrainTrace]:
    """Incremental fine-tuning with pseudo-labels and the configured regularizer."""
    if model.label_space.new_class_id is None:
        raise ConfigurationError("model head must be expanded before fine-tuning")
    if cfg.selection_mode == "benchmark" and any(s.eval_gt is None for s in samples):
        raise ConfigurationError("benchmark selection mode requires eval_gt on every sample")

    targets = _build_targets(samples, memory, cfg.pseudo_label_cap)
    stride = model.encoder_stride
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    needs_memory = cfg.loss.regularizer in ("disca", "podnet", "sdr")
    protos_updated = Prototypes()
    protos_memory = Prototypes()
    trace = TrainTrace()
    window_states: list[tuple[int, dict]] = []
    model.train()
    update = 0
    total_updates = cfg.steps * cfg.iterations_per_step

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        breakdown_acc: dict[str, float] = {}
        for _ in range(cfg.iterations_per_step):
            imgs, ys = [], []
            for _ in range(cfg.batch_size):
                k = int(rng.integers(0, len(samples)))
                target = targets[k]
                ic, tc = sample_crop(
                    samples[k].image, target, cfg.crop_size, rng, require_label=target
                )
                imgs.append(image_to_tensor(ic))
                ys.append(torch.from_numpy(np.ascontiguousarray(tc)))
            x = torch.stack(imgs)
            y = torch.stack(ys)
            logits, feats = model(x)
            ctx = BatchContext(logits=logits, target=y, features=feats)
            if needs_memory:
                with torch.no_grad():
                    mem_logits, mem_feats = memory(x)
                ctx.memory_logits = mem_logits
                ctx.memory_features = mem_feats
                ctx.memory_space = memory.label_space
            if cfg.loss.regularizer in ("sdr", "festa"):
                flabels = torch.stack(
                    [torch.from_numpy(downsample_labels(t.numpy(), stride)) for t in ys]
                )
                ctx.feature_labels = flabels
            if cfg.loss.regularizer == "sdr":
                # batch prototypes participate in the gradient; EMA state is detached
                old_only = _mask_to_old_classes(ctx.feature_labels, memory.label_space)
                protos_updated = compute_prototypes(
                    feats, ctx.feature_labels, protos_updated, cfg.loss.prototype_momentum
                )
                protos_memory = compute_prototypes(
                    ctx.memory_features, old_only, protos_memory, cfg.loss.prototype_momentum
                ).detached()
                ctx.prototypes_updated = protos_updated
                ctx.prototypes_memory = protos_memory
            loss, breakdown = total_loss(cfg.loss, ctx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            protos_updated = protos_updated.detached()
            for k2, v in breakdown.items():
                breakdown_acc[k2] = breakdown_acc.get(k2, 0.0) + v / cfg.iterations_per_step
            update += 1
            if progress is not None:
                progress(step, update / total_updates)

        miou = None
        if cfg.selection_mode == "benchmark":
            model.eval()
            results = [
                iou_per_class(predict_fast(model, s.image), s.eval_gt, model.label_space)
                for s in samples
            ]
            miou = mean_iou_imagewise(results, model.label_space)
            model.train()
            if step > cfg.steps - cfg.selection_window:
                window_states.append(
                    (step, {k: v.detach().clone() for k, v in model.state_dict().items()})
                )
        trace.steps.append(
            StepRecord(step, breakdown_acc, miou=miou, wall_time=time.perf_counter() - t0)
        )

    if cfg.selection_mode == "benchmark":
        window = trace.steps[-cfg.selection_window :]
        best = max(window, key=lambda s: s.miou)
        trace.selected_step = best.step
        state = dict(window_states)[best.step]
        model.load_state_dict(state)
    else:
        trace.selected_step = cfg.steps
    model.eval()
    return model, trace


def _mask_to_old_classes(labels: torch.Tensor, memory_space: LabelSpace) -> torch.Tensor:
    """Keeps only labels the memory network knows (old classes of interest)."""
    keep = torch.zeros_like(labels, dtype=torch.bool)
    for c in memory_space.classes_of_interest():
        keep |= labels == c
    return torch.where(keep, labels, torch.full_like(labels, IGNORE_VALUE))
