"""Per-class IoU, image-wise mean IoU, and multi-run aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import IGNORE_VALUE
from .labels import LabelSpace
from .model import InputContractError


def iou_per_class(
    pred: np.ndarray,
    gt: np.ndarray,
    label_space: LabelSpace,
    ignore_value: int = IGNORE_VALUE,
) -> dict[int, float | None]:
    """IoU per class; None where neither mask contains the class."""
    if pred.shape != gt.shape:
        raise InputContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = (gt != ignore_value) & (pred != ignore_value)
    out: dict[int, float | None] = {}
    for cid, _ in label_space.classes:
        p = (pred == cid) & valid
        g = (gt == cid) & valid
        union = int((p | g).sum())
        out[cid] = None if union == 0 else int((p & g).sum()) / union
    return out


def mean_defined(ious: dict[int, float | None], include: list[int] | None = None) -> float | None:
    vals = [v for c, v in ious.items() if v is not None and (include is None or c in include)]
    return None if not vals else float(np.mean(vals))


@dataclass
class RunReport:
    """Aggregated IoU results: mean and sample std across runs."""

    label_space: LabelSpace
    per_class_mean: dict[int, float | None]
    per_class_std: dict[int, float | None]
    miou_mean: float
    miou_std: float
    n_runs: int
    per_run_miou: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": {
                self.label_space.name_of(c): {
                    "iou_mean": self.per_class_mean[c],
                    "iou_std": self.per_class_std[c],
                }
                for c, _ in self.label_space.classes
            },
            "miou_mean": self.miou_mean,
            "miou_std": self.miou_std,
            "n_runs": self.n_runs,
            "per_run_miou": self.per_run_miou,
        }

    def to_table(self) -> str:
        lines = ["class\tiou_mean\tiou_std"]
        for c, name in self.label_space.classes:
            m, s = self.per_class_mean[c], self.per_class_std[c]
            lines.append(
                f"{name}\t{'-' if m is None else f'{m:.4f}'}\t{'-' if s is None else f'{s:.4f}'}"
            )
        lines.append(f"mIoU\t{self.miou_mean:.4f}\t{self.miou_std:.4f}")
        return "\n".join(lines)


def mean_iou_imagewise(
    per_image_results: list[dict[int, float | None]],
    label_space: LabelSpace,
    exclude_background: bool = False,
) -> float:
    """Mean over images of the per-image mean IoU over defined classes."""
    if not per_image_results:
        raise InputContractError("need at least one image result")
    include = label_space.classes_of_interest() if exclude_background else None
    means = []
    for ious in per_image_results:
        m = mean_defined(ious, include)
        if m is not None:
            means.append(m)
    if not means:
        raise InputContractError("no class defined in any image")
    return float(np.mean(means))


def _std(vals: list[float]) -> float:
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def aggregate_runs(
    runs: list[list[dict[int, float | None]]],
    label_space: LabelSpace,
    exclude_background: bool = False,
) -> RunReport:
    """Multi-seed aggregation: mean +- sample std of image-wise results."""
    if not runs:
        raise InputContractError("need at least one run")
    mious = [mean_iou_imagewise(r, label_space, exclude_background) for r in runs]
    per_class_mean: dict[int, float | None] = {}
    per_class_std: dict[int, float | None] = {}
    for cid, _ in label_space.classes:
        run_vals = []
        for run in runs:
            vals = [ious[cid] for ious in run if ious[cid] is not None]
            if vals:
                run_vals.append(float(np.mean(vals)))
        per_class_mean[cid] = float(np.mean(run_vals)) if run_vals else None
        per_class_std[cid] = _std(run_vals) if run_vals else None
    return RunReport(
        label_space=label_space,
        per_class_mean=per_class_mean,
        per_class_std=per_class_std,
        miou_mean=float(np.mean(mious)),
        miou_std=_std(mious),
        n_runs=len(runs),
        per_run_miou=mious,
    )
