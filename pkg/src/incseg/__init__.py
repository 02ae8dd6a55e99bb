"""Class-incremental semantic segmentation from clicked point annotations."""

from .labels import LabelSpace
from .model import SegModel, ModelSnapshot, load_checkpoint, save_checkpoint
from .annotations import (
    AnnotationBudget,
    Origin,
    Point,
    SparseAnnotations,
    pseudo_label,
    rasterize,
    simulate_clicks,
)
from .losses import LossConfig, Prototypes, total_loss
from .trainer import FinetuneConfig, FinetuneSample, PretrainConfig, TrainTrace, finetune_incremental, pretrain
from .inference import predict_fast, predict_sliding
from .metrics import RunReport, aggregate_runs, iou_per_class, mean_iou_imagewise
from .data import DatasetManifest, SyntheticSpec, generate_synthetic, load_manifest

__all__ = [
    "LabelSpace",
    "SegModel",
    "ModelSnapshot",
    "load_checkpoint",
    "save_checkpoint",
    "AnnotationBudget",
    "Origin",
    "Point",
    "SparseAnnotations",
    "pseudo_label",
    "rasterize",
    "simulate_clicks",
    "LossConfig",
    "Prototypes",
    "total_loss",
    "FinetuneConfig",
    "FinetuneSample",
    "PretrainConfig",
    "TrainTrace",
    "finetune_incremental",
    "pretrain",
    "predict_fast",
    "predict_sliding",
    "RunReport",
    "aggregate_runs",
    "iou_per_class",
    "mean_iou_imagewise",
    "DatasetManifest",
    "SyntheticSpec",
    "generate_synthetic",
    "load_manifest",
]
