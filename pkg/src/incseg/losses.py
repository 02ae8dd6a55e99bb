"""Composite fine-tuning objective: sparse CE plus one selectable regularizer.

All regularizers operate on tensors so gradients flow through them; the
feature-level ones (channel-profile distillation, prototype terms,
neighborhood consistency) consume the encoder feature map and labels
downsampled to its resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import IGNORE_VALUE
from .labels import LabelSpace
from .model import InputContractError

REGULARIZERS = ("none", "disca", "podnet", "sdr", "festa")


class DegenerateInputError(ValueError):
    pass


@dataclass
class LossConfig:
    regularizer: str = "none"
    weight_disca: float = 1.0
    weight_pod: float = 1.0
    weight_sdr_match: float = 1.0
    weight_sdr_rep: float = 1.0
    weight_sdr_att: float = 1.0
    weight_festa: float = 1.0
    prototype_momentum: float = 0.9

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if not 0.0 <= self.prototype_momentum <= 1.0:
            raise ValueError("prototype momentum must lie in [0, 1]")


@dataclass
class Prototypes:
    """Per-class unit-norm representative vectors in encoder feature space."""

    vectors: dict[int, torch.Tensor] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def detached(self) -> "Prototypes":
        return Prototypes(
            vectors={c: v.detach() for c, v in self.vectors.items()},
            counts=dict(self.counts),
        )


def sparse_ce(logits: torch.Tensor, target: torch.Tensor, ignore_value: int = IGNORE_VALUE) -> torch.Tensor:
    """Mean CE over non-ignore pixels. Ignore pixels contribute nothing."""
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if not (target != ignore_value).any():
        raise DegenerateInputError("target mask has no labeled pixel")
    return F.cross_entropy(logits, target, ignore_index=ignore_value)


def disca_loss(
    updated_logits: torch.Tensor,
    memory_logits: torch.Tensor,
    memory_space: LabelSpace,
) -> torch.Tensor:
    """CE against memory argmax on pixels the memory assigns to classes of interest."""
    if updated_logits.dim() == 3:
        updated_logits = updated_logits.unsqueeze(0)
    if memory_logits.dim() == 3:
        memory_logits = memory_logits.unsqueeze(0)
    argmax = memory_logits.argmax(dim=1)
    interest = memory_space.classes_of_interest()
    keep = torch.zeros_like(argmax, dtype=torch.bool)
    for c in interest:
        keep |= argmax == c
    if not keep.any():
        return updated_logits.sum() * 0.0
    target = torch.where(keep, argmax, torch.full_like(argmax, IGNORE_VALUE))
    return F.cross_entropy(updated_logits, target, ignore_index=IGNORE_VALUE)


def podnet_loss(updated_features: torch.Tensor, memory_features: torch.Tensor) -> torch.Tensor:
    """Channel-wise pooled-profile L2 distillation between the two encoders.

    Per channel, features are mean-pooled over rows (width profile) and
    over columns (height profile); the loss is the squared distance
    between the concatenated profiles, averaged over channels and profile
    length.
    """
    if updated_features.dim() == 3:
        updated_features = updated_features.unsqueeze(0)
    if memory_features.dim() == 3:
        memory_features = memory_features.unsqueeze(0)
    if updated_features.shape != memory_features.shape:
        raise InputContractError(
            f"feature shapes differ: {tuple(updated_features.shape)} vs "
            f"{tuple(memory_features.shape)}"
        )

    def profiles(f):
        return torch.cat([f.mean(dim=2), f.mean(dim=3)], dim=2)  # (B, C, w + h)

    diff = profiles(updated_features) - profiles(memory_features)
    return diff.pow(2).sum(dim=2).div(diff.shape[2]).mean()


def downsample_labels(mask: np.ndarray, stride: int, ignore_value: int = IGNORE_VALUE) -> np.ndarray:
    """Nearest label per stride-block; blocks with conflicting classes become ignore."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise InputContractError(f"mask {mask.shape} not divisible by stride {stride}")
    blocks = mask.reshape(h // stride, stride, w // stride, stride).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // stride, w // stride, stride * stride)
    valid = blocks != ignore_value
    filled = np.where(valid, blocks, np.iinfo(np.int64).max)
    lo = filled.min(axis=2)
    filled = np.where(valid, blocks, np.iinfo(np.int64).min)
    hi = filled.max(axis=2)
    out = np.where(valid.any(axis=2) & (lo == hi), lo, ignore_value)
    return out.astype(np.int64)


def _labeled_vectors(features: torch.Tensor, labels: torch.Tensor):
    """(feature vectors, class ids) at labeled cells; accepts single maps or batches."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    idx = torch.nonzero(labels != IGNORE_VALUE, as_tuple=True)
    vecs = features.permute(0, 2, 3, 1)[idx]  # (n, C)
    return vecs, labels[idx]


def compute_prototypes(
    features: torch.Tensor,
    labels: torch.Tensor,
    previous: Prototypes,
    momentum: float,
) -> Prototypes:
    """Per-class mean of normalized feature vectors, EMA-blended and renormalized.

    Classes absent from the batch keep their previous vectors.
    """
    vecs, classes = _labeled_vectors(features, labels)
    out = Prototypes(vectors=dict(previous.vectors), counts=dict(previous.counts))
    if vecs.shape[0] == 0:
        return out
    vecs = F.normalize(vecs, dim=1)
    for c in classes.unique().tolist():
        sel = vecs[classes == c]
        batch = F.normalize(sel.mean(dim=0), dim=0)
        prev = previous.vectors.get(c)
        if prev is None or momentum == 0.0:
            blended = batch
        elif momentum == 1.0:
            blended = prev
        else:
            blended = F.normalize(momentum * prev + (1.0 - momentum) * batch, dim=0)
        out.vectors[c] = blended
        out.counts[c] = previous.counts.get(c, 0) + sel.shape[0]
    return out


def sdr_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    prototypes_updated: Prototypes,
    prototypes_memory: Prototypes,
    w_match: float = 1.0,
    w_rep: float = 1.0,
    w_att: float = 1.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Prototype regularizer: matching + repulsive + attracting terms.

    Matching pulls each old-class prototype toward its memory-network
    counterpart; repulsion (1 / (1 + d^2) per pair, in (0, 1]) pushes
    prototypes apart; attraction pulls each labeled pixel's normalized
    feature toward its class prototype.
    """
    vecs, classes = _labeled_vectors(features, labels)
    zero = features.sum() * 0.0

    shared = [c for c in prototypes_updated.vectors if c in prototypes_memory.vectors]
    if shared:
        match = sum(
            (prototypes_updated.vectors[c] - prototypes_memory.vectors[c]).pow(2).sum()
            for c in shared
        ) / len(shared)
    else:
        match = zero

    ids = sorted(prototypes_updated.vectors)
    pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1 :]]
    if pairs:
        rep = sum(
            1.0
            / (1.0 + (prototypes_updated.vectors[a] - prototypes_updated.vectors[b]).pow(2).sum())
            for a, b in pairs
        ) / len(pairs)
    else:
        rep = zero

    have_proto = torch.tensor(
        [c in prototypes_updated.vectors for c in classes.tolist()], dtype=torch.bool
    )
    if have_proto.any():
        nvecs = F.normalize(vecs[have_proto], dim=1)
        protos = torch.stack(
            [prototypes_updated.vectors[c] for c in classes[have_proto].tolist()]
        )
        att = (nvecs - protos).pow(2).sum(dim=1).mean()
    else:
        att = zero

    terms = {"sdr_match": match, "sdr_rep": rep, "sdr_att": att}
    total = w_match * match + w_rep * rep + w_att * att
    return total, terms


def festa_loss(features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Neighborhood consistency in the spatial and feature domains.

    Spatial term: squared distance between each labeled cell's feature and
    the mean of its 4-connected neighbors. Feature term: squared distance
    to the nearest other labeled cell in feature space. Batched inputs are
    averaged over the items that contain labels.
    """
    if features.dim() == 4:
        if labels.dim() == 2:
            labels = labels.unsqueeze(0)
        per_item = [
            festa_loss(f, l)
            for f, l in zip(features, labels)
            if (l != IGNORE_VALUE).any()
        ]
        if not per_item:
            raise DegenerateInputError("no labeled cell at feature resolution")
        return torch.stack(per_item).mean()
    c, h, w = features.shape
    rows, cols = torch.nonzero(labels != IGNORE_VALUE, as_tuple=True)
    n = rows.shape[0]
    if n == 0:
        raise DegenerateInputError("no labeled cell at feature resolution")

    spatial = []
    for r, col in zip(rows.tolist(), cols.tolist()):
        neigh = [
            features[:, rr, cc]
            for rr, cc in ((r - 1, col), (r + 1, col), (r, col - 1), (r, col + 1))
            if 0 <= rr < h and 0 <= cc < w
        ]
        mean = torch.stack(neigh).mean(dim=0)
        spatial.append((features[:, r, col] - mean).pow(2).sum())
    loss = torch.stack(spatial).mean()

    if n > 1:
        vecs = features[:, rows, cols].t()
        with torch.no_grad():
            sq = vecs.pow(2).sum(dim=1)
            d2 = sq[:, None] + sq[None, :] - 2.0 * vecs @ vecs.t()
            d2 = d2 + torch.diag(torch.full((n,), float("inf"), dtype=d2.dtype))
            nearest = d2.argmin(dim=1)
        loss = loss + (vecs - vecs[nearest]).pow(2).sum(dim=1).mean()
    return loss


@dataclass
class BatchContext:
    """Everything a single loss evaluation needs."""

    logits: torch.Tensor
    target: torch.Tensor  # full-resolution sparse target mask
    features: torch.Tensor | None = None
    memory_logits: torch.Tensor | None = None
    memory_features: torch.Tensor | None = None
    memory_space: LabelSpace | None = None
    feature_labels: torch.Tensor | None = None  # target at feature resolution
    prototypes_updated: Prototypes | None = None
    prototypes_memory: Prototypes | None = None


def total_loss(cfg: LossConfig, ctx: BatchContext) -> tuple[torch.Tensor, dict[str, float]]:
    """Sparse CE plus the weighted active regularizer, with a term breakdown."""
    ce = sparse_ce(ctx.logits, ctx.target)
    breakdown = {"ce": ce}
    total = ce
    if cfg.regularizer == "disca":
        term = disca_loss(ctx.logits, ctx.memory_logits, ctx.memory_space)
        total = total + cfg.weight_disca * term
        breakdown["disca"] = term
    elif cfg.regularizer == "podnet":
        term = podnet_loss(ctx.features, ctx.memory_features)
        total = total + cfg.weight_pod * term
        breakdown["podnet"] = term
    elif cfg.regularizer == "sdr":
        term, sub = sdr_loss(
            ctx.features,
            ctx.feature_labels,
            ctx.prototypes_updated,
            ctx.prototypes_memory,
            cfg.weight_sdr_match,
            cfg.weight_sdr_rep,
            cfg.weight_sdr_att,
        )
        total = total + term
        breakdown.update(sub)
    elif cfg.regularizer == "festa":
        term = festa_loss(ctx.features, ctx.feature_labels)
        total = total + cfg.weight_festa * term
        breakdown["festa"] = term
    return total, {k: float(v.detach()) for k, v in breakdown.items()}
