"""Sparse point labels: click simulation, pseudo-labeling, rasterization.

The pseudo-labeler implements the memory-network rule: old-class points
are sampled where the frozen network is most confident, capped so that
the user's new-class clicks keep the upper hand. Background labels only
ever come from user clicks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import json

import numpy as np
import torch

from .labels import LabelSpace
from .model import ModelSnapshot

IGNORE_VALUE = 255


class Origin(str, Enum):
    user_click = "user_click"
    pseudo_label = "pseudo_label"


class AnnotationError(ValueError):
    pass


class BudgetError(AnnotationError):
    """A click budget exceeds what the ground truth can provide."""


@dataclass(frozen=True)
class Point:
    row: int
    col: int
    class_id: int
    origin: Origin = Origin.user_click


@dataclass
class SparseAnnotations:
    image_id: str
    points: list[Point] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for p in self.points:
            if (p.row, p.col) in seen:
                raise AnnotationError(f"duplicate annotation at ({p.row}, {p.col})")
            seen.add((p.row, p.col))

    def __len__(self) -> int:
        return len(self.points)

    def positions(self) -> set[tuple[int, int]]:
        return {(p.row, p.col) for p in self.points}

    def add(self, point: Point) -> None:
        if (point.row, point.col) in self.positions():
            raise AnnotationError(f"duplicate annotation at ({point.row}, {point.col})")
        self.points.append(point)

    def clicks(self) -> list[Point]:
        return [p for p in self.points if p.origin == Origin.user_click]

    def pseudo(self) -> list[Point]:
        return [p for p in self.points if p.origin == Origin.pseudo_label]

    def to_ndjson(self) -> str:
        return "\n".join(
            json.dumps(
                {"image_id": self.image_id, "row": p.row, "col": p.col,
                 "class_id": p.class_id, "origin": p.origin.value}
            )
            for p in self.points
        )

    @classmethod
    def from_ndjson(cls, text: str, image_id: str | None = None) -> "SparseAnnotations":
        points, iid = [], image_id
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            iid = iid or rec["image_id"]
            points.append(Point(int(rec["row"]), int(rec["col"]), int(rec["class_id"]),
                                Origin(rec["origin"])))
        return cls(image_id=iid or "", points=points)


@dataclass(frozen=True)
class AnnotationBudget:
    n_new_class: int
    n_background: int

    def __post_init__(self):
        if self.n_new_class < 0 or self.n_background < 0:
            raise AnnotationError("budget counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_new_class + self.n_background


def simulate_clicks(
    gt: np.ndarray,
    label_space: LabelSpace,
    budget: AnnotationBudget,
    rng_seed: int,
    image_id: str = "",
) -> SparseAnnotations:
    """Uniformly samples click positions from the ground truth, without replacement."""
    if label_space.new_class_id is None:
        raise AnnotationError("label space has no new class to sample clicks for")
    rng = np.random.default_rng(rng_seed)
    points: list[Point] = []
    for class_id, count in (
        (label_space.new_class_id, budget.n_new_class),
        (label_space.background_id, budget.n_background),
    ):
        flat = np.flatnonzero(gt == class_id)
        if flat.size < count:
            raise BudgetError(
                f"requested {count} clicks for class {class_id} "
                f"but only {flat.size} pixels available"
            )
        chosen = rng.choice(flat, size=count, replace=False)
        rows, cols = np.unravel_index(chosen, gt.shape)
        points.extend(Point(int(r), int(c), class_id) for r, c in zip(rows, cols))
    return SparseAnnotations(image_id=image_id, points=points)


def pseudo_label(
    memory: ModelSnapshot,
    image: torch.Tensor,
    clicks: SparseAnnotations,
    cap: int,
) -> SparseAnnotations:
    """Augments clicks with the memory network's most confident old-class pixels.

    Eligible pixels are those whose memory argmax lies in the old classes
    of interest; at most ``cap`` of them are kept, ranked by softmax
    confidence (descending), ties broken by ascending (row, col). Click
    positions are never overwritten.
    """
    if cap < 0:
        raise AnnotationError("cap must be non-negative")
    out = SparseAnnotations(image_id=clicks.image_id, points=list(clicks.points))
    if cap == 0:
        return out
    logits, _ = memory(image)
    probs = torch.softmax(logits[0], dim=0)
    conf, argmax = probs.max(dim=0)
    conf = conf.numpy()
    argmax = argmax.numpy()
    interest = memory.label_space.classes_of_interest()
    eligible = np.isin(argmax, interest)
    taken = clicks.positions()
    rows, cols = np.nonzero(eligible)
    if rows.size == 0:
        return out
    order = np.lexsort((cols, rows, -conf[rows, cols]))
    added = 0
    for i in order:
        if added >= cap:
            break
        r, c = int(rows[i]), int(cols[i])
        if (r, c) in taken:
            continue
        out.add(Point(r, c, int(argmax[r, c]), Origin.pseudo_label))
        added += 1
    return out


def rasterize(
    ann: SparseAnnotations, height: int, width: int, ignore_value: int = IGNORE_VALUE
) -> np.ndarray:
    """Dense target plane: ignore everywhere except annotated pixels."""
    mask = np.full((height, width), ignore_value, dtype=np.int64)
    for p in ann.points:
        if not (0 <= p.row < height and 0 <= p.col < width):
            raise AnnotationError(f"point ({p.row}, {p.col}) outside {height}x{width}")
        mask[p.row, p.col] = p.class_id
    return mask
