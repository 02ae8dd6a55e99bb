"""Ordered class registry for the incremental scenario."""
from __future__ import annotations

from dataclasses import dataclass, field


class RegistryError(ValueError):
    """Raised when a label-space operation violates the registry rules."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered set of segmentation classes.

    Distinguishes the background class, the classes of interest (everything
    else), and optionally the single newly added class, which must be the
    last one.
    """

    classes: tuple[tuple[int, str], ...]
    background_id: int = 0
    new_class_id: int | None = None

    def __post_init__(self):
        ids = [cid for cid, _ in self.classes]
        if ids != list(range(len(ids))):
            raise RegistryError(f"class ids must be contiguous from 0, got {ids}")
        if self.background_id not in ids:
            raise RegistryError(f"background id {self.background_id} not registered")
        if self.new_class_id is not None and self.new_class_id != len(ids) - 1:
            raise RegistryError("new class must carry the largest class id")
        names = [n for _, n in self.classes]
        if len(set(names)) != len(names):
            raise RegistryError(f"duplicate class names in {names}")

    @classmethod
    def from_names(cls, names, background: str | int = 0) -> "LabelSpace":
        classes = tuple((i, n) for i, n in enumerate(names))
        bg = names.index(background) if isinstance(background, str) else background
        return cls(classes=classes, background_id=bg)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [n for _, n in self.classes]

    def name_of(self, class_id: int) -> str:
        return self.classes[class_id][1]

    def classes_of_interest(self) -> list[int]:
        """All class ids except background."""
        return [cid for cid, _ in self.classes if cid != self.background_id]

    def old_classes_of_interest(self) -> list[int]:
        """Classes of interest that predate the newly added class."""
        return [c for c in self.classes_of_interest() if c != self.new_class_id]

    def with_new_class(self, name: str) -> "LabelSpace":
        if name in self.names:
            raise RegistryError(f"class {name!r} already registered")
        if self.new_class_id is not None:
            raise RegistryError("a new class is already pending")
        nid = self.num_classes
        return LabelSpace(
            classes=self.classes + ((nid, name),),
            background_id=self.background_id,
            new_class_id=nid,
        )

    def to_dict(self) -> dict:
        return {
            "classes": [[cid, name] for cid, name in self.classes],
            "background_id": self.background_id,
            "new_class_id": self.new_class_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(
            classes=tuple((int(c), str(n)) for c, n in d["classes"]),
            background_id=int(d["background_id"]),
            new_class_id=None if d.get("new_class_id") is None else int(d["new_class_id"]),
        )
