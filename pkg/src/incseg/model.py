"""Small encoder-decoder segmentation network with an expandable head.

The architecture follows the LinkNet recipe: a residual encoder whose
stage outputs feed the decoder through additive skip connections. The
deepest encoder output (stride 8) is the feature map consumed by the
feature-level regularizers. GroupNorm is used throughout so that the
forward pass is deterministic and independent of batch composition.
"""
from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .labels import LabelSpace, RegistryError

CHECKPOINT_MAGIC = "INCSEG-CKPT-1"


class InputContractError(ValueError):
    """Input violates a declared shape/channel contract."""


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.n2 = _norm(cout)
        if stride != 1 or cin != cout:
            self.proj = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))
        else:
            self.proj = nn.Identity()

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        return F.relu(h + self.proj(x))


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.n = _norm(cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.n(self.conv(x)))


class ExpandableHead(nn.Module):
    """1x1 classifier evaluated one class plane at a time.

    Each output plane is computed by its own conv call so that the
    arithmetic path of a class is independent of how many other classes
    exist; head expansion then leaves old logits bit-identical.
    """

    def __init__(self, cin: int, num_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, cin, 1, 1))
        self.bias = nn.Parameter(torch.zeros(num_classes))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        planes = [
            F.conv2d(x, self.weight[c : c + 1], self.bias[c : c + 1])
            for c in range(self.num_classes)
        ]
        return torch.cat(planes, dim=1)


class SegModel(nn.Module):
    """Encoder-decoder network exposing logits and the encoder feature map."""

    def __init__(self, label_space: LabelSpace, in_channels: int = 3, base_width: int = 16):
        super().__init__()
        self.label_space = label_space
        self.in_channels = in_channels
        self.base_width = base_width
        w = base_width
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w, 3, padding=1, bias=False), _norm(w), nn.ReLU())
        self.stage1 = ResidualBlock(w, w, stride=1)
        self.stage2 = ResidualBlock(w, 2 * w, stride=2)
        self.stage3 = ResidualBlock(2 * w, 4 * w, stride=2)
        self.stage4 = ResidualBlock(4 * w, 8 * w, stride=2)
        self.dec3 = DecoderBlock(8 * w, 4 * w)
        self.dec2 = DecoderBlock(4 * w, 2 * w)
        self.dec1 = DecoderBlock(2 * w, w)
        self.head = ExpandableHead(w, label_space.num_classes)

    @property
    def feature_channels(self) -> int:
        return 8 * self.base_width

    @property
    def encoder_stride(self) -> int:
        return 8

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits (B, C, H, W), encoder features (B, C_f, H/8, W/8))."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != self.in_channels:
            raise InputContractError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise InputContractError(f"spatial size {tuple(x.shape[2:])} must be divisible by 8")
        h = self.stem(x)
        e1 = self.stage1(h)
        e2 = self.stage2(e1)
        e3 = self.stage3(e2)
        e4 = self.stage4(e3)
        d = self.dec3(e4) + e3
        d = self.dec2(d) + e2
        d = self.dec1(d) + e1
        logits = self.head(d)
        return logits, e4

    def expand_head(self, new_class_name: str, init_mode: str = "zero") -> "SegModel":
        """Adds one output class in place; old class rows are copied exactly."""
        if init_mode not in ("zero", "background_copy"):
            raise ValueError(f"unknown init mode {init_mode!r}")
        new_space = self.label_space.with_new_class(new_class_name)
        old = self.head
        head = ExpandableHead(old.weight.shape[1], new_space.num_classes)
        with torch.no_grad():
            head.weight[: old.num_classes] = old.weight
            head.bias[: old.num_classes] = old.bias
            if init_mode == "zero":
                head.weight[-1].zero_()
                head.bias[-1].zero_()
            else:
                bg = self.label_space.background_id
                head.weight[-1] = old.weight[bg]
                head.bias[-1] = old.bias[bg]
        head.to(old.weight.device).to(old.weight.dtype)
        self.head = head
        self.label_space = new_space
        return self

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)

    def arch_config(self) -> dict:
        return {"in_channels": self.in_channels, "base_width": self.base_width}


class ModelSnapshot:
    """Immutable frozen copy of a model ("memory network")."""

    def __init__(self, model: SegModel):
        self._model = copy.deepcopy(model)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.label_space = self._model.label_space

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._model(x)

    __call__ = forward

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self._model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def save_checkpoint(model: SegModel, path) -> None:
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "arch": model.arch_config(),
            "label_space": model.label_space.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> SegModel:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # corrupt file, wrong format
        raise InputContractError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise InputContractError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    space = LabelSpace.from_dict(blob["label_space"])
    model = SegModel(space, **blob["arch"])
    model.load_state_dict(blob["state_dict"])
    return model
