"""Full-image prediction by sliding window with overlap averaging."""
from __future__ import annotations

import numpy as np
import torch

from .data import image_to_tensor
from .model import SegModel


class ConfigurationError(ValueError):
    pass


def window_origins(size: int, window: int, overlap_fraction: float) -> list[int]:
    """Origins at multiples of the stride, the last clamped to touch the edge."""
    if not 0.0 <= overlap_fraction < 1.0:
        raise ConfigurationError(f"overlap fraction {overlap_fraction} outside [0, 1)")
    stride = max(1, round(window * (1.0 - overlap_fraction)))
    origins = list(range(0, max(size - window, 0) + 1, stride))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


def coverage_counts(height: int, width: int, window: int, overlap_fraction: float) -> np.ndarray:
    """Per-pixel count of covering windows, via the same origin enumeration
    predict_sliding uses."""
    counts = np.zeros((height, width), dtype=np.int64)
    for r0 in window_origins(height, window, overlap_fraction):
        for c0 in window_origins(width, window, overlap_fraction):
            counts[r0 : r0 + window, c0 : c0 + window] += 1
    return counts


def _pad_reflect(img: np.ndarray, window: int):
    h, w = img.shape[:2]
    ph, pw = max(0, window - h), max(0, window - w)
    if ph == 0 and pw == 0:
        return img, h, w
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect"), h, w


@torch.no_grad()
def predict_sliding(
    model,
    image: np.ndarray,
    window: int = 256,
    overlap_fraction: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Averaged softmax probabilities and argmax mask over overlapping windows.

    Accumulation order is fixed (row-major over window origins), so the
    result does not depend on any processing schedule.
    """
    padded, h, w = _pad_reflect(image, window)
    ph, pw = padded.shape[:2]
    num_classes = model.label_space.num_classes
    prob_sum = np.zeros((num_classes, ph, pw), dtype=np.float64)
    counts = np.zeros((ph, pw), dtype=np.int64)
    x = image_to_tensor(padded)
    for r0 in window_origins(ph, window, overlap_fraction):
        for c0 in window_origins(pw, window, overlap_fraction):
            logits, _ = model(x[:, r0 : r0 + window, c0 : c0 + window])
            probs = torch.softmax(logits[0], dim=0).numpy()
            prob_sum[:, r0 : r0 + window, c0 : c0 + window] += probs
            counts[r0 : r0 + window, c0 : c0 + window] += 1
    prob_map = (prob_sum / counts)[:, :h, :w]
    return prob_map, prob_map.argmax(axis=0).astype(np.int64)


@torch.no_grad()
def predict_fast(model, image: np.ndarray, window: int = 256) -> np.ndarray:
    """Single-pass non-overlapping tiling; cheap per-step evaluation."""
    _, mask = predict_sliding(model, image, window=window, overlap_fraction=0.0)
    return mask
