"""Latent factor spaces and the straight-through binarization that keeps them trainable.

The model decomposes an image slice into three factors:

* an anatomy factor ``s``: a multi-channel spatial tensor, binary in its hard
  form, with exactly one active channel per pixel;
* a pathology factor ``p``: a single-channel binary spatial tensor that doubles
  as the pathology segmentation prediction;
* a modality factor ``z``: a low-dimensional vector with a Gaussian posterior.

Tensor conventions: torch tensors are channels-first, ``(C, H, W)`` or
``(B, C, H, W)``. Numpy arrays held by :class:`Sample` (and everything written
to disk) are channels-last ``(H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

ANATOMY_FACTOR_CHANNELS = 8
PATHOLOGY_FACTOR_CHANNELS = 1
MODALITY_DIMS = 8

_CHANNEL_SUM_ATOL = 1e-4


@dataclass
class ModalityFactor:
    """Gaussian posterior over the modality vector plus a reparameterized draw.

    ``sample = mean + exp(log_variance / 2) * noise`` with unit-normal noise.
    """

    mean: torch.Tensor
    log_variance: torch.Tensor
    sample: torch.Tensor


@dataclass
class Sample:
    """One image slice with its anatomy mask and optional pathology mask.

    ``pathology`` is ``None`` exactly when the slice belongs to the unlabeled
    subset; anatomy masks are always present at training time.
    """

    image: np.ndarray            # (H, W, 1) float32 in [0, 1]
    anatomy: np.ndarray          # (H, W, N) uint8 binary
    pathology: Optional[np.ndarray]  # (H, W, K) uint8 binary, or None
    volume_id: str
    slice_index: int

    @property
    def labeled(self) -> bool:
        return self.pathology is not None


def ensure_unit_range(image: np.ndarray) -> np.ndarray:
    """Return ``image`` guaranteed to lie in [0, 1].

    Images already in range pass through untouched; anything else is min-max
    rescaled per slice. Non-finite values are rejected.
    """
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    lo, hi = float(image.min()), float(image.max())
    if lo >= 0.0 and hi <= 1.0:
        return image
    if hi - lo == 0.0:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def binarize_soft_factor(soft: torch.Tensor, mode: str) -> torch.Tensor:
    """Round a soft factor to {0, 1} per channel with straight-through gradients.

    The forward pass computes ``floor(soft + 0.5)`` elementwise. In anatomy
    mode the result is additionally forced to be exactly one-hot per pixel:
    pixels whose thresholded channels are not already one-hot fall back to the
    argmax channel, ties resolved to the lowest channel index. The backward
    pass treats the whole operation as identity.

    ``soft`` is channels-first with the channel axis at dim -3.
    """
    if mode not in ("anatomy", "pathology"):
        raise ValueError(f"unknown binarization mode: {mode!r}")
    if not torch.isfinite(soft).all():
        raise ValueError("soft factor contains non-finite values")
    if soft.numel() and (soft.min() < 0.0 or soft.max() > 1.0):
        raise ValueError("soft factor values must lie in [0, 1]")

    with torch.no_grad():
        hard = torch.floor(soft + 0.5)
        if mode == "anatomy":
            channel_sum = soft.sum(dim=-3)
            if not torch.allclose(
                channel_sum, torch.ones_like(channel_sum), atol=_CHANNEL_SUM_ATOL
            ):
                raise ValueError("anatomy factor channels must sum to 1 per pixel")
            one_hot = torch.zeros_like(soft)
            one_hot.scatter_(-3, soft.argmax(dim=-3, keepdim=True), 1.0)
            is_one_hot = hard.sum(dim=-3, keepdim=True) == 1.0
            hard = torch.where(is_one_hot, hard, one_hot)
    return soft + (hard - soft).detach()


def one_hot_argmax(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel one-hot argmax over the channel axis, straight-through.

    Forward returns the exact one-hot encoding; the backward pass passes
    gradients through to ``probs`` unchanged.
    """
    with torch.no_grad():
        hard = torch.zeros_like(probs)
        hard.scatter_(-3, probs.argmax(dim=-3, keepdim=True), 1.0)
    return probs + (hard - probs).detach()


def null_pathology(p: torch.Tensor) -> torch.Tensor:
    """All-zero pathology factor of the same shape (the healthy state)."""
    return torch.zeros_like(p)


def concat_spatial(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Channel-wise concatenation of spatial tensors sharing H and W."""
    if not parts:
        raise ValueError("nothing to concatenate")
    ref = parts[0].shape
    for t in parts[1:]:
        if t.shape[-2:] != ref[-2:] or t.shape[:-3] != ref[:-3]:
            raise ValueError(
                f"spatial shape mismatch: {tuple(t.shape)} vs {tuple(ref)}"
            )
    if len(parts) == 1:
        return parts[0]
    return torch.cat(list(parts), dim=-3)
