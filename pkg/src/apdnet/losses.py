"""Training objectives: pathology Tversky/focal, pathology-masked reconstruction,
ratio-based triplet, and the adopted anatomy/modality losses.

All losses accept channels-first tensors, either a single ``(C, H, W)`` slice
or a ``(B, C, H, W)`` batch. Batched inputs are reduced per sample first, then
averaged over the batch, so values are comparable across batch sizes. Every
loss is nonnegative and exactly zero at its documented optimum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple, Union

import torch

log = logging.getLogger(__name__)

SMOOTH_EPS = 1e-6        # Dice / Tversky smoothing
FOCAL_CLAMP = 1e-7       # lower clamp on predicted probabilities
TRIPLET_DENOM_EPS = 1e-8  # lower clamp on the negative distance

TensorLike = Union[torch.Tensor, float]


@dataclass
class LossWeights:
    """Loss coefficients and shape parameters, defaulting to the trained values.

    ``pathology_weight`` is the extra weight put on pathology pixels inside the
    masked reconstruction loss (pathology pixels count ``pathology_weight + 1``
    times). The four trailing weights scale the adopted anatomy-Dice, KL,
    modality-reconstruction, and adversarial terms.
    """

    tversky: float = 1.0
    focal: float = 1.5
    triplet: float = 1.0
    reconstruction: float = 3.0
    tversky_beta: float = 0.7
    focal_gamma: float = 2.0
    margin_ratio: float = 0.3
    pathology_weight: float = 5.0
    anatomy_dice: float = 1.0
    kl: float = 0.1
    z_reconstruction: float = 1.0
    adversarial: float = 1.0
    # stability knobs the trainer passes to the ratio-triplet loss: a far
    # coarser denominator floor than the op default, plus a scale-invariant
    # cap on the distance ratio, so early degenerate negatives (recon ==
    # pseudo-healthy) give a bounded loss instead of an exploding ratio
    triplet_denominator_floor: float = 1e-3
    triplet_ratio_cap: float = 20.0

    def __post_init__(self) -> None:
        for name in ("tversky", "focal", "triplet", "reconstruction",
                     "anatomy_dice", "kl", "z_reconstruction", "adversarial",
                     "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.tversky_beta <= 1.0:
            raise ValueError("tversky_beta must lie in [0, 1]")
        if not 0.0 < self.margin_ratio < 1.0:
            raise ValueError("margin_ratio must lie in (0, 1)")
        if self.pathology_weight <= 0:
            raise ValueError("pathology_weight must be positive")
        if self.triplet_denominator_floor <= 0:
            raise ValueError("triplet_denominator_floor must be positive")
        if self.triplet_ratio_cap <= 1:
            raise ValueError("triplet_ratio_cap must exceed 1")


@dataclass
class TripletDistances:
    """Squared feature-space distances of a triplet, per sample."""

    d_pos: torch.Tensor
    d_neg: torch.Tensor


_degenerate_warned = False


def _warn_degenerate_negative(eps: float) -> None:
    # untrained feature heads routinely collapse the negative pair; warn once
    global _degenerate_warned
    if not _degenerate_warned:
        log.warning("degenerate negative pair: d_neg below %g, clamping "
                    "(further occurrences logged at debug level)", eps)
        _degenerate_warned = True
    else:
        log.debug("degenerate negative pair: d_neg below %g, clamping", eps)


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    """Flatten to (batch, -1); a single unbatched slice becomes batch 1."""
    if t.dim() <= 3:
        return t.reshape(1, -1)
    return t.reshape(t.shape[0], -1)


def _check_shapes(pred: torch.Tensor, truth: torch.Tensor) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")


def _check_unit_interval(t: torch.Tensor, name: str) -> None:
    if t.numel() and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")


def tversky_loss(pred: torch.Tensor, truth: torch.Tensor,
                 beta: float = 0.7, eps: float = SMOOTH_EPS) -> torch.Tensor:
    """One minus the smoothed Tversky index TP / (TP + (1-beta) FP + beta FN).

    ``beta`` trades false positives against false negatives; ``beta = 0.5``
    recovers the soft Dice loss exactly.
    """
    _check_shapes(pred, truth)
    _check_unit_interval(pred, "pred")
    _check_unit_interval(truth, "truth")
    p, t = _per_sample(pred), _per_sample(truth)
    tp = (p * t).sum(dim=1)
    fp = p.sum(dim=1) - tp
    fn = t.sum(dim=1) - tp
    index = (tp + eps) / (tp + (1.0 - beta) * fp + beta * fn + eps)
    return (1.0 - index).mean()


def focal_loss(pred: torch.Tensor, truth: torch.Tensor,
               gamma: float = 2.0, clamp: float = FOCAL_CLAMP) -> torch.Tensor:
    """Foreground-only focal loss, summed over pixels: -y (1 - p)^gamma log p."""
    _check_shapes(pred, truth)
    p = _per_sample(pred).clamp(min=clamp)
    t = _per_sample(truth)
    per_pixel = -t * (1.0 - p).pow(gamma) * torch.log(p)
    return per_pixel.sum(dim=1).mean()


def masked_reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor,
                               y_pat: torch.Tensor, rho: float = 5.0) -> torch.Tensor:
    """Mean absolute reconstruction error with pathology pixels weighted (rho + 1)x.

    ``y_pat`` broadcasts against the (single-channel) image. With an all-zero
    mask this is the plain L1 reconstruction loss.
    """
    _check_shapes(x, x_hat)
    if x.shape[-2:] != y_pat.shape[-2:]:
        raise ValueError("pathology mask spatial dims must match the image")
    if rho <= 0:
        raise ValueError("rho must be positive")
    weighted = (rho * y_pat + 1.0) * (x - x_hat).abs()
    return _per_sample(weighted).mean(dim=1).mean()


def l1_reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Plain mean absolute reconstruction error."""
    _check_shapes(x, x_hat)
    return _per_sample((x - x_hat).abs()).mean(dim=1).mean()


def triplet_distances(feat_anchor: torch.Tensor, feat_pos: torch.Tensor,
                      feat_neg: torch.Tensor) -> TripletDistances:
    """Squared Euclidean anchor-positive and anchor-negative distances."""
    if feat_anchor.shape != feat_pos.shape or feat_anchor.shape != feat_neg.shape:
        raise ValueError("feature vectors must have equal shapes")
    a = _per_sample(feat_anchor) if feat_anchor.dim() > 1 else feat_anchor.reshape(1, -1)
    p = _per_sample(feat_pos) if feat_pos.dim() > 1 else feat_pos.reshape(1, -1)
    n = _per_sample(feat_neg) if feat_neg.dim() > 1 else feat_neg.reshape(1, -1)
    return TripletDistances(
        d_pos=((a - p) ** 2).sum(dim=1),
        d_neg=((a - n) ** 2).sum(dim=1),
    )


def ratio_triplet_loss(d: TripletDistances, margin_ratio: float = 0.3,
                       eps: float = TRIPLET_DENOM_EPS,
                       ratio_cap: Optional[float] = None) -> torch.Tensor:
    """max(margin_ratio + d_pos / d_neg - 1, 0), averaged over the batch.

    Zero whenever the positive is at least ``1 - margin_ratio`` times closer
    to the anchor than the negative. Invariant to common positive scaling of
    both distances, unlike the absolute-margin triplet loss. A negative
    distance below ``eps`` marks a degenerate negative pair; the denominator
    is clamped and the event logged. ``ratio_cap`` optionally bounds the
    distance ratio (the cap is itself scale-invariant); training uses it to
    keep degenerate phases from dominating the objective.
    """
    if not 0.0 < margin_ratio < 1.0:
        raise ValueError("margin_ratio must lie in (0, 1)")
    d_pos = d.d_pos if torch.is_tensor(d.d_pos) else torch.as_tensor(float(d.d_pos))
    d_neg = d.d_neg if torch.is_tensor(d.d_neg) else torch.as_tensor(float(d.d_neg))
    if (d_neg < eps).any():
        _warn_degenerate_negative(eps)
    ratio = d_pos / d_neg.clamp(min=eps)
    if ratio_cap is not None:
        ratio = ratio.clamp(max=ratio_cap)
    return torch.clamp(margin_ratio + ratio - 1.0, min=0.0).mean()


def absolute_triplet_loss(d: TripletDistances, margin: float) -> torch.Tensor:
    """max(margin + d_pos - d_neg, 0): the scale-sensitive form.

    Kept only as a reference point showing why the ratio form is used; it is
    not a training option.
    """
    return torch.clamp(margin + d.d_pos - d.d_neg, min=0.0).mean()


def anatomy_dice_loss(pred: torch.Tensor, truth: torch.Tensor,
                      eps: float = SMOOTH_EPS) -> torch.Tensor:
    """One minus the channel-averaged smoothed soft Dice coefficient."""
    _check_shapes(pred, truth)
    _check_unit_interval(pred, "pred")
    if pred.dim() == 3:
        pred, truth = pred.unsqueeze(0), truth.unsqueeze(0)
    p = pred.reshape(pred.shape[0], pred.shape[1], -1)
    t = truth.reshape(truth.shape[0], truth.shape[1], -1)
    inter = (p * t).sum(dim=2)
    dice = (2.0 * inter + eps) / (p.sum(dim=2) + t.sum(dim=2) + eps)
    return (1.0 - dice.mean(dim=1)).mean()


def kl_divergence(z) -> torch.Tensor:
    """KL(N(mean, diag exp(log_variance)) || N(0, I)), averaged over the batch."""
    mean, log_var = z.mean, z.log_variance
    if not (torch.isfinite(mean).all() and torch.isfinite(log_var).all()):
        raise ValueError("modality factor parameters must be finite")
    if mean.dim() == 1:
        mean, log_var = mean.unsqueeze(0), log_var.unsqueeze(0)
    per_sample = 0.5 * (log_var.exp() + mean.pow(2) - 1.0 - log_var).sum(dim=1)
    return per_sample.mean()


def z_reconstruction_loss(z_sampled: torch.Tensor,
                          z_reencoded: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the decoded-from and re-encoded modality vectors."""
    if z_sampled.shape != z_reencoded.shape:
        raise ValueError("modality vectors must have equal shapes")
    return (z_sampled - z_reencoded).abs().mean()


def adversarial_losses(disc_real_score: torch.Tensor,
                       disc_fake_score: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial losses: (generator, discriminator).

    Discriminator: 0.5 E[(D(x) - 1)^2] + 0.5 E[D(x_hat)^2]; generator:
    0.5 E[(D(x_hat) - 1)^2]. The caller detaches the fake scores for the
    discriminator side.
    """
    if not (torch.isfinite(disc_real_score).all() and torch.isfinite(disc_fake_score).all()):
        raise ValueError("discriminator scores must be finite")
    generator = 0.5 * ((disc_fake_score - 1.0) ** 2).mean()
    discriminator = 0.5 * ((disc_real_score - 1.0) ** 2).mean() \
        + 0.5 * (disc_fake_score ** 2).mean()
    return generator, discriminator


# Component names accepted by total_objective, mapped to their weight fields.
OBJECTIVE_WEIGHTS = {
    "tversky": "tversky",
    "focal": "focal",
    "triplet": "triplet",
    "masked_reconstruction": "reconstruction",
    "anatomy_dice": "anatomy_dice",
    "kl": "kl",
    "z_reconstruction": "z_reconstruction",
    "adversarial_generator": "adversarial",
}


def total_objective(components: Mapping[str, TensorLike],
                    weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the supplied loss components.

    Missing components are simply absent (semi-supervised masking and
    ablations drop terms); unknown names are rejected. Scenario-composed
    values are expected to be composed before entering here.
    """
    total = torch.zeros(())
    for name, value in components.items():
        if name not in OBJECTIVE_WEIGHTS:
            raise ValueError(f"unknown objective component: {name!r}")
        value = value if torch.is_tensor(value) else torch.as_tensor(float(value))
        if not torch.isfinite(value).all():
            raise ValueError(f"non-finite loss component: {name!r}")
        total = total + getattr(weights, OBJECTIVE_WEIGHTS[name]) * value
    return total
