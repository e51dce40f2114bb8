"""Reconstruction panels and pathology-difference heat maps for trained models."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from scipy import ndimage  # noqa: E402

from ..factors import Sample, ensure_unit_range  # noqa: E402
from ..networks import APDNet, hard_anatomy_mask  # noqa: E402


@torch.no_grad()
def reconstruction_views(model: APDNet, sample: Sample,
                         device: str = "cpu") -> Dict[str, np.ndarray]:
    """Deterministic reconstructions of one slice (modality noise at zero):
    with the predicted pathology factor, with the real mask when present, and
    pseudo-healthy with the factor nulled."""
    model = model.to(device).eval()
    x = torch.from_numpy(
        np.moveaxis(ensure_unit_range(sample.image), -1, 0)[None]).float().to(device)
    _, s = model.encode_anatomy(x)
    seg = model.segment_anatomy(s)
    p_soft, p_hard = model.encode_pathology(x, hard_anatomy_mask(seg))

    def modality(p):
        if not model.cfg.disentangle:
            return None
        z = model.encode_modality(x, s, p, noise=torch.zeros(
            1, model.cfg.modality_dims, device=device))
        return z.sample

    z_pred = modality(p_hard)
    views = {
        "input": sample.image[..., 0],
        "predicted_pathology": p_hard[0, 0].cpu().numpy(),
        "anatomy_prediction": np.moveaxis(
            hard_anatomy_mask(seg)[0].cpu().numpy(), 0, -1),
        "reconstruction": model.decode(s, p_hard, z_pred)[0, 0].cpu().numpy(),
        "pseudo_healthy": model.decode_pseudo_healthy(s, p_hard, z_pred)[0, 0].cpu().numpy(),
    }
    if sample.pathology is not None:
        y_pat = torch.from_numpy(
            np.moveaxis(sample.pathology, -1, 0)[None]).float().to(device)
        views["reconstruction_real_mask"] = model.decode(
            s, y_pat, modality(y_pat))[0, 0].cpu().numpy()
    views["difference"] = np.abs(views["reconstruction"] - views["pseudo_healthy"])
    return views


def _overlay(ax, image: np.ndarray, sample: Sample, predicted: np.ndarray) -> None:
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    for mask, color, label in (
            (sample.anatomy[..., 0], "deepskyblue", "myocardium"),
            (sample.pathology[..., 0] if sample.pathology is not None else None,
             "red", "infarct"),
            (predicted, "yellow", "predicted infarct")):
        if mask is not None and mask.any():
            ax.contour(mask, levels=[0.5], colors=color, linewidths=1.0)
    ax.set_title("overlays", fontsize=8)


def emit_visuals(model: APDNet, samples: Sequence[Sample], out_dir,
                 count: int = 8, device: str = "cpu") -> List[Path]:
    """Per sample: a five-tile panel (input, reconstruction with predicted
    pathology, reconstruction with the real mask, pseudo-healthy, overlays)
    plus a separate difference heat map. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    labeled = [s for s in samples if s.pathology is not None]
    for sample in labeled[:count]:
        views = reconstruction_views(model, sample, device=device)
        tiles = [
            ("input", views["input"]),
            ("recon (predicted p)", views["reconstruction"]),
            ("recon (real mask)", views["reconstruction_real_mask"]),
            ("pseudo-healthy", views["pseudo_healthy"]),
        ]
        fig, axes = plt.subplots(1, 5, figsize=(15, 3.2))
        for ax, (title, img) in zip(axes, tiles):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_title(title, fontsize=8)
        _overlay(axes[4], views["input"], sample, views["predicted_pathology"])
        for ax in axes:
            ax.set_axis_off()
        stem = f"{sample.volume_id}_slice{sample.slice_index:03d}"
        panel_path = out_dir / f"panel_{stem}.png"
        fig.tight_layout()
        fig.savefig(panel_path, dpi=120)
        plt.close(fig)
        written.append(panel_path)

        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        im = ax.imshow(views["difference"], cmap="magma")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_axis_off()
        ax.set_title("|recon - pseudo-healthy|", fontsize=8)
        heat_path = out_dir / f"heatmap_{stem}.png"
        fig.tight_layout()
        fig.savefig(heat_path, dpi=120)
        plt.close(fig)
        written.append(heat_path)
    return written


def difference_mass_inside_infarct(model: APDNet, samples: Sequence[Sample],
                                   dilation_px: int = 2,
                                   device: str = "cpu") -> float:
    """Fraction of |recon - pseudo-healthy| mass inside the dilated true
    infarct, averaged over slices that contain an infarct.

    A well-disentangled pathology factor concentrates the reconstruction
    difference on the diseased region.
    """
    ratios = []
    for sample in samples:
        if sample.pathology is None or not sample.pathology.any():
            continue
        views = reconstruction_views(model, sample, device=device)
        diff = views["difference"]
        total = float(diff.sum())
        if total == 0.0:
            ratios.append(0.0)
            continue
        dilated = ndimage.binary_dilation(sample.pathology[..., 0].astype(bool),
                                          iterations=dilation_px)
        ratios.append(float(diff[dilated].sum()) / total)
    if not ratios:
        raise ValueError("no slices with infarct to evaluate")
    return float(np.mean(ratios))
