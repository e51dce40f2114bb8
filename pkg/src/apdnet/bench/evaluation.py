"""Volume-level Dice evaluation with mean/std aggregation over volumes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from ..factors import Sample, ensure_unit_range
from ..networks import APDNet, hard_anatomy_mask


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2 |A n B| / (|A| + |B|) on binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    for name, m in (("pred", pred), ("truth", truth)):
        vals = np.unique(m)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    inter = int((pred.astype(bool) & truth.astype(bool)).sum())
    return 2.0 * inter / total


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and population standard deviation over volumes."""
    if len(values) == 0:
        raise ValueError("nothing to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


class SegmentationPredictor(Protocol):
    """Anything that maps a stack of image slices to binary masks.

    ``anatomy`` carries the ground-truth masks for predictors that need them
    (the oracle-masked baseline); most predictors ignore it.
    """

    def predict_masks(self, images: np.ndarray,
                      anatomy: Optional[np.ndarray] = None
                      ) -> Tuple[np.ndarray, np.ndarray]:
        """images (S, H, W, 1) -> (anatomy (S, H, W, N) or empty, pathology (S, H, W, K))."""
        ...


class APDNetPredictor:
    """Inference wrapper: predicted-anatomy conditioning, 0.5 threshold."""

    def __init__(self, model: APDNet, device: str = "cpu"):
        self.model = model.to(device).eval()
        self.device = device

    def predict_masks(self, images: np.ndarray,
                      anatomy: Optional[np.ndarray] = None
                      ) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.model.cfg
        if images.shape[1:3] != (cfg.height, cfg.width):
            raise ValueError(
                f"checkpoint expects {cfg.height}x{cfg.width} slices, "
                f"got {images.shape[1:3]}")
        stack = np.stack([np.moveaxis(ensure_unit_range(im), -1, 0) for im in images])
        x = torch.from_numpy(stack).float().to(self.device)
        with torch.no_grad():
            seg, pat_soft = self.model.predict(x)
            anatomy = hard_anatomy_mask(seg)
        ana = np.moveaxis(anatomy.cpu().numpy(), 1, -1).astype(np.uint8)
        pat = np.moveaxis((pat_soft >= 0.5).cpu().numpy(), 1, -1).astype(np.uint8)
        return ana, pat


def _ordered_volume(samples: Sequence[Sample]) -> List[Sample]:
    ordered = sorted(samples, key=lambda s: s.slice_index)
    indices = [s.slice_index for s in ordered]
    expected = list(range(min(indices), min(indices) + len(indices)))
    if indices != expected:
        raise ValueError(f"volume {ordered[0].volume_id}: missing or duplicate slices")
    return ordered


def evaluate_volume(predictor: SegmentationPredictor, samples: Sequence[Sample]
                    ) -> Dict[str, object]:
    """Pooled-pixel Dice over all slices of one volume, per structure.

    Anatomy Dice is the mean over foreground classes (NaN if the predictor
    produces no anatomy); pathology Dice uses the empty-empty = 1.0 convention
    and that event is flagged.
    """
    ordered = _ordered_volume(samples)
    if any(s.pathology is None for s in ordered):
        raise ValueError("evaluation volumes must carry pathology masks")
    images = np.stack([s.image for s in ordered])
    truth_ana = np.stack([s.anatomy for s in ordered])
    truth_pat = np.stack([s.pathology for s in ordered])
    ana_pred, pat_pred = predictor.predict_masks(images, anatomy=truth_ana)

    if ana_pred.size:
        per_class = [dice_score(ana_pred[..., c], truth_ana[..., c])
                     for c in range(truth_ana.shape[-1])]
        dice_ana = float(np.mean(per_class))
    else:
        dice_ana = float("nan")
    empty_empty = pat_pred.sum() == 0 and truth_pat.sum() == 0
    dice_pat = dice_score(pat_pred, truth_pat)
    return {
        "volume_id": ordered[0].volume_id,
        "dice_anatomy": dice_ana,
        "dice_pathology": dice_pat,
        "pathology_empty_empty": bool(empty_empty),
    }


@dataclass
class EvalReport:
    """Per-volume Dice plus aggregates; aggregates recompute from the entries."""

    method: str
    annotation_fraction: float
    seed: int
    config_hash: str
    volumes: List[Dict[str, object]] = field(default_factory=list)
    dice_anatomy_mean: float = float("nan")
    dice_anatomy_std: float = float("nan")
    dice_pathology_mean: float = float("nan")
    dice_pathology_std: float = float("nan")

    def recompute(self) -> "EvalReport":
        pat = [v["dice_pathology"] for v in self.volumes]
        self.dice_pathology_mean, self.dice_pathology_std = aggregate(pat)
        ana = [v["dice_anatomy"] for v in self.volumes
               if not np.isnan(v["dice_anatomy"])]
        if ana:
            self.dice_anatomy_mean, self.dice_anatomy_std = aggregate(ana)
        return self

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @staticmethod
    def load(path) -> "EvalReport":
        with open(path) as f:
            return EvalReport(**json.load(f))


def evaluate_on_volumes(predictor: SegmentationPredictor, samples: Sequence[Sample],
                        method: str, annotation_fraction: float, seed: int,
                        config_hash: str) -> EvalReport:
    """One Dice pair per volume (never per slice), then mean/std over volumes."""
    by_volume: Dict[str, List[Sample]] = {}
    for s in samples:
        by_volume.setdefault(s.volume_id, []).append(s)
    report = EvalReport(method=method, annotation_fraction=annotation_fraction,
                        seed=seed, config_hash=config_hash)
    for vid in sorted(by_volume):
        report.volumes.append(evaluate_volume(predictor, by_volume[vid]))
    return report.recompute()
