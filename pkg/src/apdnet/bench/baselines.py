"""Fully supervised baselines: U-Net on raw images, U-Net on oracle-masked
images, and a two-stage cascade masking with its own predicted myocardium.

All three train only on pathology-labeled samples (the cascade's anatomy stage
additionally uses every training volume, since anatomy labels are always
available), with the same Tversky + focal weighting and epoch budget as the
disentangled model.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from ..factors import Sample, ensure_unit_range
from ..losses import anatomy_dice_loss, focal_loss, tversky_loss
from ..networks import NetworkConfig, UNet
from ..training import TrainingConfig, samples_to_batch
from .evaluation import EvalReport, evaluate_on_volumes

BASELINE_METHODS = ("unet_masked", "unet_unmasked", "cascaded_unet")

MYOCARDIUM_CHANNEL = 0  # anatomy mask channel holding the myocardium


def _myocardium(batch_anatomy: torch.Tensor) -> torch.Tensor:
    return batch_anatomy[:, MYOCARDIUM_CHANNEL:MYOCARDIUM_CHANNEL + 1]


def _train_epochs(step_fn, samples: Sequence[Sample], cfg: TrainingConfig,
                  metrics_path: Optional[Path] = None, tag: str = "loss") -> None:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.network.pathology_channels
    writer = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(samples))
            total, steps = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [samples[i] for i in order[lo:lo + cfg.batch_size]]
                total += step_fn(samples_to_batch(chunk, cfg.device, k))
                steps += 1
            if writer:
                writer.write(json.dumps({
                    "epoch": epoch, tag: total / max(steps, 1),
                    "wall_time_s": time.perf_counter() - start,
                }) + "\n")
                writer.flush()
    finally:
        if writer:
            writer.close()


class _PathologyHead:
    """Single U-Net trained with Tversky + focal on a method-specific input."""

    def __init__(self, cfg: TrainingConfig):
        net = cfg.network
        self.cfg = cfg
        self.unet = UNet(1, net.pathology_channels, net.base_width, net.depth
                         ).to(cfg.device)
        torch.nn.init.constant_(self.unet.head.bias, -2.0)  # low-foreground prior
        self.opt = torch.optim.Adam(self.unet.parameters(), lr=cfg.learning_rate)

    def step(self, image: torch.Tensor, truth: torch.Tensor) -> float:
        w = self.cfg.loss_weights
        soft = torch.sigmoid(self.unet(image))
        loss = w.tversky * tversky_loss(soft, truth, beta=w.tversky_beta) \
            + w.focal * focal_loss(soft, truth, gamma=w.focal_gamma)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.detach())

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        self.unet.eval()
        out = (torch.sigmoid(self.unet(image)) >= 0.5).float()
        self.unet.train()
        return out


class _AnatomyStage:
    """Cascade stage one: anatomy segmentation trained on every volume."""

    def __init__(self, cfg: TrainingConfig):
        net = cfg.network
        self.unet = UNet(1, net.anatomy_classes + 1, net.base_width, net.depth
                         ).to(cfg.device)
        self.opt = torch.optim.Adam(self.unet.parameters(), lr=cfg.learning_rate)
        self.classes = net.anatomy_classes

    def step(self, image: torch.Tensor, truth: torch.Tensor) -> float:
        probs = torch.softmax(self.unet(image), dim=1)
        loss = anatomy_dice_loss(probs, torch.cat(
            [truth, 1.0 - truth.sum(dim=1, keepdim=True).clamp(max=1.0)], dim=1))
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.detach())

    @torch.no_grad()
    def predict_foreground(self, image: torch.Tensor) -> torch.Tensor:
        self.unet.eval()
        probs = torch.softmax(self.unet(image), dim=1)
        self.unet.train()
        hard = torch.zeros_like(probs)
        hard.scatter_(1, probs.argmax(dim=1, keepdim=True), 1.0)
        return hard[:, :self.classes]


def _images_tensor(samples_or_images, device: str) -> torch.Tensor:
    stack = np.stack([np.moveaxis(ensure_unit_range(im), -1, 0)
                      for im in samples_or_images])
    return torch.from_numpy(stack).float().to(device)


class UnmaskedPredictor:
    def __init__(self, head: _PathologyHead):
        self.head = head

    def predict_masks(self, images, anatomy=None):
        x = _images_tensor(images, self.head.cfg.device)
        pat = self.head.predict(x)
        ana = np.zeros(images.shape[:3] + (0,), dtype=np.uint8)
        return ana, np.moveaxis(pat.cpu().numpy(), 1, -1).astype(np.uint8)


class MaskedPredictor:
    """Oracle reference: masks the input with the ground-truth myocardium,
    which is not generally available at inference time."""

    def __init__(self, head: _PathologyHead):
        self.head = head

    def predict_masks(self, images, anatomy=None):
        if anatomy is None:
            raise ValueError("the masked baseline needs ground-truth anatomy masks")
        x = _images_tensor(images, self.head.cfg.device)
        myo = torch.from_numpy(
            np.moveaxis(anatomy, -1, 1)[:, MYOCARDIUM_CHANNEL:MYOCARDIUM_CHANNEL + 1]
        ).float().to(x.device)
        pat = self.head.predict(x * myo)
        ana = np.zeros(images.shape[:3] + (0,), dtype=np.uint8)
        return ana, np.moveaxis(pat.cpu().numpy(), 1, -1).astype(np.uint8)


class CascadedPredictor:
    def __init__(self, anatomy_stage: _AnatomyStage, head: _PathologyHead):
        self.anatomy_stage = anatomy_stage
        self.head = head

    def predict_masks(self, images, anatomy=None):
        x = _images_tensor(images, self.head.cfg.device)
        fg = self.anatomy_stage.predict_foreground(x)
        pat = self.head.predict(x * _myocardium(fg))
        return (np.moveaxis(fg.cpu().numpy(), 1, -1).astype(np.uint8),
                np.moveaxis(pat.cpu().numpy(), 1, -1).astype(np.uint8))


def _save_baseline(path: Path, method: str, cfg: TrainingConfig,
                   states: Dict[str, dict], extra: Dict) -> None:
    torch.save({
        "method": method,
        "training_config": asdict(cfg),
        "states": states,
        "extra": extra,
    }, path)


def load_baseline_predictor(path) -> Tuple[object, Dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    raw = dict(payload["training_config"])
    raw["loss_weights"] = type(TrainingConfig().loss_weights)(**raw["loss_weights"])
    raw["scenario_weights"] = type(TrainingConfig().scenario_weights)(**raw["scenario_weights"])
    raw["network"] = NetworkConfig(**raw["network"])
    cfg = TrainingConfig(**raw)
    method = payload["method"]
    head = _PathologyHead(cfg)
    head.unet.load_state_dict(payload["states"]["pathology"])
    if method == "unet_unmasked":
        return UnmaskedPredictor(head), payload["extra"]
    if method == "unet_masked":
        return MaskedPredictor(head), payload["extra"]
    if method == "cascaded_unet":
        stage = _AnatomyStage(cfg)
        stage.unet.load_state_dict(payload["states"]["anatomy"])
        return CascadedPredictor(stage, head), payload["extra"]
    raise ValueError(f"unknown baseline method: {method!r}")


def run_baseline(method: str, config: TrainingConfig,
                 train_samples: Sequence[Sample], test_samples: Sequence[Sample],
                 out_dir, config_hash: str = "") -> Tuple[Path, EvalReport]:
    """Train one baseline and evaluate it volume-by-volume on the test set."""
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline method: {method!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    labeled = [s for s in train_samples if s.pathology is not None]
    if not labeled:
        raise ValueError("baselines need at least one pathology-labeled volume")
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")

    head = _PathologyHead(config)
    states: Dict[str, dict] = {}
    extra: Dict = {"pathology_stage_samples": len(labeled)}

    if method == "unet_unmasked":
        _train_epochs(lambda b: head.step(b.image, b.pathology), labeled, config,
                      metrics_path)
        predictor = UnmaskedPredictor(head)
    elif method == "unet_masked":
        _train_epochs(lambda b: head.step(b.image * _myocardium(b.anatomy), b.pathology),
                      labeled, config, metrics_path)
        predictor = MaskedPredictor(head)
    else:  # cascaded_unet
        stage = _AnatomyStage(config)
        # anatomy masks are always available: stage one sees every train volume
        _train_epochs(lambda b: stage.step(b.image, b.anatomy), list(train_samples),
                      config, metrics_path, tag="anatomy_loss")
        extra["anatomy_stage_samples"] = len(train_samples)

        def cascade_step(b):
            with torch.no_grad():
                myo = _myocardium(stage.predict_foreground(b.image))
            return head.step(b.image * myo, b.pathology)

        _train_epochs(cascade_step, labeled, config, metrics_path)
        states["anatomy"] = stage.unet.state_dict()
        predictor = CascadedPredictor(stage, head)

    states["pathology"] = head.unet.state_dict()
    checkpoint_path = out_dir / "checkpoint.pt"
    _save_baseline(checkpoint_path, method, config, states, extra)

    report = evaluate_on_volumes(predictor, test_samples, method=method,
                                 annotation_fraction=config.annotation_fraction,
                                 seed=config.seed, config_hash=config_hash)
    report.save(out_dir / "eval.json")
    return checkpoint_path, report
