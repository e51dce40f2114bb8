"""Forward-computation components: anatomy/pathology/modality encoders, anatomy
segmentor, image decoder, and the reconstruction discriminator with its feature
head.

All modules take channels-first batches ``(B, C, H, W)``. Output shapes depend
only on :class:`NetworkConfig`, never on input content.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .factors import (
    ModalityFactor,
    binarize_soft_factor,
    concat_spatial,
    null_pathology,
    one_hot_argmax,
)

CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Dimensions and widths shared by every component.

    ``disentangle=False`` builds the ablated variant: no modality encoder, the
    decoder conditions on anatomy and pathology only, and the anatomy factor
    stays continuous (no binarization).
    """

    anatomy_channels: int = 8      # C, channels of the anatomy factor
    modality_dims: int = 8         # n_z, length of the modality vector
    pathology_channels: int = 1    # K
    anatomy_classes: int = 2       # N foreground classes (myocardium, LV)
    height: int = 64
    width: int = 64
    base_width: int = 16
    depth: int = 4                 # down/up levels of the U-Net backbones
    disentangle: bool = True

    def __post_init__(self) -> None:
        for name in ("anatomy_channels", "modality_dims", "pathology_channels",
                     "anatomy_classes", "height", "width", "base_width", "depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # the modality encoder downsamples 4 times, the U-Nets `depth` times
        for div in (2 ** self.depth, 16):
            if self.height % div or self.width % div:
                raise ValueError(f"height and width must be divisible by {div}")


@dataclass
class DiscriminatorOutput:
    """Patch realness scores plus the pooled penultimate-layer feature vector."""

    score: torch.Tensor     # (B, 1, h, w) patch map
    features: torch.Tensor  # (B, F)


def _norm(ch: int) -> nn.GroupNorm:
    # per-sample normalization: forward passes stay pure functions of their
    # inputs, so batching samples together never changes per-sample outputs
    return nn.GroupNorm(4 if ch % 4 == 0 else 1, ch)


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        _norm(out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


class UNet(nn.Module):
    """Plain U-Net backbone: double-conv blocks, max-pool down, upsample + skip."""

    def __init__(self, in_channels: int, out_channels: int,
                 base_width: int = 16, depth: int = 4):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.down_blocks = nn.ModuleList()
        ch = in_channels
        for w in widths[:-1]:
            self.down_blocks.append(conv_block(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(widths[-2], widths[-1])
        self.up_samples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for w_skip, w_in in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up_samples.append(nn.ConvTranspose2d(w_in, w_skip, 2, stride=2))
            self.up_blocks.append(conv_block(2 * w_skip, w_skip))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down_blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up_samples, self.up_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([skip, x], dim=1))
        return self.head(x)


class AnatomyEncoder(nn.Module):
    """Image -> anatomy factor: softmax over channels, then straight-through
    binarization (skipped in the no-disentanglement variant)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.binarize = cfg.disentangle
        self.unet = UNet(1, cfg.anatomy_channels, cfg.base_width, cfg.depth)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        soft = torch.softmax(self.unet(x), dim=1)
        hard = binarize_soft_factor(soft, mode="anatomy") if self.binarize else soft
        return soft, hard


class AnatomySegmentor(nn.Module):
    """Anatomy factor -> per-pixel probabilities over N foreground classes + background."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = 4 * cfg.base_width
        self.body = nn.Sequential(
            nn.Conv2d(cfg.anatomy_channels, w, 3, padding=1),
            _norm(w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, w, 3, padding=1),
            _norm(w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, cfg.anatomy_classes + 1, 1),
        )

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.body(s), dim=1)


def hard_anatomy_mask(seg_probs: torch.Tensor) -> torch.Tensor:
    """Predicted anatomy mask: per-pixel argmax one-hot, foreground channels only.

    Straight-through, so gradients still reach the segmentor when the mask is
    used as conditioning. Background (last channel) pixels map to all-zero.
    """
    one_hot = one_hot_argmax(seg_probs)
    return one_hot[:, :-1] if one_hot.dim() == 4 else one_hot[:-1]


class PathologyEncoder(nn.Module):
    """[image, anatomy mask] -> pathology factor via a U-Net, sigmoid output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.unet = UNet(1 + cfg.anatomy_classes, cfg.pathology_channels,
                         cfg.base_width, cfg.depth)
        # pathology covers ~1% of pixels: bias the head toward "healthy" so
        # training starts from a low-foreground prior
        nn.init.constant_(self.unet.head.bias, -2.0)

    def forward(self, x: torch.Tensor,
                anatomy_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        soft = torch.sigmoid(self.unet(concat_spatial([x, anatomy_mask])))
        hard = binarize_soft_factor(soft, mode="pathology")
        return soft, hard


class ModalityEncoder(nn.Module):
    """[image, anatomy factor, pathology mask] -> Gaussian posterior over the
    modality vector, with a reparameterized sample."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        in_ch = 1 + cfg.anatomy_channels + cfg.pathology_channels
        w = cfg.base_width
        layers = []
        for _ in range(4):
            layers += [
                nn.Conv2d(in_ch, w, 3, stride=2, padding=1),
                # the final map can be 1x1; normalize across channels jointly
                nn.GroupNorm(1, w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            in_ch = w
        self.conv = nn.Sequential(*layers)
        flat = w * (cfg.height // 16) * (cfg.width // 16)
        self.dense = nn.Sequential(nn.Linear(flat, 32), nn.LeakyReLU(0.2, inplace=True))
        self.mean_head = nn.Linear(32, cfg.modality_dims)
        self.log_var_head = nn.Linear(32, cfg.modality_dims)

    def forward(self, x: torch.Tensor, s: torch.Tensor, pathology_mask: torch.Tensor,
                noise: Optional[torch.Tensor] = None) -> ModalityFactor:
        h = self.conv(concat_spatial([x, s, pathology_mask]))
        h = self.dense(h.flatten(start_dim=1))
        mean = self.mean_head(h)
        log_var = self.log_var_head(h)
        if noise is None:
            noise = torch.randn_like(mean)
        sample = mean + torch.exp(0.5 * log_var) * noise
        return ModalityFactor(mean=mean, log_variance=log_var, sample=sample)


class Decoder(nn.Module):
    """[anatomy factor, pathology factor, tiled modality vector] -> image in [0, 1].

    No normalization layers, so the output is a pure function of the inputs at
    fixed parameters.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        z_ch = cfg.modality_dims if cfg.disentangle else 0
        in_ch = cfg.anatomy_channels + cfg.pathology_channels + z_ch
        w = max(8, cfg.base_width)
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, w, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, w, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 1, 3, padding=1),
        )

    def forward(self, s: torch.Tensor, p: torch.Tensor,
                z_sample: Optional[torch.Tensor] = None) -> torch.Tensor:
        parts = [s, p]
        if z_sample is not None:
            tiled = z_sample[:, :, None, None].expand(-1, -1, s.shape[-2], s.shape[-1])
            parts.append(tiled)
        return torch.sigmoid(self.body(concat_spatial(parts)))


class Discriminator(nn.Module):
    """Strided patch classifier over images, exposing penultimate features."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.base_width
        self.blocks = nn.Sequential(
            nn.Conv2d(1, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 8 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.score_head = nn.Conv2d(8 * w, 1, 3, padding=1)
        self.feature_dim = 8 * w

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        h = self.blocks(x)
        return DiscriminatorOutput(
            score=self.score_head(h),
            features=h.mean(dim=(-2, -1)),
        )


class APDNet(nn.Module):
    """The generator side: both spatial encoders, the anatomy segmentor, the
    modality encoder (unless disentanglement is ablated), and the decoder."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.anatomy_encoder = AnatomyEncoder(cfg)
        self.anatomy_segmentor = AnatomySegmentor(cfg)
        self.pathology_encoder = PathologyEncoder(cfg)
        self.modality_encoder = ModalityEncoder(cfg) if cfg.disentangle else None
        self.decoder = Decoder(cfg)

    def _check_image(self, x: torch.Tensor) -> None:
        if x.shape[-3:] != (1, self.cfg.height, self.cfg.width):
            raise ValueError(
                f"expected image of shape (*, 1, {self.cfg.height}, {self.cfg.width}), "
                f"got {tuple(x.shape)}"
            )

    def encode_anatomy(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        self._check_image(x)
        return self.anatomy_encoder(x)

    def segment_anatomy(self, s: torch.Tensor) -> torch.Tensor:
        return self.anatomy_segmentor(s)

    def encode_pathology(self, x: torch.Tensor,
                         anatomy_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        self._check_image(x)
        return self.pathology_encoder(x, anatomy_mask)

    def encode_modality(self, x: torch.Tensor, s: torch.Tensor,
                        pathology_mask: torch.Tensor,
                        noise: Optional[torch.Tensor] = None) -> ModalityFactor:
        if self.modality_encoder is None:
            raise RuntimeError("modality encoder disabled (disentangle=False)")
        self._check_image(x)
        return self.modality_encoder(x, s, pathology_mask, noise=noise)

    def decode(self, s: torch.Tensor, p: torch.Tensor,
               z_sample: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.decoder(s, p, z_sample)

    def decode_pseudo_healthy(self, s: torch.Tensor, p: torch.Tensor,
                              z_sample: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.decoder(s, null_pathology(p), z_sample)

    @torch.no_grad()
    def predict(self, x: torch.Tensor,
                noise: Optional[torch.Tensor] = None
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Inference path: (anatomy class probabilities, soft pathology map).

        Pathology conditioning uses the predicted anatomy mask, matching the
        predicted-anatomy training scenario.
        """
        was_training = self.training
        self.eval()
        try:
            _, s_hard = self.encode_anatomy(x)
            seg = self.segment_anatomy(s_hard)
            pat_soft, _ = self.encode_pathology(x, hard_anatomy_mask(seg))
        finally:
            self.train(was_training)
        return seg, pat_soft


def save_checkpoint(path, model: APDNet, discriminator: Discriminator,
                    extra: Optional[dict] = None) -> None:
    """Single-archive checkpoint: named parameter tensors plus the config."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "discriminator_state": discriminator.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: Optional[NetworkConfig] = None
                    ) -> Tuple[APDNet, Discriminator, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = NetworkConfig(**payload["config"])
    if expected_config is not None and cfg != expected_config:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expected_config}")
    model = APDNet(cfg)
    model.load_state_dict(payload["model_state"])
    discriminator = Discriminator(cfg)
    discriminator.load_state_dict(payload["discriminator_state"])
    return model, discriminator, payload.get("extra", {})
