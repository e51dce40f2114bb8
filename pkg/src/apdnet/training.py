"""Teacher-forcing training: scenario forwards (predicted-anatomy, real-anatomy,
real-pathology), scenario-weighted loss composition, semi-supervised batch
masking, and the adversarial alternation loop.

Each batch may mix pathology-labeled and unlabeled samples. Supervised
pathology losses and the real-pathology scenario apply only to the labeled
rows; reconstruction-side losses apply to everything.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .factors import ModalityFactor, Sample, ensure_unit_range
from .losses import (
    LossWeights,
    adversarial_losses,
    anatomy_dice_loss,
    focal_loss,
    kl_divergence,
    l1_reconstruction_loss,
    masked_reconstruction_loss,
    ratio_triplet_loss,
    total_objective,
    triplet_distances,
    tversky_loss,
    z_reconstruction_loss,
)
from .networks import (
    APDNet,
    Discriminator,
    DiscriminatorOutput,
    NetworkConfig,
    hard_anatomy_mask,
    save_checkpoint,
)

log = logging.getLogger(__name__)

# Conditioning scenarios: which mask feeds the pathology encoder, and whether
# the real pathology mask drives the modality encoder and decoder.
PREDICTED_ANATOMY = "predicted_anatomy"
REAL_ANATOMY = "real_anatomy"
REAL_PATHOLOGY = "real_pathology"

# Losses that are recomputed per scenario and enter the scenario-weighted sum.
SCENARIO_COMPOSED_LOSSES = (
    "z_reconstruction", "triplet", "adversarial_generator",
    "masked_reconstruction", "kl",
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss component goes non-finite; names the component."""


@dataclass
class ScenarioWeights:
    """Relative weights of the three conditioning scenarios."""

    predicted_anatomy: float = 1.0
    real_anatomy: float = 0.7
    real_pathology: float = 0.5

    def __post_init__(self) -> None:
        for name in ("predicted_anatomy", "real_anatomy", "real_pathology"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def weight(self, scenario: str) -> float:
        return getattr(self, scenario)


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    annotation_fraction: float = 1.0
    mask_recon_off: bool = False        # replace the weighted recon with plain L1
    disentangle_off: bool = False       # drop the modality encoder, keep s continuous
    teacher_forcing_off: bool = False   # predicted-anatomy scenario only
    triplet_off: bool = False
    device: str = "cpu"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    scenario_weights: ScenarioWeights = field(default_factory=ScenarioWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.annotation_fraction <= 1.0:
            raise ValueError("annotation_fraction must lie in (0, 1]")


@dataclass
class TrainingBatch:
    image: torch.Tensor      # (B, 1, H, W)
    anatomy: torch.Tensor    # (B, N, H, W)
    pathology: torch.Tensor  # (B, K, H, W), zero-filled on unlabeled rows
    labeled: torch.Tensor    # (B,) bool

    def rows(self, labeled_only: bool) -> "TrainingBatch":
        if not labeled_only:
            return self
        idx = self.labeled.nonzero(as_tuple=True)[0]
        return TrainingBatch(self.image[idx], self.anatomy[idx],
                             self.pathology[idx], self.labeled[idx])


def samples_to_batch(samples: Sequence[Sample], device: str = "cpu",
                     pathology_channels: int = 1) -> TrainingBatch:
    """Stack samples into channels-first tensors; unlabeled pathology is zero."""
    images, anatomies, pathologies, labeled = [], [], [], []
    for s in samples:
        images.append(np.moveaxis(ensure_unit_range(s.image), -1, 0))
        anatomies.append(np.moveaxis(s.anatomy, -1, 0))
        if s.pathology is not None:
            pathologies.append(np.moveaxis(s.pathology, -1, 0))
        else:
            pathologies.append(np.zeros((pathology_channels,) + s.image.shape[:2]))
        labeled.append(s.pathology is not None)
    to = lambda arrs: torch.from_numpy(np.stack(arrs)).float().to(device)
    return TrainingBatch(to(images), to(anatomies), to(pathologies),
                         torch.tensor(labeled, device=device))


def available_scenarios(labeled: bool, teacher_forcing_off: bool = False) -> Tuple[str, ...]:
    """Which conditioning scenarios apply to a sample."""
    if teacher_forcing_off:
        return (PREDICTED_ANATOMY,)
    if labeled:
        return (PREDICTED_ANATOMY, REAL_ANATOMY, REAL_PATHOLOGY)
    return (PREDICTED_ANATOMY, REAL_ANATOMY)


@dataclass
class SharedForward:
    """Per-batch computations reused by every scenario."""

    s_soft: torch.Tensor
    s_hard: torch.Tensor
    seg_probs: torch.Tensor
    anatomy_pred: torch.Tensor  # straight-through one-hot foreground mask

    def rows(self, idx: torch.Tensor) -> "SharedForward":
        return SharedForward(self.s_soft[idx], self.s_hard[idx],
                             self.seg_probs[idx], self.anatomy_pred[idx])


@dataclass
class ScenarioBundle:
    """Outputs of one conditioning scenario."""

    scenario: str
    pathology_soft: Optional[torch.Tensor]  # None for the real-pathology scenario
    pathology: torch.Tensor                 # factor fed to modality encoder / decoder
    z: Optional[ModalityFactor]
    recon: torch.Tensor
    pseudo_healthy: Optional[torch.Tensor]


def forward_shared(model: APDNet, image: torch.Tensor) -> SharedForward:
    s_soft, s_hard = model.encode_anatomy(image)
    seg = model.segment_anatomy(s_hard)
    return SharedForward(s_soft, s_hard, seg, hard_anatomy_mask(seg))


def scenario_forward(model: APDNet, batch: TrainingBatch, scenario: str,
                     shared: Optional[SharedForward] = None,
                     compute_pseudo: bool = True) -> ScenarioBundle:
    """Run one conditioning scenario over a batch.

    The real-pathology scenario requires every sample in the batch to carry a
    pathology mask; callers slice mixed batches down to the labeled rows first.
    """
    if shared is None:
        shared = forward_shared(model, batch.image)
    if scenario == PREDICTED_ANATOMY:
        pathology_soft, pathology = model.encode_pathology(batch.image, shared.anatomy_pred)
    elif scenario == REAL_ANATOMY:
        pathology_soft, pathology = model.encode_pathology(batch.image, batch.anatomy)
    elif scenario == REAL_PATHOLOGY:
        if not bool(batch.labeled.all()):
            raise ValueError("real-pathology scenario requires pathology-labeled samples")
        pathology_soft, pathology = None, batch.pathology
    else:
        raise ValueError(f"unknown scenario: {scenario!r}")

    z = None
    z_sample = None
    if model.cfg.disentangle:
        z = model.encode_modality(batch.image, shared.s_hard, pathology)
        z_sample = z.sample
    recon = model.decode(shared.s_hard, pathology, z_sample)
    pseudo = model.decode_pseudo_healthy(shared.s_hard, pathology, z_sample) \
        if compute_pseudo else None
    return ScenarioBundle(scenario, pathology_soft, pathology, z, recon, pseudo)


def compose_scenario_losses(per_scenario: Mapping[str, Mapping[str, torch.Tensor]],
                            weights: ScenarioWeights) -> Dict[str, torch.Tensor]:
    """Scenario-weighted sum of each loss over the scenarios actually present."""
    composed: Dict[str, torch.Tensor] = {}
    for scenario, terms in per_scenario.items():
        w = weights.weight(scenario)
        for name, value in terms.items():
            composed[name] = composed.get(name, 0.0) + w * value
    return composed


def _take(t: torch.Tensor, rows: Optional[torch.Tensor]) -> torch.Tensor:
    """Row subset, where None means the whole batch (no copy)."""
    return t if rows is None else t[rows]


@dataclass
class ScenarioPack:
    """All scenario forwards of one batch, evaluated in fused calls.

    Per-scenario outputs live in concatenated tensors indexed by ``segments``;
    every normalization layer is per-sample, so the fused evaluation is exactly
    equivalent to running each scenario on its own.
    """

    shared: SharedForward
    order: List[str]
    rows: Dict[str, Optional[torch.Tensor]]  # rows covered; None = full batch
    segments: Dict[str, slice]               # segment in the concatenated axis
    pathology_soft: Dict[str, torch.Tensor]
    image_rep: torch.Tensor
    pathology_mask_rep: torch.Tensor    # real masks (zeros on unlabeled rows)
    factor_rep: torch.Tensor            # factors fed to the decoder
    s_rep: torch.Tensor
    z: Optional[ModalityFactor]
    recon: torch.Tensor
    pseudo: Optional[torch.Tensor]

    def bundles(self) -> Dict[str, ScenarioBundle]:
        out = {}
        for name in self.order:
            seg = self.segments[name]
            z = None
            if self.z is not None:
                z = ModalityFactor(self.z.mean[seg], self.z.log_variance[seg],
                                   self.z.sample[seg])
            out[name] = ScenarioBundle(
                scenario=name,
                pathology_soft=self.pathology_soft.get(name),
                pathology=self.factor_rep[seg],
                z=z,
                recon=self.recon[seg],
                pseudo_healthy=None if self.pseudo is None else self.pseudo[seg],
            )
        return out


class Trainer:
    """One adversarial alternation per batch: discriminator first, then the
    generator side with all remaining objectives."""

    def __init__(self, config: TrainingConfig):
        self.cfg = config
        network = config.network
        if config.disentangle_off and network.disentangle:
            network = replace(network, disentangle=False)
        self.model = APDNet(network).to(config.device)
        self.discriminator = Discriminator(network).to(config.device)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(),
                                      lr=config.learning_rate)

    def forward_scenarios(self, batch: TrainingBatch) -> ScenarioPack:
        """Evaluate every applicable scenario with fused network calls."""
        cfg = self.cfg
        model = self.model
        n = batch.image.shape[0]
        labeled_rows = batch.labeled.nonzero(as_tuple=True)[0]
        shared = forward_shared(model, batch.image)

        order: List[str] = [PREDICTED_ANATOMY]
        rows: Dict[str, Optional[torch.Tensor]] = {PREDICTED_ANATOMY: None}
        if not cfg.teacher_forcing_off:
            order.append(REAL_ANATOMY)
            rows[REAL_ANATOMY] = None
            if len(labeled_rows):
                order.append(REAL_PATHOLOGY)
                rows[REAL_PATHOLOGY] = labeled_rows

        # one pathology-encoder call covers both conditioning variants
        encode_with = [shared.anatomy_pred]
        if REAL_ANATOMY in rows:
            encode_with.append(batch.anatomy)
        p_soft_all, p_hard_all = model.encode_pathology(
            torch.cat([batch.image] * len(encode_with)),
            torch.cat(encode_with))
        pathology_soft = {PREDICTED_ANATOMY: p_soft_all[:n]}
        factors = {PREDICTED_ANATOMY: p_hard_all[:n]}
        if REAL_ANATOMY in rows:
            pathology_soft[REAL_ANATOMY] = p_soft_all[n:2 * n]
            factors[REAL_ANATOMY] = p_hard_all[n:2 * n]
        if REAL_PATHOLOGY in rows:
            factors[REAL_PATHOLOGY] = _take(batch.pathology, labeled_rows)

        segments: Dict[str, slice] = {}
        offset = 0
        for name in order:
            count = n if rows[name] is None else len(rows[name])
            segments[name] = slice(offset, offset + count)
            offset += count
        image_rep = torch.cat([_take(batch.image, rows[name]) for name in order])
        s_rep = torch.cat([_take(shared.s_hard, rows[name]) for name in order])
        factor_rep = torch.cat([factors[name] for name in order])
        pathology_mask_rep = torch.cat(
            [_take(batch.pathology, rows[name]) for name in order])

        z = None
        z_sample = None
        if model.cfg.disentangle:
            # one noise draw per scenario segment, in scenario order, so a
            # teacher-forcing-off run consumes exactly the same draws as the
            # predicted-anatomy segment of a full run
            noise = torch.cat([
                torch.randn(segments[name].stop - segments[name].start,
                            model.cfg.modality_dims, device=image_rep.device)
                for name in order])
            z = model.encode_modality(image_rep, s_rep, factor_rep, noise=noise)
            z_sample = z.sample
        if cfg.triplet_off:
            recon = model.decode(s_rep, factor_rep, z_sample)
            pseudo = None
        else:
            # decode reconstructions and pseudo-healthy images in one call
            both = model.decode(
                torch.cat([s_rep, s_rep]),
                torch.cat([factor_rep, torch.zeros_like(factor_rep)]),
                None if z_sample is None else torch.cat([z_sample, z_sample]))
            recon, pseudo = both[:offset], both[offset:]
        if not torch.isfinite(recon).all():
            raise TrainingDiverged("non-finite reconstruction")
        return ScenarioPack(shared=shared, order=order, rows=rows,
                            segments=segments, pathology_soft=pathology_soft,
                            image_rep=image_rep,
                            pathology_mask_rep=pathology_mask_rep,
                            factor_rep=factor_rep, s_rep=s_rep, z=z,
                            recon=recon, pseudo=pseudo)

    def step(self, batch: TrainingBatch) -> Dict[str, float]:
        cfg = self.cfg
        w = cfg.loss_weights
        n = batch.image.shape[0]
        pack = self.forward_scenarios(batch)

        # Discriminator update on detached reconstructions.
        self.opt_d.zero_grad()
        d_all = self.discriminator(torch.cat([batch.image, pack.recon.detach()]))
        real_score = d_all.score[:n]
        d_terms = {}
        for name in pack.order:
            seg = pack.segments[name]
            fake_score = d_all.score[n + seg.start:n + seg.stop]
            _, d_loss = adversarial_losses(_take(real_score, pack.rows[name]),
                                           fake_score)
            d_terms[name] = {"adversarial_discriminator": d_loss}
        d_composed = compose_scenario_losses(d_terms, cfg.scenario_weights)
        d_total = w.adversarial * d_composed["adversarial_discriminator"]
        if not torch.isfinite(d_total):
            raise TrainingDiverged("non-finite loss component: adversarial_discriminator")
        d_total.backward()
        self.opt_d.step()

        # Generator-side update against the just-updated discriminator.
        self.opt_g.zero_grad()
        g_inputs = [batch.image, pack.recon]
        if pack.pseudo is not None:
            g_inputs.append(pack.pseudo)
        g_all = self.discriminator(torch.cat(g_inputs))
        m = pack.recon.shape[0]
        real_out = DiscriminatorOutput(g_all.score[:n], g_all.features[:n])
        fake_out = DiscriminatorOutput(g_all.score[n:n + m], g_all.features[n:n + m])
        pseudo_out = None
        if pack.pseudo is not None:
            pseudo_out = DiscriminatorOutput(g_all.score[n + m:], g_all.features[n + m:])
        z_re_mean = None
        if pack.z is not None:
            z_re = self.model.encode_modality(pack.recon, pack.s_rep, pack.factor_rep,
                                              noise=torch.zeros_like(pack.z.mean))
            z_re_mean = z_re.mean

        per_scenario: Dict[str, Dict[str, torch.Tensor]] = {}
        for name in pack.order:
            seg = pack.segments[name]
            rows = pack.rows[name]
            terms: Dict[str, torch.Tensor] = {}
            if cfg.mask_recon_off:
                terms["masked_reconstruction"] = l1_reconstruction_loss(
                    pack.image_rep[seg], pack.recon[seg])
            else:
                terms["masked_reconstruction"] = masked_reconstruction_loss(
                    pack.image_rep[seg], pack.recon[seg],
                    pack.pathology_mask_rep[seg], rho=w.pathology_weight)
            if pack.z is not None:
                z_seg = ModalityFactor(pack.z.mean[seg], pack.z.log_variance[seg],
                                       pack.z.sample[seg])
                terms["kl"] = kl_divergence(z_seg)
                terms["z_reconstruction"] = z_reconstruction_loss(
                    pack.z.sample[seg], z_re_mean[seg])
            if pseudo_out is not None:
                dists = triplet_distances(fake_out.features[seg],
                                          _take(real_out.features, rows),
                                          pseudo_out.features[seg])
                terms["triplet"] = ratio_triplet_loss(
                    dists, margin_ratio=w.margin_ratio,
                    eps=w.triplet_denominator_floor,
                    ratio_cap=w.triplet_ratio_cap)
            gen_adv, _ = adversarial_losses(_take(real_out.score, rows).detach(),
                                            fake_out.score[seg])
            terms["adversarial_generator"] = gen_adv
            per_scenario[name] = terms

        components = compose_scenario_losses(per_scenario, cfg.scenario_weights)
        components["anatomy_dice"] = anatomy_dice_loss(
            pack.shared.seg_probs[:, :-1], batch.anatomy)
        labeled = batch.rows(True)
        if labeled.image.shape[0]:
            pa_soft = pack.pathology_soft[PREDICTED_ANATOMY][batch.labeled]
            components["tversky"] = tversky_loss(pa_soft, labeled.pathology,
                                                 beta=w.tversky_beta)
            components["focal"] = focal_loss(pa_soft, labeled.pathology,
                                             gamma=w.focal_gamma)

        for name, value in components.items():
            if not torch.isfinite(torch.as_tensor(value)).all():
                raise TrainingDiverged(f"non-finite loss component: {name}")
        total = total_objective(components, w)
        if total.requires_grad:
            total.backward()
            self.opt_g.step()

        report = {name: float(torch.as_tensor(value).detach())
                  for name, value in components.items()}
        report["total"] = float(total.detach())
        report["adversarial_discriminator"] = float(d_total.detach())
        return report


@dataclass
class TrainingResult:
    checkpoint_path: Path
    metrics_path: Path
    final_report: Dict[str, float]


def run_training(config: TrainingConfig, train_samples: Sequence[Sample],
                 out_dir,
                 validator: Optional[Callable[[APDNet], Tuple[float, float]]] = None,
                 ) -> TrainingResult:
    """Train for the configured number of epochs and write checkpoint + metrics.

    One metrics record per epoch (line-delimited JSON) with every loss
    component, validation Dice when a validator is supplied, and wall time.
    The final-epoch parameters are the checkpoint; there is no
    validation-based model selection.
    """
    if not train_samples:
        raise ValueError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    trainer = Trainer(config)
    k = config.network.pathology_channels

    metrics_path = out_dir / "metrics.jsonl"
    epoch_means: Dict[str, float] = {}
    with metrics_path.open("w") as metrics:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(train_samples))
            sums: Dict[str, float] = {}
            counts: Dict[str, int] = {}
            for lo in range(0, len(order), config.batch_size):
                chunk = [train_samples[i] for i in order[lo:lo + config.batch_size]]
                report = trainer.step(samples_to_batch(chunk, config.device, k))
                for name, value in report.items():
                    sums[name] = sums.get(name, 0.0) + value
                    counts[name] = counts.get(name, 0) + 1
            epoch_means = {name: sums[name] / counts[name] for name in sums}
            record = {"epoch": epoch, **epoch_means}
            if validator is not None:
                val_ana, val_pat = validator(trainer.model)
                record["val_dice_anatomy"] = val_ana
                record["val_dice_pathology"] = val_pat
            else:
                record["val_dice_anatomy"] = None
                record["val_dice_pathology"] = None
            record["wall_time_s"] = time.perf_counter() - start
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()
            log.info("epoch %d/%d total=%.4f", epoch, config.epochs,
                     epoch_means.get("total", float("nan")))

    checkpoint_path = out_dir / "checkpoint.pt"
    save_checkpoint(checkpoint_path, trainer.model, trainer.discriminator,
                    extra={"epochs": config.epochs, "training_config": asdict(config)})
    return TrainingResult(checkpoint_path, metrics_path, epoch_means)
