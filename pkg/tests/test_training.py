"""Scenario system, loss composition, semi-supervised masking, and the training loop."""

import json

import pytest
import torch

from apdnet.losses import LossWeights
from apdnet.networks import NetworkConfig
from apdnet.phantom import PhantomConfig, generate_phantom
from apdnet.training import (
    PREDICTED_ANATOMY,
    REAL_ANATOMY,
    REAL_PATHOLOGY,
    ScenarioWeights,
    Trainer,
    TrainingConfig,
    TrainingDiverged,
    available_scenarios,
    compose_scenario_losses,
    run_training,
    samples_to_batch,
    scenario_forward,
)

TINY_NET = dict(height=16, width=16, base_width=4, depth=2)
TINY_PHANTOM = dict(height=16, width=16, volumes=4, slices_per_volume=2,
                    center_jitter=1, outer_radius_range=(4.0, 5.5),
                    wall_thickness_range=(2.0, 3.0))


def tiny_config(**overrides) -> TrainingConfig:
    kwargs = dict(epochs=1, batch_size=4, seed=0, network=NetworkConfig(**TINY_NET))
    kwargs.update(overrides)
    return TrainingConfig(**kwargs)


@pytest.fixture(scope="module")
def samples():
    return generate_phantom(PhantomConfig(**TINY_PHANTOM, seed=21))


@pytest.fixture(scope="module")
def mixed_samples(samples):
    out = []
    for i, s in enumerate(samples):
        if i % 2:
            out.append(replace_pathology_none(s))
        else:
            out.append(s)
    return out


def replace_pathology_none(s):
    from apdnet.factors import Sample
    return Sample(image=s.image, anatomy=s.anatomy, pathology=None,
                  volume_id=s.volume_id, slice_index=s.slice_index)


class TestAvailableScenarios:
    def test_unlabeled_sample(self):
        assert available_scenarios(labeled=False) == (PREDICTED_ANATOMY, REAL_ANATOMY)

    def test_labeled_sample(self):
        assert available_scenarios(labeled=True) == (
            PREDICTED_ANATOMY, REAL_ANATOMY, REAL_PATHOLOGY)

    def test_teacher_forcing_off(self):
        assert available_scenarios(labeled=True, teacher_forcing_off=True) == (
            PREDICTED_ANATOMY,)


class TestComposeScenarioLosses:
    def test_default_weights_arithmetic(self):
        per = {
            PREDICTED_ANATOMY: {"kl": torch.tensor(1.0)},
            REAL_ANATOMY: {"kl": torch.tensor(1.0)},
            REAL_PATHOLOGY: {"kl": torch.tensor(1.0)},
        }
        out = compose_scenario_losses(per, ScenarioWeights())
        assert out["kl"].item() == pytest.approx(2.2, abs=1e-6)

    def test_missing_real_pathology_scenario(self):
        per = {
            PREDICTED_ANATOMY: {"triplet": torch.tensor(1.0)},
            REAL_ANATOMY: {"triplet": torch.tensor(1.0)},
        }
        out = compose_scenario_losses(per, ScenarioWeights())
        assert out["triplet"].item() == pytest.approx(1.7, abs=1e-6)

    def test_teacher_forcing_off_weights(self):
        per = {PREDICTED_ANATOMY: {"kl": torch.tensor(3.0)}}
        out = compose_scenario_losses(
            per, ScenarioWeights(real_anatomy=0.0, real_pathology=0.0))
        assert out["kl"].item() == pytest.approx(3.0)

    def test_linear_in_scenario_weights(self):
        torch.manual_seed(0)
        per = {
            PREDICTED_ANATOMY: {"kl": torch.rand(()), "triplet": torch.rand(())},
            REAL_ANATOMY: {"kl": torch.rand(()), "triplet": torch.rand(())},
        }
        base = compose_scenario_losses(per, ScenarioWeights(1.0, 0.7, 0.5))
        scaled = compose_scenario_losses(per, ScenarioWeights(3.0, 2.1, 1.5))
        for name in base:
            assert scaled[name].item() == pytest.approx(3.0 * base[name].item(), rel=1e-6)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            ScenarioWeights(predicted_anatomy=-1.0)


class TestScenarioForward:
    def test_real_pathology_requires_labels(self, mixed_samples):
        torch.manual_seed(1)
        trainer = Trainer(tiny_config())
        batch = samples_to_batch(mixed_samples[:4])
        with pytest.raises(ValueError):
            scenario_forward(trainer.model, batch, REAL_PATHOLOGY)

    def test_unknown_scenario_rejected(self, samples):
        trainer = Trainer(tiny_config())
        with pytest.raises(ValueError):
            scenario_forward(trainer.model, samples_to_batch(samples[:2]), "oracle")

    def test_conditioning_inputs_differ_between_scenarios(self, samples):
        torch.manual_seed(2)
        trainer = Trainer(tiny_config())
        batch = samples_to_batch(samples[:2])
        seen = []
        original = trainer.model.pathology_encoder.forward

        def recording(x, mask):
            seen.append(mask)
            return original(x, mask)

        trainer.model.pathology_encoder.forward = recording
        from apdnet.training import forward_shared
        shared = forward_shared(trainer.model, batch.image)
        scenario_forward(trainer.model, batch, PREDICTED_ANATOMY, shared=shared)
        scenario_forward(trainer.model, batch, REAL_ANATOMY, shared=shared)
        assert torch.equal(seen[0], shared.anatomy_pred)
        assert torch.equal(seen[1], batch.anatomy)

    def test_real_pathology_uses_the_real_mask(self, samples):
        torch.manual_seed(3)
        trainer = Trainer(tiny_config())
        batch = samples_to_batch(samples[:2])
        bundle = scenario_forward(trainer.model, batch, REAL_PATHOLOGY)
        assert bundle.pathology_soft is None
        assert torch.equal(bundle.pathology, batch.pathology)


class TestSamplesToBatch:
    def test_layout_and_flags(self, mixed_samples):
        batch = samples_to_batch(mixed_samples[:4])
        assert batch.image.shape == (4, 1, 16, 16)
        assert batch.anatomy.shape == (4, 2, 16, 16)
        assert batch.pathology.shape == (4, 1, 16, 16)
        assert batch.labeled.tolist() == [s.pathology is not None for s in mixed_samples[:4]]

    def test_unlabeled_pathology_zero_filled(self, mixed_samples):
        batch = samples_to_batch(mixed_samples[:4])
        for row in (~batch.labeled).nonzero(as_tuple=True)[0]:
            assert batch.pathology[row].sum() == 0.0


class TestTrainStep:
    def test_report_recombines_to_total(self, samples):
        torch.manual_seed(4)
        trainer = Trainer(tiny_config())
        report = trainer.step(samples_to_batch(samples[:4]))
        w = trainer.cfg.loss_weights
        recombined = (
            w.tversky * report["tversky"]
            + w.focal * report["focal"]
            + w.triplet * report["triplet"]
            + w.reconstruction * report["masked_reconstruction"]
            + w.anatomy_dice * report["anatomy_dice"]
            + w.kl * report["kl"]
            + w.z_reconstruction * report["z_reconstruction"]
            + w.adversarial * report["adversarial_generator"]
        )
        # focal sums over pixels, so totals are large; 1e-6 is a relative identity
        assert report["total"] == pytest.approx(recombined, rel=1e-6, abs=1e-6)

    def test_all_unlabeled_batch_drops_supervised_terms(self, mixed_samples):
        torch.manual_seed(5)
        trainer = Trainer(tiny_config())
        unlabeled = [s for s in mixed_samples if s.pathology is None][:4]
        report = trainer.step(samples_to_batch(unlabeled))
        assert "tversky" not in report and "focal" not in report

    def test_unlabeled_gradients_exactly_zero_with_only_supervised_losses(self, mixed_samples):
        torch.manual_seed(6)
        weights = LossWeights(triplet=0.0, reconstruction=0.0, anatomy_dice=0.0,
                              kl=0.0, z_reconstruction=0.0, adversarial=0.0)
        trainer = Trainer(tiny_config(loss_weights=weights))
        unlabeled = [s for s in mixed_samples if s.pathology is None][:4]
        trainer.step(samples_to_batch(unlabeled))
        for p in trainer.model.parameters():
            assert p.grad is None or p.grad.abs().sum().item() == 0.0

    def test_labeled_batch_produces_gradients(self, samples):
        torch.manual_seed(7)
        weights = LossWeights(triplet=0.0, reconstruction=0.0, anatomy_dice=0.0,
                              kl=0.0, z_reconstruction=0.0, adversarial=0.0)
        trainer = Trainer(tiny_config(loss_weights=weights))
        trainer.step(samples_to_batch(samples[:4]))
        grads = [p.grad.abs().sum().item() for p in trainer.model.parameters()
                 if p.grad is not None]
        assert sum(grads) > 0

    def test_optimizer_parameter_sets_disjoint(self):
        trainer = Trainer(tiny_config())
        gen = {id(p) for g in trainer.opt_g.param_groups for p in g["params"]}
        dis = {id(p) for g in trainer.opt_d.param_groups for p in g["params"]}
        assert not gen & dis

    def test_teacher_forcing_off_matches_zero_weights(self, samples):
        batch = samples_to_batch(samples[:4])

        torch.manual_seed(8)
        trainer_off = Trainer(tiny_config(teacher_forcing_off=True))
        torch.manual_seed(8)
        trainer_zero = Trainer(tiny_config(
            scenario_weights=ScenarioWeights(1.0, 0.0, 0.0)))

        # realign the modality noise draws: the predicted-anatomy scenario runs
        # first in both trainers, so its draw is shared
        torch.manual_seed(99)
        report_off = trainer_off.step(batch)
        torch.manual_seed(99)
        report_zero = trainer_zero.step(batch)
        # loss-identical: the zero-weighted scenario paths contribute exact zeros
        for key in report_off:
            assert report_off[key] == report_zero[key], key

    def test_non_finite_loss_aborts_with_component_name(self, samples):
        torch.manual_seed(9)
        trainer = Trainer(tiny_config())
        with torch.no_grad():
            trainer.model.decoder.body[0].weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged):
            trainer.step(samples_to_batch(samples[:4]))


class TestRunTraining:
    def test_one_record_per_epoch(self, samples, tmp_path):
        cfg = tiny_config(epochs=2)
        result = run_training(cfg, samples[:4], tmp_path / "run")
        lines = result.metrics_path.read_text().splitlines()
        assert len(lines) == 2
        records = [json.loads(l) for l in lines]
        assert [r["epoch"] for r in records] == [1, 2]
        for r in records:
            assert "total" in r and "wall_time_s" in r
            assert "val_dice_anatomy" in r and "val_dice_pathology" in r
        assert result.checkpoint_path.exists()

    def test_determinism_same_seed(self, samples, tmp_path):
        cfg = tiny_config(epochs=1, seed=33)
        r1 = run_training(cfg, samples[:4], tmp_path / "a")
        r2 = run_training(cfg, samples[:4], tmp_path / "b")
        rec1 = json.loads(r1.metrics_path.read_text())
        rec2 = json.loads(r2.metrics_path.read_text())
        for key in rec1:
            if key == "wall_time_s":
                continue
            assert rec1[key] == rec2[key], key

    def test_disentangle_off_run_has_no_kl(self, samples, tmp_path):
        cfg = tiny_config(disentangle_off=True)
        result = run_training(cfg, samples[:4], tmp_path / "run")
        record = json.loads(result.metrics_path.read_text().splitlines()[0])
        assert "kl" not in record
        assert "z_reconstruction" not in record

    def test_triplet_off_run_has_no_triplet(self, samples, tmp_path):
        cfg = tiny_config(triplet_off=True)
        result = run_training(cfg, samples[:4], tmp_path / "run")
        record = json.loads(result.metrics_path.read_text().splitlines()[0])
        assert "triplet" not in record

    def test_rejects_empty_dataset(self, tmp_path):
        with pytest.raises(ValueError):
            run_training(tiny_config(), [], tmp_path / "run")

    def test_validator_hook(self, samples, tmp_path):
        cfg = tiny_config(epochs=1)
        result = run_training(cfg, samples[:4], tmp_path / "run",
                              validator=lambda model: (0.5, 0.25))
        record = json.loads(result.metrics_path.read_text().splitlines()[0])
        assert record["val_dice_anatomy"] == 0.5
        assert record["val_dice_pathology"] == 0.25


class TestTrainingConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"annotation_fraction": 0.0},
        {"annotation_fraction": 1.5},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainingConfig(**kwargs)
