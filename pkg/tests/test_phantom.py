"""Phantom generation invariants, split construction, and dataset round-trips."""

import numpy as np
import pytest

from apdnet.phantom import (
    DatasetSplit,
    PhantomConfig,
    apply_split,
    generate_phantom,
    load_dataset,
    make_split,
    read_tensor,
    serialize_dataset,
    volume_ids,
    write_tensor,
)


def neutral_config(**overrides) -> PhantomConfig:
    """Appearance jitter disabled so region levels are exactly the configured ones."""
    kwargs = dict(gain_range=(1.0, 1.0), offset_range=(0.0, 0.0),
                  gamma_range=(1.0, 1.0), infarct_delta_jitter=(1.0, 1.0))
    kwargs.update(overrides)
    return PhantomConfig(**kwargs)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_phantom(PhantomConfig(volumes=6, slices_per_volume=4, seed=3))


class TestGeometryInvariants:
    def test_infarct_inside_myocardium(self, small_dataset):
        for s in small_dataset:
            myo = s.anatomy[..., 0].astype(bool)
            infarct = s.pathology[..., 0].astype(bool)
            assert not (infarct & ~myo).any()

    def test_myocardium_disjoint_from_blood_pool(self, small_dataset):
        for s in small_dataset:
            assert not (s.anatomy[..., 0].astype(bool) & s.anatomy[..., 1].astype(bool)).any()

    def test_masks_binary_image_in_range(self, small_dataset):
        for s in small_dataset:
            assert set(np.unique(s.anatomy)) <= {0, 1}
            assert set(np.unique(s.pathology)) <= {0, 1}
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.dtype == np.float32

    def test_expected_counts(self, small_dataset):
        assert len(small_dataset) == 6 * 4
        assert len(volume_ids(small_dataset)) == 6


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        cfg = PhantomConfig(volumes=3, slices_per_volume=2, seed=11)
        a = generate_phantom(cfg)
        b = generate_phantom(cfg)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.anatomy, sb.anatomy)
            assert np.array_equal(sa.pathology, sb.pathology)

    def test_different_seed_differs(self):
        a = generate_phantom(PhantomConfig(volumes=2, slices_per_volume=2, seed=1))
        b = generate_phantom(PhantomConfig(volumes=2, slices_per_volume=2, seed=2))
        assert any(not np.array_equal(sa.image, sb.image) for sa, sb in zip(a, b))


class TestIntensityStatistics:
    def test_infarct_brighter_than_healthy_wall(self):
        cfg = neutral_config(volumes=20, slices_per_volume=8, seed=5)
        samples = generate_phantom(cfg)
        checked = 0
        for s in samples:
            infarct = s.pathology[..., 0].astype(bool)
            if not infarct.any():
                continue
            myo = s.anatomy[..., 0].astype(bool)
            healthy_wall = myo & ~infarct
            gap = s.image[..., 0][infarct].mean() - s.image[..., 0][healthy_wall].mean()
            bound = cfg.infarct_delta - 3.0 * cfg.noise_sigma / np.sqrt(infarct.sum())
            assert gap >= bound
            checked += 1
        assert checked >= 100

    def test_prevalence_near_config(self):
        cfg = PhantomConfig(volumes=40, slices_per_volume=8, infarct_prevalence=0.7, seed=9)
        samples = generate_phantom(cfg)
        frac = np.mean([s.pathology.any() for s in samples])
        assert abs(frac - 0.7) <= 0.1

    def test_rejects_undetectable_infarct(self):
        with pytest.raises(ValueError):
            PhantomConfig(infarct_delta=0.05, noise_sigma=0.06)

    def test_rejects_oversized_geometry(self):
        with pytest.raises(ValueError):
            PhantomConfig(height=32, width=32, outer_radius_range=(14.0, 20.0))


class TestSplits:
    def test_full_annotation_labels_everything(self, small_dataset):
        split = make_split(small_dataset, annotation_fraction=1.0, test_fraction=0.34, seed=0)
        assert set(split.labeled_volumes) == set(split.train_volumes)

    def test_ceil_of_fraction(self):
        samples = generate_phantom(PhantomConfig(volumes=25, slices_per_volume=1, seed=2))
        split = make_split(samples, annotation_fraction=0.13, test_fraction=0.2, seed=1)
        assert len(split.train_volumes) == 20
        assert len(split.labeled_volumes) == 3  # ceil(0.13 * 20)

    def test_disjoint_and_by_volume(self, small_dataset):
        split = make_split(small_dataset, 0.5, 0.34, seed=4)
        assert not set(split.train_volumes) & set(split.test_volumes)
        train, test = apply_split(small_dataset, split)
        assert {s.volume_id for s in train} == set(split.train_volumes)
        assert {s.volume_id for s in test} == set(split.test_volumes)

    def test_stripped_samples_keep_anatomy(self, small_dataset):
        split = make_split(small_dataset, annotation_fraction=0.25, test_fraction=0.34, seed=7)
        train, _ = apply_split(small_dataset, split)
        unlabeled = [s for s in train if s.volume_id not in split.labeled_volumes]
        assert unlabeled
        for s in unlabeled:
            assert s.pathology is None
            assert s.anatomy is not None

    def test_split_validation(self):
        with pytest.raises(ValueError):
            DatasetSplit(["a"], ["a"], [])
        with pytest.raises(ValueError):
            DatasetSplit(["a"], ["b"], ["c"])

    def test_rejects_bad_fractions(self, small_dataset):
        with pytest.raises(ValueError):
            make_split(small_dataset, 0.0, 0.2, seed=0)
        with pytest.raises(ValueError):
            make_split(small_dataset, 0.5, 1.0, seed=0)


class TestSerialization:
    def test_round_trip_bit_exact(self, small_dataset, tmp_path):
        split = make_split(small_dataset, 0.5, 0.34, seed=1)
        train, _ = apply_split(small_dataset, split)
        serialize_dataset(train, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == len(train)
        by_key = {(s.volume_id, s.slice_index): s for s in loaded}
        for s in train:
            other = by_key[(s.volume_id, s.slice_index)]
            assert np.array_equal(s.image, other.image)
            assert s.image.dtype == other.image.dtype
            assert np.array_equal(s.anatomy, other.anatomy)
            if s.pathology is None:
                assert other.pathology is None
            else:
                assert np.array_equal(s.pathology, other.pathology)

    def test_unlabeled_slice_has_no_pat_file(self, small_dataset, tmp_path):
        split = make_split(small_dataset, 0.25, 0.34, seed=2)
        train, _ = apply_split(small_dataset, split)
        serialize_dataset(train, tmp_path / "ds")
        unlabeled_vol = next(v for v in split.train_volumes
                             if v not in split.labeled_volumes)
        vdir = tmp_path / "ds" / "volumes" / unlabeled_vol
        assert not list(vdir.glob("*.pat"))
        import json
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        entry = next(e for e in manifest["volumes"] if e["id"] == unlabeled_vol)
        assert all(not rec["has_pathology"] for rec in entry["slices"])

    def test_manifest_volume_count(self, small_dataset, tmp_path):
        serialize_dataset(small_dataset, tmp_path / "ds")
        import json
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert len(manifest["volumes"]) == 6

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_truncated_tensor_rejected(self, tmp_path):
        arr = np.arange(12, dtype=np.float32).reshape(3, 4)
        p = tmp_path / "t.img"
        write_tensor(p, arr)
        data = p.read_bytes()
        p.write_bytes(data[:-4])
        with pytest.raises(ValueError):
            read_tensor(p)

    def test_tensor_round_trip(self, tmp_path):
        for arr in (np.random.default_rng(0).random((5, 4, 1)).astype(np.float32),
                    (np.random.default_rng(1).random((6, 6, 2)) > 0.5).astype(np.uint8)):
            p = tmp_path / "t.bin"
            write_tensor(p, arr)
            out = read_tensor(p)
            assert out.dtype == arr.dtype
            assert np.array_equal(out, arr)
