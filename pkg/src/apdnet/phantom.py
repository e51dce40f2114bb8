"""Synthetic cardiac-like phantom volumes: annular myocardium and blood pool
with an optional bright infarct crescent inside the wall, plus semi-supervised
split construction and an on-disk dataset format.

Each volume shares geometry and appearance parameters across its slices;
generation is fully deterministic given the config seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .factors import Sample

MANIFEST_NAME = "manifest.json"
TENSOR_MAGIC = b"TSR1"
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class PhantomConfig:
    height: int = 64
    width: int = 64
    volumes: int = 40
    slices_per_volume: int = 8
    infarct_prevalence: float = 0.7      # fraction of slices carrying an infarct
    background_level: float = 0.15
    blood_pool_level: float = 0.75
    myocardium_level: float = 0.35
    infarct_delta: float = 0.40          # brightening of infarcted wall tissue
    noise_sigma: float = 0.04
    center_jitter: int = 6
    outer_radius_range: Tuple[float, float] = (14.0, 20.0)
    wall_thickness_range: Tuple[float, float] = (4.0, 7.0)
    infarct_extent_deg: Tuple[float, float] = (30.0, 120.0)
    transmurality_range: Tuple[float, float] = (0.5, 1.0)
    # per-volume appearance variation: what the modality factor must absorb
    gain_range: Tuple[float, float] = (0.9, 1.1)
    offset_range: Tuple[float, float] = (-0.05, 0.05)
    gamma_range: Tuple[float, float] = (0.85, 1.2)
    infarct_delta_jitter: Tuple[float, float] = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError("height and width must be positive")
        if self.volumes <= 0 or self.slices_per_volume <= 0:
            raise ValueError("volumes and slices_per_volume must be positive")
        if not 0.0 <= self.infarct_prevalence <= 1.0:
            raise ValueError("infarct_prevalence must lie in [0, 1]")
        r_lo, r_hi = self.outer_radius_range
        t_lo, t_hi = self.wall_thickness_range
        if not 0 < t_lo <= t_hi < r_lo <= r_hi:
            raise ValueError("need 0 < wall thickness < outer radius")
        if r_hi >= min(self.height, self.width) / 2:
            raise ValueError("outer radius must fit inside the image")
        min_delta = self.infarct_delta * self.infarct_delta_jitter[0]
        if min_delta <= 2.0 * self.noise_sigma:
            raise ValueError("infarct delta must exceed twice the noise sigma")


def _volume_geometry(cfg: PhantomConfig, rng: np.random.Generator) -> Dict[str, float]:
    return {
        "cx": cfg.width / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
        "cy": cfg.height / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
        "outer_radius": rng.uniform(*cfg.outer_radius_range),
        "wall_thickness": rng.uniform(*cfg.wall_thickness_range),
        "infarct_angle": rng.uniform(0.0, 2.0 * math.pi),
        "infarct_extent": math.radians(rng.uniform(*cfg.infarct_extent_deg)),
        "transmurality": rng.uniform(*cfg.transmurality_range),
        "gain": rng.uniform(*cfg.gain_range),
        "offset": rng.uniform(*cfg.offset_range),
        "gamma": rng.uniform(*cfg.gamma_range),
        "delta_scale": rng.uniform(*cfg.infarct_delta_jitter),
    }


def _render_slice(cfg: PhantomConfig, geo: Dict[str, float], slice_index: int,
                  with_infarct: bool, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One slice: image (H, W, 1), anatomy (H, W, 2), infarct (H, W, 1)."""
    h, w = cfg.height, cfg.width
    # slices taper from apex to base
    scale = 0.8 + 0.3 * slice_index / max(cfg.slices_per_volume - 1, 1)
    r_out = geo["outer_radius"] * scale
    r_in = r_out - geo["wall_thickness"] * scale
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - geo["cx"], yy - geo["cy"]
    dist = np.sqrt(dx**2 + dy**2)

    lv = dist <= r_in
    myo = (dist <= r_out) & ~lv

    infarct = np.zeros((h, w), dtype=bool)
    if with_infarct:
        theta0 = geo["infarct_angle"] + rng.uniform(-0.2, 0.2)
        extent = geo["infarct_extent"]
        angle = np.mod(np.arctan2(dy, dx) - theta0, 2.0 * math.pi)
        radial_reach = r_in + geo["transmurality"] * (r_out - r_in)
        infarct = myo & (angle <= extent) & (dist <= radial_reach)

    levels = np.full((h, w), cfg.background_level, dtype=np.float64)
    levels[myo] = cfg.myocardium_level
    levels[lv] = cfg.blood_pool_level
    levels[infarct] = cfg.myocardium_level + cfg.infarct_delta * geo["delta_scale"]

    appearance = geo["gain"] * np.power(levels, geo["gamma"]) + geo["offset"]
    image = np.clip(appearance + rng.normal(0.0, cfg.noise_sigma, (h, w)), 0.0, 1.0)

    anatomy = np.stack([myo, lv], axis=-1).astype(np.uint8)
    return (image.astype(np.float32)[..., None], anatomy,
            infarct.astype(np.uint8)[..., None])


def generate_phantom(cfg: PhantomConfig) -> List[Sample]:
    """Deterministically generate all volumes, ordered by (volume, slice)."""
    root = np.random.SeedSequence(cfg.seed)
    samples: List[Sample] = []
    for v, seq in enumerate(root.spawn(cfg.volumes)):
        rng = np.random.default_rng(seq)
        geo = _volume_geometry(cfg, rng)
        volume_id = f"vol{v:03d}"
        for k in range(cfg.slices_per_volume):
            with_infarct = rng.uniform() < cfg.infarct_prevalence
            image, anatomy, infarct = _render_slice(cfg, geo, k, with_infarct, rng)
            samples.append(Sample(image=image, anatomy=anatomy, pathology=infarct,
                                  volume_id=volume_id, slice_index=k))
    return samples


def volume_ids(samples: Sequence[Sample]) -> List[str]:
    seen: Dict[str, None] = {}
    for s in samples:
        seen.setdefault(s.volume_id, None)
    return list(seen)


@dataclass
class DatasetSplit:
    """Volume-level split; the labeled subset keeps its pathology masks."""

    train_volumes: List[str]
    test_volumes: List[str]
    labeled_volumes: List[str]

    def __post_init__(self) -> None:
        if set(self.train_volumes) & set(self.test_volumes):
            raise ValueError("train and test volumes overlap")
        if not set(self.labeled_volumes) <= set(self.train_volumes):
            raise ValueError("labeled volumes must be a subset of train volumes")


def make_split(samples: Sequence[Sample], annotation_fraction: float,
               test_fraction: float, seed: int) -> DatasetSplit:
    """Shuffle volumes by seed, hold out a test set, label a ceil-fraction of train."""
    if not 0.0 < annotation_fraction <= 1.0:
        raise ValueError("annotation_fraction must lie in (0, 1]")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    ids = volume_ids(samples)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = max(1, round(test_fraction * len(ids)))
    if n_test >= len(ids):
        raise ValueError("not enough volumes for a nonempty train set")
    test = sorted(order[:n_test])
    train = order[n_test:]
    n_labeled = math.ceil(annotation_fraction * len(train))
    if n_labeled == 0:
        raise ValueError("empty labeled set")
    labeled = sorted(train[:n_labeled])
    return DatasetSplit(sorted(train), test, labeled)


def apply_split(samples: Sequence[Sample], split: DatasetSplit
                ) -> Tuple[List[Sample], List[Sample]]:
    """(train, test) sample lists; unlabeled train volumes lose their pathology
    masks but keep anatomy."""
    labeled = set(split.labeled_volumes)
    train_ids = set(split.train_volumes)
    test_ids = set(split.test_volumes)
    train, test = [], []
    for s in samples:
        if s.volume_id in test_ids:
            test.append(s)
        elif s.volume_id in train_ids:
            if s.volume_id in labeled:
                train.append(s)
            else:
                train.append(Sample(image=s.image, anatomy=s.anatomy, pathology=None,
                                    volume_id=s.volume_id, slice_index=s.slice_index))
    return train, test


def write_tensor(path: Path, array: np.ndarray) -> None:
    """Flat binary container: magic, dtype code, ndim, dims, little-endian data."""
    dtype = array.dtype
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype: {dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array).astype(dtype.newbyteorder("<")).tobytes())


def read_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        code, ndim = struct.unpack("<BB", f.read(2))
        if code not in _CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        data = f.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) != expected:
        raise ValueError(f"{path}: truncated tensor ({len(data)} of {expected} bytes)")
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(_CODE_DTYPES[code])


def serialize_dataset(samples: Sequence[Sample], path) -> None:
    """Write `volumes/<id>/slice_<k>.{img,ana,pat}` plus a manifest."""
    root = Path(path)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    manifest: Dict = {"version": 1, "volumes": []}
    by_volume: Dict[str, List[Sample]] = {}
    for s in samples:
        by_volume.setdefault(s.volume_id, []).append(s)
    for vid, slices in by_volume.items():
        vdir = root / "volumes" / vid
        vdir.mkdir(parents=True, exist_ok=True)
        entry = {"id": vid, "slices": []}
        for s in sorted(slices, key=lambda s: s.slice_index):
            stem = vdir / f"slice_{s.slice_index:03d}"
            write_tensor(stem.with_suffix(".img"), s.image)
            write_tensor(stem.with_suffix(".ana"), s.anatomy)
            if s.pathology is not None:
                write_tensor(stem.with_suffix(".pat"), s.pathology)
            entry["slices"].append({
                "index": s.slice_index,
                "has_pathology": s.pathology is not None,
            })
        manifest["volumes"].append(entry)
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)


def load_dataset(path) -> List[Sample]:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    samples: List[Sample] = []
    for entry in manifest["volumes"]:
        vdir = root / "volumes" / entry["id"]
        for rec in entry["slices"]:
            stem = vdir / f"slice_{rec['index']:03d}"
            image = read_tensor(stem.with_suffix(".img"))
            anatomy = read_tensor(stem.with_suffix(".ana"))
            pathology = None
            if rec["has_pathology"]:
                pathology = read_tensor(stem.with_suffix(".pat"))
            if image.shape[:2] != anatomy.shape[:2] or (
                    pathology is not None and pathology.shape[:2] != image.shape[:2]):
                raise ValueError(f"{stem}: inconsistent slice dimensions")
            samples.append(Sample(image=image, anatomy=anatomy, pathology=pathology,
                                  volume_id=entry["id"], slice_index=rec["index"]))
    return samples
