"""Config-driven benchmark sweep: (method x annotation fraction x seed) cells,
plus ablation cells, each trained and evaluated independently with results
cached by config hash."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..config import config_hash
from ..factors import Sample
from ..networks import load_checkpoint
from ..phantom import apply_split, make_split
from ..training import TrainingConfig, run_training
from .baselines import BASELINE_METHODS, run_baseline
from .evaluation import APDNetPredictor, evaluate_on_volumes

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("mask_recon_off", "disentangle_off", "teacher_forcing_off",
                  "triplet_off")
ALL_METHODS = ("apdnet",) + BASELINE_METHODS

RESULT_COLUMNS = (
    "cell", "method", "ablation", "annotation_fraction", "seed", "status",
    "dice_pathology_mean", "dice_pathology_std", "dice_anatomy_mean",
    "dice_anatomy_std", "config_hash", "runtime_s", "error",
)


@dataclass
class SweepCell:
    method: str
    annotation_fraction: float
    seed: int
    ablation: Optional[str] = None

    @property
    def name(self) -> str:
        parts = [self.method]
        if self.ablation:
            parts.append(self.ablation)
        parts.append(f"f{self.annotation_fraction:g}")
        parts.append(f"s{self.seed}")
        return "_".join(parts)


@dataclass
class BenchmarkSuite:
    methods: List[str] = field(default_factory=lambda: ["apdnet"])
    annotation_fractions: List[float] = field(default_factory=lambda: [0.13])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    ablations: List[str] = field(default_factory=list)  # extra apdnet variants
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ValueError(f"unknown method: {m!r}")
        for a in self.ablations:
            if a not in ABLATION_FLAGS:
                raise ValueError(f"unknown ablation: {a!r}")
        if not self.seeds or not self.annotation_fractions:
            raise ValueError("need at least one seed and one annotation fraction")

    def cells(self) -> List[SweepCell]:
        out = []
        for fraction in self.annotation_fractions:
            for seed in self.seeds:
                for method in self.methods:
                    out.append(SweepCell(method, fraction, seed))
                for ablation in self.ablations:
                    out.append(SweepCell("apdnet", fraction, seed, ablation=ablation))
        return out


def dataset_digest(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.volume_id.encode())
        h.update(bytes([s.slice_index & 0xFF]))
        h.update(s.image.tobytes())
        h.update(s.anatomy.tobytes())
        if s.pathology is not None:
            h.update(s.pathology.tobytes())
    return h.hexdigest()[:16]


def _cell_config(cell: SweepCell, base: TrainingConfig) -> TrainingConfig:
    overrides: Dict = {"seed": cell.seed, "annotation_fraction": cell.annotation_fraction}
    if cell.ablation:
        overrides[cell.ablation] = True
    return replace(base, **overrides)


def _cell_hash(cell: SweepCell, cfg: TrainingConfig, test_fraction: float,
               data_hash: str) -> str:
    return config_hash({
        "method": cell.method,
        "ablation": cell.ablation,
        "training": asdict(cfg),
        "test_fraction": test_fraction,
        "dataset": data_hash,
    })


def run_cell(cell: SweepCell, samples: Sequence[Sample], base: TrainingConfig,
             test_fraction: float, out_dir: Path, data_hash: str) -> Dict:
    """Train and evaluate one sweep cell; exceptions become a failed row."""
    cfg = _cell_config(cell, base)
    cell_hash = _cell_hash(cell, cfg, test_fraction, data_hash)
    cell_dir = Path(out_dir) / "cells" / cell.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    row: Dict = {
        "cell": cell.name, "method": cell.method, "ablation": cell.ablation or "",
        "annotation_fraction": cell.annotation_fraction, "seed": cell.seed,
        "config_hash": cell_hash, "status": "ok", "error": "",
    }
    start = time.perf_counter()
    try:
        split = make_split(samples, cell.annotation_fraction, test_fraction, cell.seed)
        train, test = apply_split(samples, split)
        (cell_dir / "split.json").write_text(json.dumps(asdict(split), indent=2))
        if cell.method == "apdnet":
            result = run_training(cfg, train, cell_dir)
            model, _, _ = load_checkpoint(result.checkpoint_path)
            report = evaluate_on_volumes(
                APDNetPredictor(model, cfg.device), test, method=cell.method,
                annotation_fraction=cell.annotation_fraction, seed=cell.seed,
                config_hash=cell_hash)
            report.save(cell_dir / "eval.json")
        else:
            _, report = run_baseline(cell.method, cfg, train, test, cell_dir,
                                     config_hash=cell_hash)
        row.update({
            "dice_pathology_mean": report.dice_pathology_mean,
            "dice_pathology_std": report.dice_pathology_std,
            "dice_anatomy_mean": report.dice_anatomy_mean,
            "dice_anatomy_std": report.dice_anatomy_std,
            "volumes": report.volumes,
        })
    except Exception as exc:  # recorded per cell, sweep continues
        log.exception("cell %s failed", cell.name)
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        row["traceback"] = traceback.format_exc()
    row["runtime_s"] = time.perf_counter() - start
    (cell_dir / "result.json").write_text(json.dumps(row, indent=2))
    return row


_WORKER_STATE: Dict = {}


def _worker_init(samples, base, test_fraction, out_dir, data_hash, threads):
    torch.set_num_threads(threads)
    _WORKER_STATE.update(samples=samples, base=base, test_fraction=test_fraction,
                         out_dir=out_dir, data_hash=data_hash)


def _worker_run(cell: SweepCell) -> Dict:
    st = _WORKER_STATE
    return run_cell(cell, st["samples"], st["base"], st["test_fraction"],
                    st["out_dir"], st["data_hash"])


def _load_cached(cell: SweepCell, expected_hash: str, out_dir: Path) -> Optional[Dict]:
    path = Path(out_dir) / "cells" / cell.name / "result.json"
    if not path.exists():
        return None
    row = json.loads(path.read_text())
    if row.get("config_hash") != expected_hash or row.get("status") != "ok":
        return None
    return row


def run_sweep(suite: BenchmarkSuite, samples: Sequence[Sample],
              base_config: TrainingConfig, out_dir, jobs: int = 1,
              resume: bool = True, threads_per_job: int = 1) -> List[Dict]:
    """Run every cell, skipping those already completed with an identical
    config hash, and emit results.csv plus summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_hash = dataset_digest(samples)
    cells = suite.cells()

    rows: Dict[str, Dict] = {}
    pending: List[SweepCell] = []
    for cell in cells:
        cfg = _cell_config(cell, base_config)
        cached = _load_cached(cell, _cell_hash(cell, cfg, suite.test_fraction, data_hash),
                              out_dir) if resume else None
        if cached is not None:
            log.info("cell %s: cached", cell.name)
            rows[cell.name] = cached
        else:
            pending.append(cell)

    if pending and jobs > 1:
        with ProcessPoolExecutor(
                max_workers=jobs, initializer=_worker_init,
                initargs=(list(samples), base_config, suite.test_fraction,
                          out_dir, data_hash, threads_per_job)) as pool:
            for row in pool.map(_worker_run, pending):
                rows[row["cell"]] = row
    else:
        for cell in pending:
            log.info("cell %s: running", cell.name)
            rows[cell.name] = run_cell(cell, samples, base_config,
                                       suite.test_fraction, out_dir, data_hash)

    ordered = [rows[c.name] for c in cells]
    write_results(ordered, out_dir)
    return ordered


def write_results(rows: List[Dict], out_dir) -> None:
    """Emit results.csv and summary.json for a set of cell rows."""
    out_dir = Path(out_dir)
    with open(out_dir / "results.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summarize(rows), f, indent=2)


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Per (method, ablation, fraction): per-seed means plus the pooled
    mean/std over every test volume of every seed."""
    groups: Dict = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        key = (row["method"], row["ablation"], row["annotation_fraction"])
        groups.setdefault(key, []).append(row)
    out = []
    for (method, ablation, fraction), members in sorted(groups.items(),
                                                        key=lambda kv: str(kv[0])):
        per_seed = [m["dice_pathology_mean"] for m in members]
        pooled = [v["dice_pathology"] for m in members for v in m.get("volumes", [])]
        out.append({
            "method": method,
            "ablation": ablation,
            "annotation_fraction": fraction,
            "seeds": [m["seed"] for m in members],
            "per_seed_dice_pathology": per_seed,
            "dice_pathology_mean_over_seeds": float(np.mean(per_seed)),
            "dice_pathology_pooled_mean": float(np.mean(pooled)) if pooled else None,
            "dice_pathology_pooled_std": float(np.std(pooled)) if pooled else None,
        })
    return out


def mean_over_seeds(rows: Sequence[Dict], method: str, annotation_fraction: float,
                    ablation: Optional[str] = None) -> float:
    """Seed-averaged test pathology Dice for one sweep group."""
    picked = [row["dice_pathology_mean"] for row in rows
              if row["status"] == "ok"
              and row["method"] == method
              and row["ablation"] == (ablation or "")
              and abs(row["annotation_fraction"] - annotation_fraction) < 1e-9]
    if not picked:
        raise ValueError(
            f"no completed cells for {method}/{ablation}@{annotation_fraction}")
    return float(np.mean(picked))
