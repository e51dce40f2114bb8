"""Evaluation, baselines, sweep runner, and visualization outputs."""

from .evaluation import (  # noqa: F401
    EvalReport,
    SegmentationPredictor,
    aggregate,
    dice_score,
    evaluate_on_volumes,
    evaluate_volume,
)
from .baselines import run_baseline, load_baseline_predictor  # noqa: F401
from .sweep import BenchmarkSuite, run_sweep  # noqa: F401
from .visuals import difference_mass_inside_infarct, emit_visuals  # noqa: F401
