"""Simulator, evaluation metrics and pipeline orchestration."""

from .evaluate import FLOOR_PENALTY_M, ErrorReport, evaluate_track, report_from_errors
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .simulate import (
    AccessPoint,
    GroundTruth,
    NoiseSpec,
    SimResult,
    SimScenario,
    Waypoint,
    read_truth_csv,
    simulate_track,
    write_truth_csv,
)

__all__ = [
    "AccessPoint",
    "ErrorReport",
    "FLOOR_PENALTY_M",
    "GroundTruth",
    "NoiseSpec",
    "PipelineConfig",
    "PipelineResult",
    "SimResult",
    "SimScenario",
    "Waypoint",
    "evaluate_track",
    "read_truth_csv",
    "report_from_errors",
    "run_pipeline",
    "simulate_track",
    "write_truth_csv",
]
