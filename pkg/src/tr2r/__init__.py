"""Tensor-space run-to-run control: estimation, EWMA control and monitoring of image-valued outputs."""
from .control import EwmaController, StabilityReport, ZhongController, stability_matrix
from .estimation import EstimationResult, GlrpTuning, algorithm1, algorithm2, pee
from .monitoring import ChartSuite, control_residual, fit_charts, monitor_step, monitor_stream
from .simulation import (
    DisturbanceSpec,
    NoiseFieldSpec,
    PlantConfig,
    ProcessModel,
    RunRecord,
    generate_offline,
    simulate_closed_loop,
)

__version__ = "0.1.0"

__all__ = [
    "ChartSuite",
    "DisturbanceSpec",
    "EstimationResult",
    "EwmaController",
    "GlrpTuning",
    "NoiseFieldSpec",
    "PlantConfig",
    "ProcessModel",
    "RunRecord",
    "StabilityReport",
    "ZhongController",
    "algorithm1",
    "algorithm2",
    "control_residual",
    "fit_charts",
    "generate_offline",
    "monitor_step",
    "monitor_stream",
    "pee",
    "simulate_closed_loop",
    "stability_matrix",
]
