"""Zigzag diffusion sampling on analytic Gaussian-mixture score models."""

from .analysis import (
    GainDecomposition,
    QualityReport,
    accumulation_inequality,
    decompose_gains,
    energy_distance,
    quality_report,
    theorem3_closed_form,
)
from .config import RunConfig, reference_config
from .experiment import run_experiment
from .sampler import (
    SamplerConfig,
    TrajectoryRecord,
    ddim_denoise_step,
    ddim_invert_step,
    end2end_inject,
    resample_baseline,
    standard_sample,
    zigzag_sample,
)
from .schedule import NoiseSchedule, build_schedule
from .score import AnalyticMixtureModel, ConstantEpsilonModel, MixtureSpec, analytic_epsilon, cfg_epsilon

__version__ = "0.1.0"

__all__ = [
    "GainDecomposition",
    "QualityReport",
    "accumulation_inequality",
    "decompose_gains",
    "energy_distance",
    "quality_report",
    "theorem3_closed_form",
    "RunConfig",
    "reference_config",
    "run_experiment",
    "SamplerConfig",
    "TrajectoryRecord",
    "ddim_denoise_step",
    "ddim_invert_step",
    "end2end_inject",
    "resample_baseline",
    "standard_sample",
    "zigzag_sample",
    "NoiseSchedule",
    "build_schedule",
    "AnalyticMixtureModel",
    "ConstantEpsilonModel",
    "MixtureSpec",
    "analytic_epsilon",
    "cfg_epsilon",
]
