"""Cohort splitting, quality control, experiment runs and report data."""
from .config import (
    ANALYSES,
    ConfigError,
    ExperimentConfig,
    LatentConfig,
    SimulationConfig,
    config_from_dict,
    load_config,
    save_config,
)
from .experiment import RunResult, STAGES, Workspace, run_experiment, run_stages
from .plotdata import ReportMissingError, emit_plot_data
from .qc import QcResult, qc_overlap, write_qc_csv
from .split import CohortSplit, SplitError, SplitSpec, read_split, split_cohort, write_split

__all__ = [
    "ANALYSES", "CohortSplit", "ConfigError", "ExperimentConfig", "LatentConfig", "QcResult",
    "ReportMissingError", "RunResult", "STAGES", "SimulationConfig", "SplitError", "SplitSpec",
    "Workspace", "config_from_dict", "emit_plot_data", "load_config", "qc_overlap", "read_split",
    "run_experiment", "run_stages", "save_config", "split_cohort", "write_qc_csv", "write_split",
]
