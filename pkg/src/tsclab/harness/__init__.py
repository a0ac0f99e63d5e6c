from .config import ConfigError, ExperimentConfig, load_config
from .runs import (RunOutput, RunRecord, ablation_gap, compute_ar_pe,
                   run_ablation, run_analyze, run_pretrain, run_transfer)

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config",
    "RunOutput", "RunRecord", "ablation_gap", "compute_ar_pe",
    "run_ablation", "run_analyze", "run_pretrain", "run_transfer",
]
