from .config import RunConfig, load_config, save_config
from .budget import TradeoffBudget, TradeoffPoint, ConstraintResult, check_constraints
from .compare import inclusion_mask, evaluate_obfuscation, run_method_comparison
from .sweep import run_tradeoff_sweep, plot_sweep
from .ablate import DEFAULT_POOLS, run_pool_ablation
from .report import (write_csv, comparison_to_rows, sweep_to_rows,
                     ablation_to_rows, load_comparison_json, emit_report)
from .pipeline import (Pipeline, CohortData, SplitArrays,
                       DISEASE_SEED, SEGMENTER_SEED, ROTATION_SEED)

__all__ = [
    "RunConfig", "load_config", "save_config",
    "TradeoffBudget", "TradeoffPoint", "ConstraintResult", "check_constraints",
    "inclusion_mask", "evaluate_obfuscation", "run_method_comparison",
    "run_tradeoff_sweep", "plot_sweep",
    "DEFAULT_POOLS", "run_pool_ablation",
    "write_csv", "comparison_to_rows", "sweep_to_rows", "ablation_to_rows",
    "load_comparison_json", "emit_report",
    "Pipeline", "CohortData", "SplitArrays",
    "DISEASE_SEED", "SEGMENTER_SEED", "ROTATION_SEED",
]
