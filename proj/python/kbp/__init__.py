"""Knowledge-based radiotherapy planning."""

from ._kbp import (
    ConfigError,
    EvalError,
    InfluenceMatrix,
    Phantom,
    Pipeline,
    StageFailedError,
    StageMissingError,
    canonical_config,
    config_hash,
    criteria_check,
    dose_stats,
    gamma_pass_rate,
    generate_phantom,
    influence_matrix,
    inverse_plan,
    normalize_to_reference,
    objective_terms,
    reference_plan,
    solve_lp,
    split_patients,
    structure_names,
    template_dose,
)

__version__ = "0.1.0"
