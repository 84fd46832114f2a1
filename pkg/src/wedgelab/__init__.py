"""Stepped-wedge design construction, power, and staggered-adoption analysis.

The package covers the full emulation workflow: build and validate
staggered-adoption design schematics, ingest cluster-period panels,
estimate background trend and variance components, compute analytic and
Monte Carlo power, run group-time and mixed-model effect estimators with
bootstrap/permutation/placebo inference, and check everything against a
declared target-trial protocol.
"""

from .design import (
    CellStatus,
    ClusterSequence,
    DesignError,
    DesignSchematic,
    EXCLUDED_POLICIES,
    TimingGroups,
    apply_excluded_policy,
    build_schematic,
    design_to_csv,
    parse_schematic_text,
    read_announcements_csv,
    read_design_csv,
    render_schematic,
    restrict_clusters,
    timing_groups,
    validate_schematic,
    write_design_csv,
)
from .did import (
    ATT_MODES,
    AnalysisError,
    AttCell,
    AttGrid,
    EstimatorSpec,
    InferenceResult,
    PlaceboResult,
    aggregate_att,
    att_grid_to_csv,
    cluster_bootstrap,
    estimate_att_gt,
    fit_trial_mixed_model,
    permutation_test,
    placebo_pretrends,
    read_att_grid_csv,
)
from .estimation import (
    EstimationError,
    MixedFit,
    TrendFit,
    VarianceComponents,
    evaluate_reml_profile,
    fit_interrupted_trend,
    fit_random_intercept_gls,
    fit_variance_components,
)
from .mmwr import mmwr_week, week_ending
from .panel import (
    COVARIATE_FIELDS,
    CovariateProfile,
    DataError,
    PanelDataset,
    PanelRecord,
    apply_eligibility,
    ingest_covariates_csv,
    ingest_panel_csv,
    match_controls,
    select_records,
)
from .power import (
    CalibrationResult,
    PowerError,
    PowerResult,
    PowerSpec,
    analytic_power,
    calibrate_excluded,
    closed_form_variance,
    gls_treatment_variance,
    simulated_power,
    wald_power,
)
from .protocol import (
    Diagnostic,
    ProtocolDoc,
    ProtocolError,
    check_consistency,
    emit_comparison,
    emit_source,
    parse_protocol,
    validate_protocol,
)
from .simulate import EffectProfile, SimulationError, generate_panel, replicate_rng

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # design
    "CellStatus",
    "ClusterSequence",
    "DesignError",
    "DesignSchematic",
    "EXCLUDED_POLICIES",
    "TimingGroups",
    "apply_excluded_policy",
    "build_schematic",
    "design_to_csv",
    "parse_schematic_text",
    "read_announcements_csv",
    "read_design_csv",
    "render_schematic",
    "restrict_clusters",
    "timing_groups",
    "validate_schematic",
    "write_design_csv",
    # panel
    "COVARIATE_FIELDS",
    "CovariateProfile",
    "DataError",
    "PanelDataset",
    "PanelRecord",
    "apply_eligibility",
    "ingest_covariates_csv",
    "ingest_panel_csv",
    "match_controls",
    "select_records",
    # estimation
    "EstimationError",
    "MixedFit",
    "TrendFit",
    "VarianceComponents",
    "evaluate_reml_profile",
    "fit_interrupted_trend",
    "fit_random_intercept_gls",
    "fit_variance_components",
    # power
    "CalibrationResult",
    "PowerError",
    "PowerResult",
    "PowerSpec",
    "analytic_power",
    "calibrate_excluded",
    "closed_form_variance",
    "gls_treatment_variance",
    "simulated_power",
    "wald_power",
    # simulation
    "EffectProfile",
    "SimulationError",
    "generate_panel",
    "replicate_rng",
    # did / trial
    "ATT_MODES",
    "AnalysisError",
    "AttCell",
    "AttGrid",
    "EstimatorSpec",
    "InferenceResult",
    "PlaceboResult",
    "aggregate_att",
    "att_grid_to_csv",
    "cluster_bootstrap",
    "estimate_att_gt",
    "fit_trial_mixed_model",
    "permutation_test",
    "placebo_pretrends",
    "read_att_grid_csv",
    # protocol
    "Diagnostic",
    "ProtocolDoc",
    "ProtocolError",
    "check_consistency",
    "emit_comparison",
    "emit_source",
    "parse_protocol",
    "validate_protocol",
    # calendar
    "mmwr_week",
    "week_ending",
]
