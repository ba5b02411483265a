"""daval: statistical validation toolkit for diagnostic device outputs.

Covers binary accuracy with exact and score intervals, QC-failure triage
tables, risk-score calibration/discrimination/utility, continuous agreement
and precision components, time-to-event comparisons, seeded simulation
oracles, and deterministic plan-driven reporting.
"""

from ._version import __version__
from .accuracy import (
    AccuracyMetrics,
    CIMethod,
    Confusion2x2,
    GoalTestResult,
    PowerResult,
    ProportionCI,
    RatioCI,
    accuracy_metrics,
    confusion_from_records,
    likelihood_ratios,
    posttest_risk,
    power_and_n,
    proportion_ci,
    ratio_ci_log_method,
    test_vs_goal,
)
from .agreement import (
    AgreementResult,
    DemingFit,
    PrecisionComponents,
    bland_altman,
    deming,
    variance_components,
)
from .dataset import (
    DeviceOutput,
    IngestResult,
    Label,
    OutputKind,
    Survival,
    ValidationRecord,
    descriptive_summary,
    ingest_csv,
    serialize_records,
    validate_records,
)
from .qc import (
    TriageConfusion,
    TriageReport,
    row_metrics,
    triage_report,
    triage_table,
    ungradable_proportion,
    worst_case,
)
from .report import (
    AnalysisPlan,
    ValidationReport,
    emit_report,
    load_plan,
    run_plan,
)
from .resample import (
    NoisyQueryLedger,
    QueryBudgetError,
    SeededGenerator,
    bootstrap_ci,
    noisy_query,
    simulate_binary_study,
    simulate_risk_scores,
    simulate_survival,
)
from .riskscore import (
    CalibrationMode,
    CalibrationResult,
    DecisionCurve,
    PerfectSeparationError,
    RiskStrata,
    RocCurve,
    auc_ci,
    calibration_plot,
    decision_curve,
    fit_recalibration,
    inv_logit,
    logit,
    predictiveness_curve,
    prevalence_scale,
    risk_strata_analysis,
    roc_curve,
    threshold_grid,
)
from .survival import (
    CoxFit,
    KMCurve,
    LrtResult,
    MonotoneLikelihoodError,
    added_value_lrt,
    chi_square_sf,
    cox_fit,
    km_calibration_check,
    km_estimate,
    km_risk_at,
    logrank,
    predicted_risk_histograms,
)

__all__ = [
    "__version__",
    "AccuracyMetrics",
    "AgreementResult",
    "AnalysisPlan",
    "CIMethod",
    "CalibrationMode",
    "CalibrationResult",
    "Confusion2x2",
    "CoxFit",
    "DecisionCurve",
    "DemingFit",
    "DeviceOutput",
    "GoalTestResult",
    "IngestResult",
    "KMCurve",
    "Label",
    "LrtResult",
    "MonotoneLikelihoodError",
    "NoisyQueryLedger",
    "OutputKind",
    "PerfectSeparationError",
    "PowerResult",
    "PrecisionComponents",
    "ProportionCI",
    "QueryBudgetError",
    "RatioCI",
    "RiskStrata",
    "RocCurve",
    "SeededGenerator",
    "Survival",
    "TriageConfusion",
    "TriageReport",
    "ValidationRecord",
    "ValidationReport",
    "accuracy_metrics",
    "added_value_lrt",
    "auc_ci",
    "bland_altman",
    "bootstrap_ci",
    "calibration_plot",
    "chi_square_sf",
    "confusion_from_records",
    "cox_fit",
    "decision_curve",
    "deming",
    "descriptive_summary",
    "emit_report",
    "fit_recalibration",
    "ingest_csv",
    "inv_logit",
    "km_calibration_check",
    "km_estimate",
    "km_risk_at",
    "likelihood_ratios",
    "load_plan",
    "logit",
    "logrank",
    "noisy_query",
    "posttest_risk",
    "power_and_n",
    "predicted_risk_histograms",
    "predictiveness_curve",
    "prevalence_scale",
    "proportion_ci",
    "ratio_ci_log_method",
    "risk_strata_analysis",
    "roc_curve",
    "row_metrics",
    "run_plan",
    "serialize_records",
    "simulate_binary_study",
    "simulate_risk_scores",
    "simulate_survival",
    "test_vs_goal",
    "threshold_grid",
    "triage_report",
    "triage_table",
    "ungradable_proportion",
    "validate_records",
    "variance_components",
    "worst_case",
]
