from .plans import (
    METHODS,
    SETTINGS,
    TEACHER_SETTINGS,
    ExperimentPlan,
    SettingError,
    model_entry,
    model_label,
    parse_setting,
    unique_pairs,
)
from .report import (
    EvalReport,
    GainRow,
    ReportRow,
    emit_report,
    fmt_gain,
    gain_pct,
    median_rows,
    plot_summary,
    comparison_markdown,
    gains_markdown,
    to_csv,
    to_json,
    to_markdown,
)
from .orderings import OrderingCheck, OrderingError, check_orderings, height_orderings, sda_orderings
from .experiments import (
    evaluate_checkpoint,
    run_hparam_search,
    run_model_bench,
    run_transfer_comparison,
    stratified_eval,
    stratified_report,
)

__all__ = [
    "METHODS",
    "SETTINGS",
    "TEACHER_SETTINGS",
    "ExperimentPlan",
    "SettingError",
    "model_entry",
    "model_label",
    "parse_setting",
    "unique_pairs",
    "EvalReport",
    "GainRow",
    "ReportRow",
    "emit_report",
    "fmt_gain",
    "gain_pct",
    "median_rows",
    "plot_summary",
    "comparison_markdown",
    "gains_markdown",
    "to_csv",
    "to_json",
    "to_markdown",
    "OrderingCheck",
    "OrderingError",
    "check_orderings",
    "height_orderings",
    "sda_orderings",
    "evaluate_checkpoint",
    "run_hparam_search",
    "run_model_bench",
    "run_transfer_comparison",
    "stratified_eval",
    "stratified_report",
]
