"""Survival analysis under immortal-time bias.

Immortal time arises when treated subjects must survive long enough to
initiate treatment, so time-zero and arm-classification choices decide
whether that guaranteed-alive follow-up is misattributed.  This package
implements the accommodation methods in common use — naive inclusion or
exclusion of the immortal period, prescription-time distribution
matching, landmarking, time-varying treatment, emulated sequential
trials, and clone-censor-weight — on top of an in-house estimation
engine (Kaplan-Meier, weighted/stratified Cox partial likelihood,
additive-hazards censoring models, cluster-robust variance), plus a
cohort simulator with a known true hazard ratio and a replicated
benchmark harness for comparing the methods' bias, spread, and coverage.

Entry points: :func:`imtkit.methods.analyze` for one method on one
cohort, :func:`imtkit.bench.run_replicates` for a simulation study, and
the ``imtkit`` command-line tool for file-based workflows.
"""

from .bench import BenchConfig, BenchReport, MetricsRow, metrics, run_replicates, table2_config
from .core import (
    AnalysisDataset,
    Subject,
    SurvivalCurve,
    km_estimate,
    to_counting_process,
)
from .cox import CoxOptions, FitResult, fit_cox
from .aalen import AalenFit, WeightSeries, fit_aalen_censoring, ipc_weight_at
from .errors import (
    ClusterError,
    ConstantCovariateError,
    EmptyRiskSetError,
    EstimationError,
    ImtkitError,
    InputError,
    MonotoneLikelihoodError,
    NoEventsError,
    NonIdentifiableError,
    ParameterError,
)
from .io import (
    STANFORD_MAPPING,
    ColumnMapping,
    LoadResult,
    fetch_stanford,
    load_csv,
    load_stanford,
    read_subjects_csv,
    subject_mapping,
    svg_step_plot,
    write_curves_csv,
    write_subjects_csv,
)
from .methods import (
    CloneRecord,
    MethodSpec,
    TrialAssignment,
    analyze,
    clone_censor_weight,
    clone_records,
    exclude_imt,
    include_imt,
    landmark,
    ptdm,
    sequential_trials,
    time_varying,
    trial_assignments,
)
from .simulate import ScenarioSpec, TimeGrid, generate_cohort, permute_match, standard_scenarios

__version__ = "0.1.0"

__all__ = [
    "AalenFit",
    "AnalysisDataset",
    "BenchConfig",
    "BenchReport",
    "CloneRecord",
    "ClusterError",
    "ColumnMapping",
    "ConstantCovariateError",
    "CoxOptions",
    "EmptyRiskSetError",
    "EstimationError",
    "FitResult",
    "ImtkitError",
    "InputError",
    "LoadResult",
    "MethodSpec",
    "MetricsRow",
    "MonotoneLikelihoodError",
    "NoEventsError",
    "NonIdentifiableError",
    "ParameterError",
    "STANFORD_MAPPING",
    "ScenarioSpec",
    "Subject",
    "SurvivalCurve",
    "TimeGrid",
    "TrialAssignment",
    "WeightSeries",
    "analyze",
    "clone_censor_weight",
    "clone_records",
    "exclude_imt",
    "fetch_stanford",
    "fit_aalen_censoring",
    "fit_cox",
    "generate_cohort",
    "include_imt",
    "ipc_weight_at",
    "km_estimate",
    "landmark",
    "load_csv",
    "load_stanford",
    "metrics",
    "permute_match",
    "ptdm",
    "read_subjects_csv",
    "run_replicates",
    "sequential_trials",
    "standard_scenarios",
    "subject_mapping",
    "svg_step_plot",
    "table2_config",
    "time_varying",
    "to_counting_process",
    "trial_assignments",
    "write_curves_csv",
    "write_subjects_csv",
]
