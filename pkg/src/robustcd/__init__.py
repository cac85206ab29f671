"""Confidence distributions for a scalar parameter from robust M-estimation.

Builds CDs four ways: closed-form asymptotic pivots from M-estimating
functions, accept-reject simulation, parametric bootstrap, and nonparametric
CDF discrepancies against a reference sample; plus a Monte Carlo harness
that compares the methods under contamination.
"""

from .cd import (
    CDError,
    ConfidenceCurve,
    ConfidenceDensity,
    ConfidenceDistribution,
    density_from_cd,
    monotonize,
    normal_cd,
    t_cd,
)
from .mest import (
    EstimatingFunction,
    GodambeEstimates,
    ParameterPoint,
    SolverError,
    godambe,
    influence_function,
    solve,
    solve_constrained,
    tsallis_g,
)
from .models import (
    ContaminationRecipe,
    DatasetSpec,
    OneSampleModel,
    RegressionData,
    RegressionModel,
    TwoSampleData,
    TwoSampleModel,
    regression_sample,
    sample,
)
from .pivots import (
    PIVOT_KINDS,
    PivotError,
    cd_from_pivot,
    classical_t_cd,
    confidence_density_from_pivot,
    pivot_value,
    tail_area_influence,
)
from .simcd import AbcConfig, ProposalSpec, SummaryStatistic, abc_cd, sig_cd
from .bootcd import BootstrapConfig, boot_cd
from .npcd import ReferenceSpec, contamination_shift, distance, semimetric_cd
from .harness import (
    ALL_METHODS,
    Scenario,
    StudySpec,
    evidence_table,
    run_study,
    superiority_analysis,
)

__version__ = "0.1.0"
