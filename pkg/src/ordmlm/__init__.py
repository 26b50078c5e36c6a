"""Random-intercept cumulative-logit models for clustered ordinal survey data."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    AnemiaLevel,
    ClassificationError,
    ColumnMapping,
    CovariateSpec,
    DataError,
    EncodedDataset,
    EncodingError,
    EncodingSpec,
    ExclusionReport,
    ObservationRecord,
    classify_hemoglobin,
    encode_dataset,
    load_dataset,
    write_dataset_csv,
)
from .crosstab import (  # noqa: F401
    ChiSquareResult,
    ContingencyTable,
    build_crosstab,
    chi_square_independence,
    chi_square_sf,
)
from .engine import (  # noqa: F401
    ClusterData,
    ClusterState,
    FitError,
    FitResult,
    ModelSpec,
    ParamVector,
    category_probs,
    cluster_log_integrand,
    cumulative_eta,
    find_cluster_mode,
    fit,
    fit_fixed_effects,
    ghq_cluster_loglik,
    total_ghq_minus2ll,
    total_minus2ll,
)
from .inference import (  # noqa: F401
    LrtResult,
    OddsRatioResult,
    ProbabilityProfile,
    cumulative_pp,
    icc,
    lrt,
    odds_ratio,
    profile_probabilities,
    variance_z_test,
    wald_t_tests,
)
from .simulate import (  # noqa: F401
    CovariateModel,
    RecoveryStudy,
    SimConfig,
    generate,
    recovery_study,
    replicate_dataset,
)
from .pipeline import AnalysisConfig, ConfigError, run_pipeline  # noqa: F401
