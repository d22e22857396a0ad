"""Strategic interdependence in binary participation decisions.

Belief-updating treatment effects, instrumented probit participation models
with a control function, tests and bootstrap inference, a calibrated
simulator with planted truth, and the participation-game equilibrium.
"""

__version__ = "0.1.0"

from .belief import (  # noqa: E402
    BeliefUpdateFit,
    GroupATE,
    ate_by_group,
    fit_beta_regression,
    fit_fractional_probit,
    fit_ols_belief,
    residuals,
)
from .domain import (  # noqa: E402
    Dataset,
    FixedEffectDesign,
    LocationSignal,
    SubjectRecord,
    ValidationError,
    derive_condition,
    derive_outcome,
    compute_signal,
    fixed_effect_design,
    load_dataset,
    validate_dataset,
)
from .inference import (  # noqa: E402
    BootstrapSpec,
    TestResult,
    beta_mle,
    bootstrap,
    exogeneity_test,
    kruskal_wallis,
    ks_test,
    late_validity_test,
    proportion_tests,
    wald_test,
)
from .numerics import ConvergenceError, Estimate, RandomStream, maximize_loglik  # noqa: E402
from .participation import (  # noqa: E402
    ModelSpec,
    ParticipationFit,
    ape,
    delta_method,
    fit_cf_joint_mle,
    fit_cf_twostep,
    fit_newey_minchi2,
    fit_probit,
    predictive_margins,
)
from .presets import get_preset, paper2019  # noqa: E402
from .simulator import (  # noqa: E402
    PlantedTruth,
    SimConfig,
    free_riding_offset,
    generate_population,
    solve_equilibrium,
)
