"""Nested sequential Monte Carlo for high-dimensional filtering.

A numpy/scipy library for sequential Bayesian inference in
spatio-temporal state-space models, built around three layers: exact
inference for the tractable chain-noise linear-Gaussian case (Kalman
filter, component-wise forward filtering / backward sampling, fully
adapted particle filter), a generic SMC engine (bootstrap baseline,
log-domain weights, multinomial resampling), and the nested filter whose
inner Monte Carlo procedures produce properly weighted samples from the
locally optimal proposal.  An asymptotic-variance calculator quantifies
the inner/outer particle trade-off on independent product models.
"""

from .exceptions import InnerCollapseError, NsmcError, WeightCollapseError
from .model import (
    ChainFactorization,
    Dataset,
    IndependentSsmSpec,
    StssmSpec,
    TridiagPrecision,
    chain_precision,
    load_dataset,
    make_model,
    sample_gmrf_chain,
    save_dataset,
    simulate,
)
from .smc import (
    FilterOutput,
    ParticleSystem,
    bootstrap_pf,
    ess,
    multinomial_resample,
    normalize_logweights,
)
from .exact import (
    FfbsCache,
    GaussianMessage,
    KalmanBelief,
    fapf_run,
    ffbs_backward,
    ffbs_forward,
    kalman_init,
    kalman_run,
    kalman_step,
)
from .nested import (
    ExactFfbsProcedure,
    ExactTransitionProcedure,
    ImportanceProcedure,
    InnerSmcProcedure,
    InnerState,
    InnerTargetSequence,
    SelfNestedProcedure,
    backward_simulate,
    empirical_draw,
    general_nsmc_step,
    inner_smc,
    is_inner,
    make_procedure,
    nsmc_init,
    nsmc_run,
    nsmc_step,
    proper_weighting_check,
    self_nested_proc,
)
from .diagnostics import ReplicateSummary, aggregate, squared_error, unbiasedness_test
from .asymptotics import (
    VarianceConstants,
    compute_constants,
    sigma_fa,
    sigma_nsmc,
    variance_curve,
)

__version__ = "0.1.0"
