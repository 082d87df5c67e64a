"""Transport-based sampling and normalizing-constant estimation for
multimodal densities: a stochastic standardize/back-map pair driven by a
Gaussian mixture, samplers built on it, coupled chains for unbiased
expectations, and the optimal-bridge estimator family."""

from .density import (
    GaussianMixture,
    TargetDensity,
    inverse_index_distribution,
    mass_transport_decomposition,
    transport_step,
    warped_log_density,
)
from .divergences import harmonic_divergence, pearson_chi2
from .errors import (
    ConfigError,
    DegenerateStateError,
    InputError,
    NonConvergenceError,
    NumericError,
    OverlapError,
    WarpUError,
)
from .estimators import (
    BridgeResult,
    classical_bridge,
    iterative_bridge,
    stochastic_warpu_bridge,
    warpu_bridge_estimate,
    asymptotic_variance_diagnostics,
)
from .coupling import (
    CoupledChainState,
    coupled_warpu_step,
    coupled_warpu_step_combined,
    discrete_ot_coupling,
    maximal_coupling_draw,
    reflection_coupling_draw,
    run_coupled_warpu,
    transportation_simplex,
    unbiased_H,
    unbiased_H_lm,
    rao_blackwell_h,
)
from .fit import FitConstraints, em_fit, enforce_constraints, update_schedule
from .metrics import ess_autocorrelation, mode_occupancy, pps, wasserstein_1d
from .rngs import derive_rng
from .samplers import (
    ChainState,
    SamplerTrace,
    annealed_inverse_index,
    hmc_step,
    mixture_proposal_mh,
    run_adaptive_warpu,
    run_basic_warpu,
    run_parallel_tempering,
    rwm_step,
    variance_augmented_warp,
    warpu_step,
)
from .targets import make_target, target_names

__version__ = "0.1.0"
