"""Effective-model extraction for convolution-type parabolic equations
with space-periodic, time-random jump kernels.

The library computes, at desk scale, the constant effective drift, the
effective diffusivity, and the long-run covariance of the centered drift
for nonlocal generators of the form

    (L u)(x) = ∫ a(x - y) mu(x, y; t) (u(y) - u(x)) dy

with a periodic-in-space, stationary-in-time random rate field mu, and
verifies the convergence of the scaled problem to its homogenized limit
in moving coordinates, plus the invariance principle for the centered
drift fluctuations.
"""

__version__ = "0.1.0"

from .cell import (  # noqa: F401
    CellOptions,
    CellSolution,
    EffectiveModel,
    autonomous_effective_model,
    compute_b,
    compute_beta,
    compute_effective_model,
    compute_kappa2_residual,
    compute_p_inf,
    compute_sigma_sq,
    compute_theta,
    compute_theta_inst,
    solve_cell,
)
from .environment import (  # noqa: F401
    EnvironmentPath,
    EnvironmentSpec,
    PeriodicProfile,
    constant_profile,
    evaluate_mu,
    random_profile,
    sample_environment,
    sample_lambda,
    trig_profile,
)
from .epsilon import (  # noqa: F401
    EpsProblem,
    FrameShift,
    GaussianBump,
    build_frame,
    moving_frame_error,
    product_case_check,
    solve_eps,
    solve_homogenized,
    spectral_shift,
)
from .errors import (  # noqa: F401
    ConfigurationError,
    DimensionError,
    DomainError,
    InconsistencyError,
    JumphomError,
    NumericalError,
    RelaxationError,
    StatisticalError,
)
from .evolution import (  # noqa: F401
    AssembledEnvironment,
    IntegratorConfig,
    duality_check,
    evolve_adjoint_backward,
    evolve_forward,
)
from .grids import FieldTrajectory, TorusField, TorusGrid  # noqa: F401
from .kernels import (  # noqa: F401
    DispersalKernel,
    PeriodizedMoments,
    assemble_generator,
    periodize,
)
from .stochastics import (  # noqa: F401
    CltReport,
    clt_check,
    law_limit_check,
    sample_G0_paths,
)
