"""Double descent in neural-network Gaussian process regression.

A numerical laboratory built around four pieces: spectral measures with a
Marchenko-Pastur fixed-point solver, exact conjugate kernels of deep
fully-connected networks, finite-width kernel random matrices, and the
Gaussian-process regressions whose generalisation error exhibits the
double-descent curve as the feature width sweeps through the number of
training points.
"""

from .config import ExperimentConfig
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateKernelError,
    HypothesisViolationError,
    InvalidArgumentError,
    NngpDescentError,
    NumericalError,
    SingularEvaluationError,
    UnsupportedConfigurationError,
)
from .kernels import (
    Activation,
    KernelMatrix,
    KernelRecipe,
    QuadratureRule,
    conjugate_kernel_matrix,
    gram_matrix,
    kernel_step,
    preactivation_kernel_matrix,
)
from .measures import (
    MpMapParams,
    SpectralMeasure,
    empirical_spectral_measure,
    integrate_against,
    invert_stieltjes,
    ks_distance,
    marchenko_pastur_measure,
    mp_closed_form,
    mp_map,
    point_mass,
    stieltjes,
)
from .regression import (
    EgEstimate,
    GpConfig,
    Posterior,
    empirical_generalisation_error,
    fit,
    predict_mean,
    predict_variance,
)
from .sampling import (
    RngSpec,
    TeacherModel,
    eigenvalues,
    sample_finite_width_kernel,
    sample_inputs,
    sample_labels,
)
from .theory import (
    AbcConstants,
    DescentCurve,
    DescentTheoryInputs,
    TheoryValue,
    abc_constants,
    asymptotic_limits,
    estimate_limit_spectrum,
    limit_kernel_measure,
    spectral_g,
    theoretical_generalisation_error,
)

__version__ = "0.1.0"
