"""Kernel-based sensitivity indices for inputs following weighted distributions."""

from .depmodel import DependencyModel, QuadraticBallOverride, SubsetSpec, conditional_cdf, conditional_quantile, sample_target
from .estimators import (
    AnalysisResult,
    EstimatorConfig,
    IndexEstimate,
    analyze,
    estimate_denominator,
    estimate_first_order,
    estimate_total,
    estimate_upsilon,
    functional_index,
)
from .exceptions import *  # noqa: F401,F403
from .kernels import KernelSpec, gram, gram_psd_check, kernel_eval
from .marginals import Beta, BetaFirstKind, GaussianCopula, InputSpace, Normal, Uniform
from .models import ConstantModel, ExternalModel, FunctionModel, GFunction, GSobol4, Linear, Quadratic, ThetaGrid, ThetaToy
from .screening import MorrisDesign, ScreeningReport, morris_trajectories, mu_star, screen_rank
from .streams import Stream
from .weights import (
    Composite,
    Constant,
    EffectiveWeight,
    FunctionalLoss,
    IndicatorThreshold,
    Polynomial,
    SmoothMembership,
    normalizing_constant,
)

__version__ = "0.1.0"
