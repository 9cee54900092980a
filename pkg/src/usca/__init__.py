"""Private contextual kernel bandits: uniform sampling with covariance approximation."""

from .bandit import Environment, RunResult, TheoryConstants, make_environment, run_usca, theory_constants
from .env import ContextDistribution, Domain, NoiseModel, RewardFunction
from .estimators import ApproxSet, Dataset, UscaEstimator, build_approx_set, build_usca
from .kernels import Eigendecay, KernelSpec
from .mechanism import ExpMechanism

__version__ = "0.1.0"
