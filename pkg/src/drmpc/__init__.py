"""Data-driven distributionally robust MPC with Wasserstein ambiguity sets.

Affine purified-output feedback laws are synthesized by a convex QP whose
state constraints must hold in expectation for every disturbance
distribution within a type-1 Wasserstein ball around the observed samples.
"""

from .ambiguity import (AmbiguitySet, DisturbanceStore, GroundNorm, PolytopeSupport,
                        RadiusSchedule, calibrate_radius, wasserstein_distance_discrete,
                        window_samples)
from .closed_loop import EpisodeLog, LoopConfig, estimate_disturbance, run_episode
from .errors import ConfigError, DimensionError, InsufficientDataError, SolverError
from .experiments import ExperimentConfig, run_monte_carlo
from .lti import LtiSystem, PobPolicy, apply_policy, build_stacked, rollout
from .qp import QpInstance, QpResult, solve
from .reform import (CostWeights, DisturbanceMoments, StateBound, assemble, solve_policy,
                     synthesize, worst_case_expectation_oracle, worst_case_value)

__version__ = "0.1.0"
