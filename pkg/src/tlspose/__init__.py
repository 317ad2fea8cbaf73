"""Total-least-squares pose estimation from line-of-sight pairs with virtual depths."""

from .errors import (DegenerateConfigurationError, DegenerateGeometryError,
                     IllConditionedSystemError, InvalidNoiseModelError, ScenarioFormatError,
                     TLSPoseError)
from .estimator import (LinearizedSystem, PoseSolution, SolverConfig, assemble, assemble_at_truth,
                        gn_step, initialize, reduced_cost, solve, solve_ls_baseline)
from .reference import reference_scenario
from .scenario import FeatureNoise, FeatureTruth, MeasurementSet, NoiseModel, Scenario
from .uncertainty import (UncertaintyReport, covariance_of_unknowns, estimate_covariance,
                          fisher_information, observation_gain, residual_covariance)

__version__ = "0.1.0"
