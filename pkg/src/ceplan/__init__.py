"""Correlated-equilibrium trajectory coordination at a V2I intersection."""

from .coordinator import (CEProblem, ConfigurationError, Recommendation, RiskPoint,
                          ce_constraint_residual, collision_probability, locate_risk_points,
                          risk_mass, solve_recommendation, yield_term)
from .corridor import Corridor, CorridorError, CorridorSegment, build_corridor, sample_trajectory
from .library import (CoarseTrajectory, TrajectoryLibrary, UnreachableError, astar,
                      generate_trajectory_library, project_onto_path, trajectory_stats)
from .metrics import EpisodeMetrics, braking_histogram, compute_metrics, safety_efficiency_weights
from .preference import PreferenceParams, initial_preferences, mnl_probabilities, raw_preference
from .refine import (ConditioningError, PiecewiseTrajectory, PolynomialSegment, QPResult,
                     evaluate, refine_trajectory)
from .scenario import ScenarioConfig, ScenarioError, SimConfig, load_scenario
from .sim import EpisodeLog, count_braking, run_episode
from .stgrid import Cell, GridBoundsError, GridSpec, OccupancyIndex, cell_bounds, world_to_cell

__version__ = "0.1.0"
