"""HJ reachability guidance and CBVF shielding for a sampling-based diffusion planner."""
from .diffusion import DiffusionPlanner, PlannerConfig
from .dynamics import EGO_BOUNDS, HV_BOUNDS, ControlBounds, VehicleState
from .grid import GridSpec, ValueFunction, load, save
from .hj_solver import ReachabilitySolver, SolverConfig, solve
from .objective import ObjectiveWeights, ValueFunctionSet
from .scenario import Scenario, load_scenario
from .shield import SafetyShield, ShieldConfig
from .sim import BatchReport, TrialResult, run_batch, run_trial

__version__ = "0.1.0"
