"""Safety-aware map-based damage recovery for a simulated crawling robot."""
from .acquisition import (
    ParetoFront2,
    Posterior,
    ehvi_2d,
    expected_constrained_improvement,
    expected_improvement,
    feasibility_probability,
    hypervolume_2d,
    pareto_insert,
)
from .adaptation import AdaptationConfig, ConstraintSpec, DamagedRobot, Strategy, TrialLog, adapt
from .archive import Archive, Elite, MapElites, load_archive, run_map_elites, save_archive
from .bench import ExperimentPlan, mann_whitney_u, run_experiment, summarize
from .crawler import DAMAGES, Crawler, DamageSpec, RobotModel, SimConfig, simulate
from .gp import KernelParams, MapPriorGP, gp_predict, gp_update
from .mapgen import generate_map

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "Archive", "ConstraintSpec", "Crawler", "DAMAGES", "DamageSpec",
    "DamagedRobot", "Elite", "ExperimentPlan", "KernelParams", "MapElites", "MapPriorGP",
    "ParetoFront2", "Posterior", "RobotModel", "SimConfig", "Strategy", "TrialLog", "adapt",
    "ehvi_2d", "expected_constrained_improvement", "expected_improvement",
    "feasibility_probability", "generate_map", "gp_predict", "gp_update", "hypervolume_2d",
    "load_archive", "mann_whitney_u", "pareto_insert", "run_experiment", "run_map_elites",
    "save_archive", "simulate", "summarize",
]
