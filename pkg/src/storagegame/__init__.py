"""
Real-time coordination of networked battery storage on a radial feeder.

Linearized voltage model, virtual-queue tuning, a per-period charging game
solved centrally or by dual decomposition, and a horizon simulator.
"""

__version__ = "0.1.0"

from .controller import MODES, StepProblem, assemble_step, solve_centralized
from .dualnet import DualConfig, solve_distributed
from .grid import build_sensitivities, load_feeder
from .market import MarketTick, RandomConfig, SyntheticConfig, WorldBounds
from .sim import World, audit, random_world, run, synthetic_world
from .storage import Fleet, StorageUnit, load_fleet, tune_fleet

__all__ = [
    "MODES", "StepProblem", "assemble_step", "solve_centralized", "DualConfig",
    "solve_distributed", "build_sensitivities", "load_feeder", "MarketTick", "RandomConfig",
    "SyntheticConfig", "WorldBounds", "World", "audit", "random_world", "run",
    "synthetic_world", "Fleet", "StorageUnit", "load_fleet", "tune_fleet",
]
