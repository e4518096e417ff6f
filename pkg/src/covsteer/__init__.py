"""Chance-constrained covariance steering for low-thrust transfers with mass dynamics."""

from covsteer.dynamics import PhysicalParams, ScaleSet, SpacecraftModel
from covsteer.discretize import ReferenceTrajectory, DiscreteSegment
from covsteer.conic import ConicProgram, ConicSolution
from covsteer.steering import SolverConfig, SteeringSolution, scp_solve
from covsteer.scenario import Scenario, load_preset, parse_scenario, write_scenario

__version__ = "0.1.0"

__all__ = [
    "PhysicalParams",
    "ScaleSet",
    "SpacecraftModel",
    "ReferenceTrajectory",
    "DiscreteSegment",
    "ConicProgram",
    "ConicSolution",
    "SolverConfig",
    "SteeringSolution",
    "scp_solve",
    "Scenario",
    "parse_scenario",
    "load_preset",
    "write_scenario",
]
