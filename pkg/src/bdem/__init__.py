"""Implicit bonded discrete element simulation.

Rigid spherical elements carry positions and unit-quaternion orientations;
bonds between them resist stretch, shear, bending, and twisting, and break
when over-stressed.  Each timestep minimizes an incremental potential over
the product of Euclidean positions and the quaternion sphere.
"""

from .bonds import BondParams, BondRest, BondState, PlasticParams
from .elements import ElementMass, ElementSet, ElementState, sphere_mass
from .scenes import Scene, built_in_scene
from .solver import SolverConfig, stable_step

__all__ = [
    "BondParams",
    "BondRest",
    "BondState",
    "ElementMass",
    "ElementSet",
    "ElementState",
    "PlasticParams",
    "Scene",
    "SolverConfig",
    "built_in_scene",
    "sphere_mass",
    "stable_step",
]
