"""Planar-robot visual-inertial state space: Lie groups, kinematic motion
model with RBF command smoothing, stochastic plane constraint, IMU
propagation, observability analysis, simulation and batch estimation."""

from .liegroups import PlanarPose, Pose3, Rotation3, se2_exp, se2_log, so3_exp, so3_log
from .motionmodel import CommandWindow, ControlCommand, RbfParams, effective_control
from .planeconstraint import PlaneParams, plane_residual
from .propagation import GravityModel, ImuSamples, VioState, propagate_state, transition_matrix
from .simulator import NoiseConfig, Scenario, generate

__all__ = [
    "CommandWindow",
    "ControlCommand",
    "GravityModel",
    "ImuSamples",
    "NoiseConfig",
    "PlanarPose",
    "PlaneParams",
    "Pose3",
    "RbfParams",
    "Rotation3",
    "Scenario",
    "VioState",
    "effective_control",
    "generate",
    "plane_residual",
    "propagate_state",
    "se2_exp",
    "se2_log",
    "so3_exp",
    "so3_log",
    "transition_matrix",
]

__version__ = "0.1.0"
