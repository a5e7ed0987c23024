"""Capacitance forward models: a finite-difference field solver and a fast
lumped surrogate calibrated against it."""

from eskin.fields.fd import (
    EPS0,
    ElectrodeMask,
    FDSolver,
    PotentialField,
    SolverError,
    VoxelGrid,
    capacitance_frame,
    compute_capacitance,
    domain_box,
    fd_frame,
    solve_potential,
    voxelize,
)
from eskin.fields.lumped import LumpedModel, default_lumped_model, lumped_frame

__all__ = [
    "EPS0",
    "ElectrodeMask",
    "FDSolver",
    "LumpedModel",
    "PotentialField",
    "SolverError",
    "VoxelGrid",
    "capacitance_frame",
    "compute_capacitance",
    "default_lumped_model",
    "domain_box",
    "fd_frame",
    "lumped_frame",
    "solve_potential",
    "voxelize",
]
