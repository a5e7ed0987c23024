"""Analytic and structural checks of the finite-difference solver."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from eskin.fields.fd import EPS0, ElectrodeMask, FDSolver, VoxelGrid, compute_capacitance


@dataclass
class PlateResult:
    voxels_across_gap: int
    capacitance: float  # F
    analytic: float  # F
    rel_error: float
    iterations: int


def parallel_plate(voxels_across_gap: int, gap_mm: float = 4.0, side_voxels: int = 4, eps_r: float = 1.0,
                   tol: float = 1e-10) -> PlateResult:
    """Two plates spanning the whole cross-section of a zero-flux box.

    Each plate is one voxel layer whose inner face sits on the gap boundary,
    so ``voxels_across_gap`` voxels fill the gap of ``gap_mm``. The side
    walls carry no flux, so the only discrepancy against eps0*A/d comes from
    placing the Dirichlet value at the plate voxel centres.
    """
    n = int(voxels_across_gap)
    h = gap_mm / n
    eps = np.full((side_voxels, side_voxels, n + 2), eps_r)
    labels = np.zeros(eps.shape, dtype=np.int32)
    labels[:, :, 0] = 1
    labels[:, :, -1] = 2
    grid = VoxelGrid(eps, spacing=h)
    mask = ElectrodeMask(labels)
    phi = FDSolver(grid, mask, tol=tol).solve(1)
    c = compute_capacitance(phi, grid, 2)
    area_m2 = (side_voxels * h * 1e-3) ** 2
    analytic = EPS0 * eps_r * area_m2 / (gap_mm * 1e-3)
    return PlateResult(n, c, analytic, abs(c - analytic) / analytic, phi.iterations)


def random_problem(seed: int = 0, dims=(14, 12, 10), n_electrodes: int = 4):
    """Heterogeneous grid with small box electrodes at distinct places."""
    rng = np.random.default_rng(seed)
    eps = rng.uniform(1.0, 6.0, dims)
    labels = np.zeros(dims, dtype=np.int32)
    spots = [(2, 2, 2), (dims[0] - 4, 3, 2), (3, dims[1] - 4, dims[2] - 4), (dims[0] - 4, dims[1] - 4, dims[2] - 3)]
    for e, (i, j, k) in enumerate(spots[:n_electrodes], start=1):
        labels[i : i + 2, j : j + 2, k : k + 2] = e
    return VoxelGrid(eps, spacing=1.0), ElectrodeMask(labels)


def reciprocity_error(seed: int = 0, tol: float = 1e-12) -> float:
    """Largest relative |C_ij - C_ji| over all electrode pairs."""
    grid, mask = random_problem(seed)
    solver = FDSolver(grid, mask, tol=tol)
    phis = {e: solver.solve(e) for e in mask.ids}
    worst = 0.0
    for a in mask.ids:
        for b in mask.ids:
            if b > a:
                cab = compute_capacitance(phis[a], grid, b)
                cba = compute_capacitance(phis[b], grid, a)
                worst = max(worst, abs(cab - cba) / max(cab, cba))
    return worst


def linearity_error(k: float = 3.7, seed: int = 0, tol: float = 1e-12) -> float:
    """Relative deviation of C(k*eps) from k*C(eps) for a uniform medium."""
    grid, mask = random_problem(seed)
    base = VoxelGrid(np.full(grid.dims, 2.0), grid.spacing)
    c1 = compute_capacitance(FDSolver(base, mask, tol=tol).solve(1), base, 2)
    scaled = base.scaled(k)
    c2 = compute_capacitance(FDSolver(scaled, mask, tol=tol).solve(1), scaled, 2)
    return abs(c2 - k * c1) / abs(k * c1)


@dataclass
class ValidationReport:
    plates: list[PlateResult]
    reciprocity: float
    linearity: float
    seconds: float

    @property
    def converging(self) -> bool:
        errs = [p.rel_error for p in self.plates]
        return all(b < a for a, b in zip(errs, errs[1:]))

    def rows(self) -> list[dict]:
        out = [
            {"check": f"parallel_plate_n{p.voxels_across_gap}", "value": p.capacitance, "reference": p.analytic,
             "rel_error": p.rel_error}
            for p in self.plates
        ]
        out.append({"check": "reciprocity", "value": self.reciprocity, "reference": 0.0, "rel_error": self.reciprocity})
        out.append({"check": "linearity", "value": self.linearity, "reference": 0.0, "rel_error": self.linearity})
        return out


def validate_solver(resolutions=(8, 16, 32, 64)) -> ValidationReport:
    t0 = time.perf_counter()
    plates = [parallel_plate(n) for n in resolutions]
    return ValidationReport(plates, reciprocity_error(), linearity_error(), time.perf_counter() - t0)
