"""Finite-difference electrostatics on a voxel grid.

Solves div(eps grad phi) = 0 with a 7-point stencil and harmonic-mean face
permittivities, Dirichlet values on electrode voxels and zero flux on the
outer box. Capacitance is the charge collected on the sensing electrode,
i.e. the discrete flux of eps * grad(phi) through the voxel faces that bound
it, divided by the excitation voltage.
"""

from __future__ import annotations

import functools
import math
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from eskin.config import FieldsConfig
from eskin.geometry import DeformationField, ManipulatorGeometry

log = logging.getLogger(__name__)

EPS0 = 8.854187817e-12  # F/m


class SolverError(RuntimeError):
    """Iterative solve failed to reach tolerance."""

    def __init__(self, message: str, residual: float = float("nan"), excited: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.excited = excited


@dataclass
class VoxelGrid:
    """Relative permittivity per voxel on a box of (nx, ny, nz) voxels."""

    rel_permittivity: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm, centre of voxel (0, 0, 0)

    def __post_init__(self):
        self.rel_permittivity = np.asarray(self.rel_permittivity, dtype=float)
        if self.rel_permittivity.ndim != 3 or min(self.rel_permittivity.shape) < 3:
            raise ValueError(f"grid needs >= 3 voxels per axis, got {self.rel_permittivity.shape}")
        if np.any(self.rel_permittivity < 1.0):
            raise ValueError("relative permittivity must be >= 1 everywhere")
        if np.isscalar(self.spacing):
            self.spacing = (float(self.spacing),) * 3
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.rel_permittivity.shape

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def index_of(self, pts) -> np.ndarray:
        """Integer voxel index of world points (mm)."""
        pts = np.asarray(pts, dtype=float)
        idx = np.floor((pts - np.asarray(self.origin)) / np.asarray(self.spacing) + 0.5).astype(int)
        return idx

    def scaled(self, k: float) -> "VoxelGrid":
        return VoxelGrid(self.rel_permittivity * k, self.spacing, self.origin)


@dataclass
class ElectrodeMask:
    """Electrode label per voxel: 0 = dielectric, 1..n = electrode id."""

    labels: np.ndarray
    centroids: np.ndarray | None = None  # (n, 3) mm

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        ids = self.ids
        if len(ids) == 0:
            raise ValueError("mask holds no electrodes")
        if ids[0] != 1 or ids[-1] != len(ids):
            raise ValueError(f"electrode ids must be 1..n without gaps, got {ids}")

    @property
    def ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v > 0]

    @property
    def n_electrodes(self) -> int:
        return len(self.ids)

    def voxels(self, electrode: int) -> np.ndarray:
        return np.argwhere(self.labels == electrode)

    def check(self, grid: VoxelGrid) -> None:
        if self.labels.shape != grid.dims:
            raise ValueError(f"mask shape {self.labels.shape} does not match grid {grid.dims}")
        for e in self.ids:
            if not _face_connected(self.labels == e):
                raise ValueError(f"electrode {e} is not face-connected")


def _face_connected(mask: np.ndarray) -> bool:
    from scipy.ndimage import label

    _, n = label(mask)
    return n == 1


@dataclass
class PotentialField:
    phi: np.ndarray
    excited: int
    voltage: float
    iterations: int = 0
    residual: float = 0.0
    mask: ElectrodeMask | None = field(default=None, repr=False)


def _face_conductances(grid: VoxelGrid):
    """Per-axis face conductance eps_face * area / h (mm) between voxel neighbours."""
    eps = grid.rel_permittivity
    hx, hy, hz = grid.spacing
    geo = (hy * hz / hx, hx * hz / hy, hx * hy / hz)
    out = []
    for axis in range(3):
        a = np.take(eps, np.arange(eps.shape[axis] - 1), axis=axis)
        b = np.take(eps, np.arange(1, eps.shape[axis]), axis=axis)
        out.append(2.0 * a * b / (a + b) * geo[axis])
    return out


class FDSolver:
    """Assembled system for one (grid, mask); solves any excitation."""

    def __init__(self, grid: VoxelGrid, mask: ElectrodeMask, tol: float = 1e-8, max_iter: int = 20000):
        mask.check(grid)
        self.grid = grid
        self.mask = mask
        self.tol = tol
        self.max_iter = max_iter
        n = int(np.prod(grid.dims))
        flat_labels = mask.labels.ravel()
        unknown = flat_labels == 0
        self.unknown_idx = np.flatnonzero(unknown)
        self.known_idx = np.flatnonzero(~unknown)
        pos = np.full(n, -1, dtype=np.int64)
        pos[self.unknown_idx] = np.arange(len(self.unknown_idx))
        kpos = np.full(n, -1, dtype=np.int64)
        kpos[self.known_idx] = np.arange(len(self.known_idx))
        lin = np.arange(n).reshape(grid.dims)
        self.conductances = _face_conductances(grid)

        rows, cols, vals = [], [], []
        brow, bcol, bval = [], [], []
        diag = np.zeros(len(self.unknown_idx))
        for axis in range(3):
            g = self.conductances[axis].ravel()
            a = np.take(lin, np.arange(grid.dims[axis] - 1), axis=axis).ravel()
            b = np.take(lin, np.arange(1, grid.dims[axis]), axis=axis).ravel()
            ua, ub = unknown[a], unknown[b]
            both = ua & ub
            rows += [pos[a[both]], pos[b[both]]]
            cols += [pos[b[both]], pos[a[both]]]
            vals += [-g[both], -g[both]]
            np.add.at(diag, pos[a[ua]], g[ua])
            np.add.at(diag, pos[b[ub]], g[ub])
            # unknown next to a fixed voxel feeds the right-hand side
            m1 = ua & ~ub
            brow.append(pos[a[m1]]); bcol.append(kpos[b[m1]]); bval.append(g[m1])
            m2 = ub & ~ua
            brow.append(pos[b[m2]]); bcol.append(kpos[a[m2]]); bval.append(g[m2])
        nu = len(self.unknown_idx)
        off = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nu, nu)
        )
        self.A = (off + sp.diags(diag)).tocsr()
        self.B = sp.coo_matrix(
            (np.concatenate(bval), (np.concatenate(brow), np.concatenate(bcol))),
            shape=(nu, len(self.known_idx)),
        ).tocsr()
        safe = np.where(diag > 0, diag, 1.0)
        self.M = sp.diags(1.0 / safe)
        self.known_labels = flat_labels[self.known_idx]

    def solve(self, excited: int, voltage: float = 1.0, warm_start: PotentialField | None = None) -> PotentialField:
        if excited not in self.mask.ids:
            raise ValueError(f"electrode {excited} not in mask")
        known_vals = np.where(self.known_labels == excited, voltage, 0.0)
        b = self.B @ known_vals
        x0 = None
        if warm_start is not None and warm_start.phi.shape == self.grid.dims:
            x0 = warm_start.phi.ravel()[self.unknown_idx] * (voltage / warm_start.voltage)
        count = [0]

        def _cb(_xk):
            count[0] += 1

        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            x = np.zeros_like(b)
            res = 0.0
        else:
            x, info = cg(self.A, b, x0=x0, rtol=self.tol, atol=0.0, maxiter=self.max_iter, M=self.M, callback=_cb)
            res = float(np.linalg.norm(b - self.A @ x) / bnorm)
            if info != 0 or res > self.tol * 1.0001:
                raise SolverError(
                    f"CG did not converge for electrode {excited}: residual {res:.3e} after {count[0]} iterations",
                    residual=res,
                    excited=excited,
                )
        phi = np.zeros(int(np.prod(self.grid.dims)))
        phi[self.unknown_idx] = x
        phi[self.known_idx] = known_vals
        return PotentialField(phi.reshape(self.grid.dims), excited, voltage, count[0], res, self.mask)


def solve_potential(
    grid: VoxelGrid,
    mask: ElectrodeMask,
    excited: int,
    V: float = 1.0,
    warm_start: PotentialField | None = None,
    tol: float = 1e-8,
    max_iter: int = 20000,
) -> PotentialField:
    """Potential with electrode ``excited`` at ``V`` and every other electrode grounded."""
    return FDSolver(grid, mask, tol, max_iter).solve(excited, V, warm_start)


def electrode_charge(phi: PotentialField, grid: VoxelGrid, electrode: int) -> float:
    """Charge (C) on ``electrode`` from the flux through its bounding voxel faces."""
    if phi.mask is None:
        raise ValueError("potential field carries no electrode mask")
    inside = phi.mask.labels == electrode
    g = _face_conductances(grid)
    p = phi.phi
    q = 0.0
    for axis in range(3):
        n = grid.dims[axis]
        lo = np.take(inside, np.arange(n - 1), axis=axis)
        hi = np.take(inside, np.arange(1, n), axis=axis)
        plo = np.take(p, np.arange(n - 1), axis=axis)
        phi_hi = np.take(p, np.arange(1, n), axis=axis)
        # faces with the electrode on exactly one side
        m = lo & ~hi
        q += np.sum(g[axis][m] * (plo[m] - phi_hi[m]))
        m = hi & ~lo
        q += np.sum(g[axis][m] * (phi_hi[m] - plo[m]))
    return EPS0 * 1e-3 * q  # conductances are in mm


def compute_capacitance(phi: PotentialField, grid: VoxelGrid, sense: int) -> float:
    """Mutual capacitance (F) between the excited electrode of ``phi`` and ``sense``."""
    if sense == phi.excited:
        raise ValueError("sense electrode must differ from the excited electrode")
    return abs(electrode_charge(phi, grid, sense)) / abs(phi.voltage)


def capacitance_frame(
    grid: VoxelGrid,
    mask: ElectrodeMask,
    warm_cache: dict | None = None,
    tol: float = 1e-8,
    max_iter: int = 20000,
    timestamp: float = 0.0,
):
    """All pairwise capacitances in canonical order, as a raw frame in fF.

    Electrodes 1..n-1 are excited in turn and every higher-numbered electrode
    is sensed. ``warm_cache`` maps excitation id to the last potential and is
    updated in place.
    """
    from eskin.sensing import CapacitanceFrame, N_PAIRS

    solver = FDSolver(grid, mask, tol, max_iter)
    ids = mask.ids
    vals = []
    for e in ids[:-1]:
        ws = warm_cache.get(e) if warm_cache is not None else None
        try:
            phi = solver.solve(e, 1.0, ws)
        except SolverError as exc:
            raise SolverError(f"excitation {e}: {exc}", exc.residual, e) from exc
        if warm_cache is not None:
            warm_cache[e] = phi
        for s in ids:
            if s > e:
                vals.append(compute_capacitance(phi, grid, s) * 1e15)
    vals = np.array(vals)
    if len(ids) == 8:
        assert len(vals) == N_PAIRS
        return CapacitanceFrame(vals, timestamp=timestamp, kind="raw")
    return vals


# --------------------------------------------------------------------------
# voxelisation of the deformed manipulator
# --------------------------------------------------------------------------
def voxelize(state: DeformationField, config: FieldsConfig | None = None, box=None):
    """Voxel grid and electrode mask of a deformed manipulator state.

    ``box`` optionally fixes the (lo, hi) world extent so that frames of one
    trajectory share a grid (needed for warm starts).
    """
    config = config or FieldsConfig()
    h = config.spacing
    geom = state.geom
    if box is None:
        box = grid_box(state, config)
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    dims = tuple(int(v) for v in np.round((hi - lo) / h).astype(int) + 1)
    xs, ys, zs = (lo[a] + h * np.arange(dims[a]) for a in range(3))
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    eps = np.ones(len(pts))
    inside = state.inside_body(pts)
    eps[inside] = config.body_permittivity
    if state.touch.touched:
        finger = _in_finger(state, pts) & ~inside
        eps[finger] = state.touch.finger_rel_permittivity
    grid = VoxelGrid(eps.reshape(dims), (h, h, h), tuple(lo))

    labels = np.zeros(dims, dtype=np.int32)
    for w in geom.wires:
        vox = _rasterize_wire(state, w, grid)
        clash = labels[tuple(vox.T)]
        if np.any((clash != 0) & (clash != w.electrode)):
            raise ValueError(f"electrode {w.electrode} overlaps another electrode at spacing {h} mm")
        labels[tuple(vox.T)] = w.electrode
    centroids = geom.electrode_centroids()
    return grid, ElectrodeMask(labels, centroids)


def domain_box(geom: ManipulatorGeometry, config: FieldsConfig):
    """Fixed world box that holds every state reachable under the configured limits.

    All frames of one geometry share this box, so calibrated values never pick
    up changes of the zero-flux outer walls. The envelope covers a full 20 ml
    bump on every chamber, the finger half-ball and the largest bend.
    """
    from eskin.geometry import bump_amplitude

    c = geom.config
    mech = geom.mechanics
    theta = math.radians(mech.bend_deg_per_n * mech.peak_force)
    reach_z = geom.thickness / 2 + bump_amplitude(20.0, geom) + mech.contact_radius
    reach_z += c.body_length * math.sin(theta)
    lo = np.array([-c.body_width / 2, 0.0, -reach_z])
    hi = np.array([c.body_width / 2, c.body_length, reach_z])
    return _snap(geom, lo, hi, config)


def _snap(geom, lo, hi, config):
    h = config.spacing
    margin = (config.margin_voxels + 1) * h
    # snap voxel centres onto the rest face planes and the wire lines so that
    # mirror-image electrodes rasterise identically
    anchor = np.array([geom.config.wire_x[0], geom.skin_y0, geom.thickness / 2])
    lo = anchor + np.floor((lo - margin - anchor) / h) * h
    hi = anchor + np.ceil((hi + margin - anchor) / h) * h
    return lo, hi


def grid_box(state: DeformationField, config: FieldsConfig):
    """Grid extent for ``state``: the geometry's fixed domain, grown only if
    the state reaches beyond it (forces above the configured peak)."""
    lo, hi = domain_box(state.geom, config)
    blo, bhi = state.bounding_box(step=config.spacing / 2)
    if state.touch.touched:
        ctr = state.bend(state.contact_point()[None])[0]
        r = state.touch.contact_radius
        blo = np.minimum(blo, ctr - r)
        bhi = np.maximum(bhi, ctr + r)
    margin = (config.margin_voxels + 1) * config.spacing
    if np.all(blo - margin >= lo - 1e-9) and np.all(bhi + margin <= hi + 1e-9):
        return lo, hi
    return _snap(state.geom, np.minimum(lo, blo), np.maximum(hi, bhi), config)


def _in_finger(state: DeformationField, pts: np.ndarray) -> np.ndarray:
    q = state.unbend(pts)
    c = state.contact_point()
    n = np.array([0.0, 0.0, state.geom.face_sign(state.touch.face)])
    d = q - c
    return (np.linalg.norm(d, axis=1) <= state.touch.contact_radius) & (d @ n >= 0.0)


def _rasterize_wire(state: DeformationField, wire, grid: VoxelGrid) -> np.ndarray:
    h = min(grid.spacing)
    step = h / 4
    line = state.surface_points(wire.centerline(step), wire.face)
    x0, x1, y0, y1 = wire.pad_rect()
    us = np.arange(x0 + step / 2, x1, step)
    vs = np.arange(y0 + step / 2, y1, step)
    U, Vv = np.meshgrid(us, vs, indexing="ij")
    pad = state.surface_points(np.stack([U.ravel(), Vv.ravel()], axis=-1), wire.face)
    idx = grid.index_of(line)
    cells = [idx[0]]
    for nxt in idx[1:]:
        cur = cells[-1]
        # step one axis at a time so consecutive voxels share a face
        while np.any(cur != nxt):
            axis = int(np.argmax(np.abs(nxt - cur)))
            cur = cur.copy()
            cur[axis] += int(np.sign(nxt[axis] - cur[axis]))
            cells.append(cur)
    vox = np.unique(np.concatenate([np.array(cells), grid.index_of(pad)]), axis=0)
    if np.any(vox < 0) or np.any(vox >= np.asarray(grid.dims)):
        raise ValueError(f"electrode {wire.electrode} falls outside the grid")
    return vox


def fd_frame(state: DeformationField, config: FieldsConfig | None = None, warm_cache: dict | None = None, box=None):
    """Raw capacitance frame (fF) of a deformed state from the FD backend."""
    config = config or FieldsConfig()
    grid, mask = voxelize(state, config, box)
    return capacitance_frame(grid, mask, warm_cache, config.tol, config.max_iter, timestamp=state.t)


@functools.lru_cache(maxsize=8)
def reference_frame_fd(geom: ManipulatorGeometry, config: FieldsConfig) -> np.ndarray:
    """FD capacitances (fF) of the rest state; anchors the lumped model's scale."""
    from eskin.geometry import NO_TOUCH, InflationState, deform

    state = deform(geom, InflationState(), NO_TOUCH, 0.0)
    return fd_frame(state, config).values
