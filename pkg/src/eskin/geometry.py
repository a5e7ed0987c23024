"""Manipulator + e-skin geometry and its deformation under inflation and touch.

World frame (mm): ``x`` across the body width (centred), ``y`` along the body
from the fixed base (``y = 0``) to the tip, ``z`` through the thickness. The
front face sits at ``z = +T/2`` and the back face at ``z = -T/2``.

Skin-local coordinates ``(u, v)`` put the origin at the low corner of the
40x110 mm skin rectangle: ``u = x + skin_width/2``, ``v = y - skin_y0``. Both
faces use the same (unmirrored) ``u`` so that sub-region numbering does not
depend on which side the viewer stands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from eskin.config import DeformationConfig, GeometryConfig

Face = Literal["front", "back"]
FACES: tuple[Face, Face] = ("front", "back")
N_ELECTRODES = 8
N_MARKERS = 5
N_SUBREGIONS = 18
GRID = 3


@dataclass(frozen=True)
class Wire:
    electrode: int  # 1..8
    face: Face
    x: float
    y_start: float  # interface end
    direction: int  # +1 runs toward the tip, -1 toward the base
    length: float
    width: float
    interface_size: float

    @property
    def y_end(self) -> float:
        return self.y_start + self.direction * self.length

    def centerline(self, step: float = 0.5) -> np.ndarray:
        """Rest-frame (x, y) samples of the wire centreline, interface end first."""
        n = max(2, int(math.ceil(self.length / step)) + 1)
        ys = self.y_start + self.direction * np.linspace(0.0, self.length, n)
        return np.column_stack([np.full(n, self.x), ys])

    def pad_rect(self) -> tuple[float, float, float, float]:
        """(x0, x1, y0, y1) of the square liquid-metal interface."""
        h = self.interface_size / 2
        if self.direction > 0:
            y0, y1 = self.y_start - self.interface_size, self.y_start
        else:
            y0, y1 = self.y_start, self.y_start + self.interface_size
        return (self.x - h, self.x + h, y0, y1)


@dataclass(frozen=True)
class ManipulatorGeometry:
    """Rest geometry of the 3-chamber manipulator with two e-skin modules."""

    config: GeometryConfig = field(default_factory=GeometryConfig)
    mechanics: DeformationConfig = field(default_factory=DeformationConfig)

    def __post_init__(self):
        c = self.config
        if len(c.wire_lengths) != 4 or len(c.wire_x) != 4 or len(c.wire_from_top) != 4:
            raise ValueError("each face carries exactly 4 wires")
        if len(c.marker_ys) != N_MARKERS:
            raise ValueError(f"exactly {N_MARKERS} markers are required")
        if len(c.chamber_starts) != 3:
            raise ValueError("the manipulator has exactly 3 chambers")
        for w in self.wires:
            u0, u1, v0, v1 = self.skin_rect_world
            for y in (w.y_start, w.y_end):
                if not (v0 <= y <= v1):
                    raise ValueError(f"wire {w.electrode} leaves the skin rectangle")
            if not (u0 + w.width / 2 <= w.x <= u1 - w.width / 2):
                raise ValueError(f"wire {w.electrode} leaves the skin rectangle")

    @property
    def body_size(self) -> tuple[float, float]:
        return (self.config.body_width, self.config.body_length)

    @property
    def skin_size(self) -> tuple[float, float]:
        return (self.config.skin_width, self.config.skin_length)

    @property
    def thickness(self) -> float:
        return self.config.body_thickness

    @property
    def chamber_depth(self) -> float:
        """Rest thickness (mm) of the chamber air slab, from its rest volume."""
        c = self.config
        return self.mechanics.chamber_volume_ml * 1000.0 / (c.chamber_width * c.chamber_length)

    @property
    def skin_y0(self) -> float:
        return (self.config.body_length - self.config.skin_length) / 2

    @property
    def skin_rect_world(self) -> tuple[float, float, float, float]:
        """(x0, x1, y0, y1) of the skin on either face."""
        hw = self.config.skin_width / 2
        return (-hw, hw, self.skin_y0, self.skin_y0 + self.config.skin_length)

    @property
    def chamber_rects(self) -> list[tuple[float, float, float, float]]:
        c = self.config
        hw = c.chamber_width / 2
        return [(-hw, hw, y0, y0 + c.chamber_length) for y0 in c.chamber_starts]

    @property
    def wires(self) -> list[Wire]:
        c = self.config
        _, _, sy0, sy1 = self.skin_rect_world
        out = []
        for k, face in enumerate(FACES):
            # the back module is the front module flipped about the y axis
            mirror = -1.0 if (face == "back" and c.back_mirrored) else 1.0
            for i in range(4):
                top = bool(c.wire_from_top[i])
                y_start = sy1 - c.wire_end_gap if top else sy0 + c.wire_end_gap
                out.append(
                    Wire(
                        electrode=4 * k + i + 1,
                        face=face,
                        x=mirror * c.wire_x[i],
                        y_start=y_start,
                        direction=-1 if top else 1,
                        length=c.wire_lengths[i],
                        width=c.wire_width,
                        interface_size=c.interface_size,
                    )
                )
        return out

    @property
    def marker_rest_positions(self) -> np.ndarray:
        c = self.config
        return np.array([[c.marker_x, y, 0.0] for y in c.marker_ys])

    def face_sign(self, face: Face) -> float:
        return 1.0 if face == "front" else -1.0

    def subregion_rect(self, index: int) -> tuple[Face, tuple[float, float, float, float]]:
        """Face and skin-local (u0, u1, v0, v1) of sub-region ``index`` (1..18)."""
        if not 1 <= index <= N_SUBREGIONS:
            raise ValueError(f"sub-region index must be in 1..18, got {index}")
        face: Face = "front" if index <= 9 else "back"
        cell = (index - 1) % 9
        row, col = divmod(cell, GRID)
        du = self.config.skin_width / GRID
        dv = self.config.skin_length / GRID
        return face, (col * du, (col + 1) * du, row * dv, (row + 1) * dv)

    def subregion_center(self, index: int) -> tuple[Face, tuple[float, float]]:
        face, (u0, u1, v0, v1) = self.subregion_rect(index)
        return face, ((u0 + u1) / 2, (v0 + v1) / 2)

    def skin_to_world(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        x = uv[..., 0] - self.config.skin_width / 2
        y = uv[..., 1] + self.skin_y0
        return np.stack([x, y], axis=-1)

    def world_to_skin(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] + self.config.skin_width / 2, xy[..., 1] - self.skin_y0], axis=-1)

    def electrode_centroids(self) -> np.ndarray:
        """Rest-frame centroid (mm) of each electrode's wire, shape (8, 3)."""
        out = []
        for w in self.wires:
            y_mid = (w.y_start + w.y_end) / 2
            out.append([w.x, y_mid, self.face_sign(w.face) * self.thickness / 2])
        return np.array(out)


def subregion_of(point, face: Face, geom: ManipulatorGeometry | None = None) -> int:
    """Sub-region index (1..18) of a skin-local point ``(u, v)`` on ``face``.

    Cells are closed on their low edges and open on their high edges; the
    outer high boundary of the skin belongs to the last row/column.
    """
    geom = geom or ManipulatorGeometry()
    w, h = geom.skin_size
    u, v = float(point[0]), float(point[1])
    if not (0.0 <= u <= w and 0.0 <= v <= h):
        raise ValueError(f"point ({u}, {v}) is outside the {w}x{h} mm skin rectangle")
    if face not in FACES:
        raise ValueError(f"unknown face {face!r}")
    col = min(int(math.floor(u / (w / GRID))), GRID - 1)
    row = min(int(math.floor(v / (h / GRID))), GRID - 1)
    return 1 + col + GRID * row + (0 if face == "front" else 9)


def subregions_adjacent(a: int, b: int) -> bool:
    """True when sub-regions ``a`` and ``b`` share an edge on the same face."""
    if a < 1 or b < 1 or a > N_SUBREGIONS or b > N_SUBREGIONS:
        return False
    if (a - 1) // 9 != (b - 1) // 9:
        return False
    ra, ca = divmod((a - 1) % 9, GRID)
    rb, cb = divmod((b - 1) % 9, GRID)
    return abs(ra - rb) + abs(ca - cb) == 1


@dataclass(frozen=True)
class InflationState:
    """Injected air volume per chamber (ml)."""

    p: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        if len(p) != 3:
            raise ValueError("inflation state has exactly 3 components")
        if any(not (0.0 <= v <= 20.0) for v in p):
            raise ValueError(f"inflation components must lie in [0, 20] ml, got {p}")
        object.__setattr__(self, "p", p)

    @property
    def is_reference(self) -> bool:
        return self.p == (0.0, 0.0, 0.0)

    def scaled(self, s: float) -> "InflationState":
        return InflationState(tuple(v * s for v in self.p))


@dataclass(frozen=True)
class TouchSpec:
    """One finger contact. ``subregion_index == 0`` means no touch."""

    subregion_index: int = 0
    contact_center: tuple[float, float] = (0.0, 0.0)  # skin-local (u, v) mm
    contact_radius: float = 8.0
    force_profile: Callable[[float], float] | None = None
    finger_rel_permittivity: float = 35.0

    def __post_init__(self):
        if not 0 <= self.subregion_index <= N_SUBREGIONS:
            raise ValueError(f"sub-region index must be in 0..18, got {self.subregion_index}")
        if self.finger_rel_permittivity < 1.0:
            raise ValueError("finger permittivity must be >= 1")

    @property
    def touched(self) -> bool:
        return self.subregion_index != 0

    @property
    def face(self) -> Face:
        return "front" if self.subregion_index <= 9 else "back"

    def force(self, t: float) -> float:
        if not self.touched or self.force_profile is None:
            return 0.0
        return float(self.force_profile(t))


NO_TOUCH = TouchSpec()


def _bump_unit_integral(width: float, length: float, taper: float) -> float:
    # tapered cosine across the width times raised cosine along the length
    return (width - taper) * (length / 2)


def _bump_profile(x, y, rect, taper: float):
    x0, x1, y0, y1 = rect
    length = y1 - y0
    half = (x1 - x0) / 2
    xc = (x0 + x1) / 2
    inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    along = 0.5 * (1.0 - np.cos(2.0 * np.pi * (y - y0) / length))
    ax = np.abs(x - xc)
    flat = half - taper
    across = np.where(ax <= flat, 1.0, 0.5 * (1.0 + np.cos(np.pi * (ax - flat) / taper)))
    return np.where(inside, along * across, 0.0)


@dataclass(frozen=True)
class DeformationField:
    """Deformed state of the manipulator at one instant.

    The displacement is built in two steps. First the faces move along
    ``z``: inflation bumps over each chamber footprint and a finger dent at
    the contact point. This gives the *pre-bend* shape. Then the body bends
    about an ``x``-parallel hinge zone through the contact row: the part
    below the zone stays put, the zone follows a circular arc and the part
    beyond it rotates rigidly.
    """

    geom: ManipulatorGeometry
    inflation: InflationState
    touch: TouchSpec
    t: float
    force: float
    amplitudes: tuple[float, float, float]  # outward bump amplitude per face, per chamber (mm)
    dent_depth: float
    bend_angle: float  # signed, radians; positive turns +y toward +z
    hinge_start: float
    hinge_zone: float

    # ----- pre-bend face shape -------------------------------------------
    def face_z(self, x, y, face: Face) -> np.ndarray:
        """Pre-bend ``z`` of the face surface above rest point ``(x, y)``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        sign = self.geom.face_sign(face)
        taper = self.geom.mechanics.bump_taper
        dz = np.zeros(np.broadcast(x, y).shape)
        for amp, rect in zip(self.amplitudes, self.geom.chamber_rects):
            if amp:
                dz = dz + amp * _bump_profile(x, y, rect, taper)
        if self.dent_depth and self.touch.face == face:
            cx, cy = self.contact_xy
            rho = np.hypot(x - cx, y - cy)
            r = self.touch.contact_radius
            dent = np.where(rho < r, 0.5 * self.dent_depth * (1.0 + np.cos(np.pi * rho / r)), 0.0)
            dz = dz - dent
        return sign * (self.geom.thickness / 2 + dz)

    def face_displacement(self, x, y, face: Face) -> np.ndarray:
        """Outward normal displacement (mm) of the face before bending."""
        return self.geom.face_sign(face) * self.face_z(x, y, face) - self.geom.thickness / 2

    @property
    def contact_xy(self) -> tuple[float, float]:
        xy = self.geom.skin_to_world(self.touch.contact_center)
        return float(xy[0]), float(xy[1])

    def contact_point(self) -> np.ndarray:
        """Pre-bend 3-D position of the contact centre on the (dented) face."""
        cx, cy = self.contact_xy
        return np.array([cx, cy, float(self.face_z(cx, cy, self.touch.face))])

    def surface_points(self, xy, face: Face) -> np.ndarray:
        """World positions of rest face points ``xy`` (N, 2)."""
        xy = np.asarray(xy, dtype=float)
        z = self.face_z(xy[..., 0], xy[..., 1], face)
        return self.bend(np.concatenate([xy, z[..., None]], axis=-1))

    # ----- bending ----------------------------------------------------------
    @property
    def curvature(self) -> float:
        return self.bend_angle / self.hinge_zone

    def bend(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.bend_angle == 0.0:
            return pts.copy()
        k = self.curvature
        ell = self.hinge_zone
        th = self.bend_angle
        y, z = pts[..., 1], pts[..., 2]
        u = y - self.hinge_start
        uc = np.clip(u, 0.0, ell)
        phi = k * uc
        cy = self.hinge_start + np.sin(phi) / k
        cz = (1.0 - np.cos(phi)) / k
        beyond = np.maximum(u - ell, 0.0)
        ny, nz = -np.sin(phi), np.cos(phi)
        ty, tz = np.cos(th), np.sin(th)
        new_y = np.where(u <= 0, y, cy + z * ny + beyond * ty)
        new_z = np.where(u <= 0, z, cz + z * nz + beyond * tz)
        out = pts.copy()
        out[..., 1] = new_y
        out[..., 2] = new_z
        return out

    def unbend(self, pts) -> np.ndarray:
        """Inverse of :meth:`bend` for points within the body's reach."""
        pts = np.asarray(pts, dtype=float)
        if self.bend_angle == 0.0:
            return pts.copy()
        k = self.curvature
        ell = self.hinge_zone
        th = self.bend_angle
        y, z = pts[..., 1], pts[..., 2]
        ys = self.hinge_start
        # rigid part
        c_end_y = ys + math.sin(th) / k
        c_end_z = (1.0 - math.cos(th)) / k
        qy, qz = y - c_end_y, z - c_end_z
        u_rigid = ell + qy * math.cos(th) + qz * math.sin(th)
        z_rigid = -qy * math.sin(th) + qz * math.cos(th)
        # arc part, polar about the centre of curvature
        sgn = 1.0 if k > 0 else -1.0
        dy, dz = y - ys, z - 1.0 / k
        phi = np.arctan2(sgn * dy, -sgn * dz)
        z_arc = 1.0 / k - sgn * np.hypot(dy, dz)
        u_arc = phi / k
        out = pts.copy()
        base = y <= ys
        rigid = ~base & (u_rigid >= ell)
        arc = ~base & ~rigid
        out[..., 1] = np.where(base, y, np.where(rigid, ys + u_rigid, ys + u_arc))
        out[..., 2] = np.where(base, z, np.where(rigid, z_rigid, z_arc))
        return out

    # ----- derived quantities -----------------------------------------------
    @property
    def marker_positions(self) -> np.ndarray:
        return self.bend(self.geom.marker_rest_positions)

    def electrode_paths(self, step: float = 0.5) -> list[np.ndarray]:
        """Displaced wire centrelines, one (n, 3) polyline per electrode."""
        return [self.surface_points(w.centerline(step), w.face) for w in self.geom.wires]

    def inside_body(self, pts) -> np.ndarray:
        """Boolean mask of world points inside the deformed body."""
        q = self.unbend(pts)
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        c = self.geom.config
        inside = (np.abs(x) <= c.body_width / 2) & (y >= 0.0) & (y <= c.body_length)
        zf = self.face_z(x, y, "front")
        zb = self.face_z(x, y, "back")
        inside &= (z <= zf) & (z >= zb)
        # chamber air: a slab of rest depth V0 / footprint whose walls ride the bumps
        half = self.geom.chamber_depth / 2
        taper = self.geom.mechanics.bump_taper
        for amp, rect in zip(self.amplitudes, self.geom.chamber_rects):
            x0, x1, y0, y1 = rect
            over = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
            lim = half + amp * _bump_profile(x, y, rect, taper)
            inside &= ~(over & (np.abs(z) < lim))
        return inside

    def bounding_box(self, step: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
        """World-frame axis-aligned box (lo, hi) around the deformed body."""
        c = self.geom.config
        xs = np.arange(-c.body_width / 2, c.body_width / 2 + 1e-9, step)
        ys = np.arange(0.0, c.body_length + 1e-9, step)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        xy = np.stack([X.ravel(), Y.ravel()], axis=-1)
        pts = np.concatenate([self.surface_points(xy, "front"), self.surface_points(xy, "back")])
        return pts.min(axis=0), pts.max(axis=0)


def expanded_volume(injected_ml: float, geom: ManipulatorGeometry) -> float:
    """Chamber volume gain (ml) after injecting ``injected_ml`` of ambient air.

    The injected air is compressed isothermally into the chamber, whose walls
    respond linearly to gauge pressure: ``P_abs (V0 + dV) = P_atm (V0 + V_in)``
    with ``P_abs = P_atm + dV / compliance``.
    """
    if injected_ml == 0.0:
        return 0.0
    m = geom.mechanics
    kappa = m.compliance_ml_per_kpa
    if math.isinf(kappa):
        return float(injected_ml)
    pa, v0 = m.atmospheric_kpa, m.chamber_volume_ml
    # dV^2 / kappa + dV (Pa + V0 / kappa) - Pa V_in = 0, positive root
    a = 1.0 / kappa
    b = pa + v0 / kappa
    c = -pa * injected_ml
    return float((-b + math.sqrt(b * b - 4 * a * c)) / (2 * a))


def bump_amplitude(volume_ml: float, geom: ManipulatorGeometry) -> float:
    """Per-face bump amplitude (mm) for ``volume_ml`` of injected air.

    The chamber's volume gain is shared equally by the front and back bumps.
    """
    c = geom.config
    unit = _bump_unit_integral(c.chamber_width, c.chamber_length, geom.mechanics.bump_taper)
    return (expanded_volume(volume_ml, geom) * 1000.0 / 2.0) / unit


def bump_volume(amplitude: float, geom: ManipulatorGeometry, chamber: int = 0, n: int = 400) -> float:
    """Midpoint-rule volume (ml) under one face's bump over one chamber footprint."""
    rect = geom.chamber_rects[chamber]
    x0, x1, y0, y1 = rect
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    prof = _bump_profile(X, Y, rect, geom.mechanics.bump_taper)
    return float(amplitude * prof.sum() * (x1 - x0) * (y1 - y0) / n**2 / 1000.0)


def validate_touch(touch: TouchSpec, geom: ManipulatorGeometry) -> None:
    if not touch.touched:
        return
    face, (u0, u1, v0, v1) = geom.subregion_rect(touch.subregion_index)
    u, v = touch.contact_center
    if subregion_of((u, v), face, geom) != touch.subregion_index or not (u0 <= u <= u1 and v0 <= v <= v1):
        raise ValueError(
            f"contact centre ({u}, {v}) lies outside sub-region {touch.subregion_index}"
        )


def deform(
    geom: ManipulatorGeometry,
    p: InflationState,
    touch: TouchSpec = NO_TOUCH,
    t: float = 0.0,
) -> DeformationField:
    """Deformed manipulator for inflation ``p`` and ``touch`` at time ``t`` (s)."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if not isinstance(p, InflationState):
        p = InflationState(tuple(p))
    validate_touch(touch, geom)
    mech = geom.mechanics
    force = touch.force(t)
    if force < 0:
        raise ValueError("contact force must be non-negative")
    amps = tuple(bump_amplitude(v, geom) for v in p.p)
    dent = mech.stiffness_mm_per_n * force if touch.touched else 0.0
    angle = 0.0
    hinge_start = 0.0
    if touch.touched and force > 0:
        # a push bends the distal part away from the touched face
        angle = -geom.face_sign(touch.face) * math.radians(mech.bend_deg_per_n * force)
        _, cy = geom.skin_to_world(touch.contact_center)
        hinge_start = max(0.0, float(cy) - mech.hinge_zone / 2)
    return DeformationField(
        geom=geom,
        inflation=p,
        touch=touch,
        t=float(t),
        force=float(force),
        amplitudes=amps,
        dent_depth=float(dent),
        bend_angle=float(angle),
        hinge_start=hinge_start,
        hinge_zone=mech.hinge_zone,
    )
