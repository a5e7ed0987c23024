"""Fast quasi-analytic capacitance model used for bulk dataset generation.

Each wire (and its interface pad) is cut into short straight segments. The
coupling of two electrodes is the discrete double sum

    C_ab = s_ab * eps0 * sum_{i in a, j in b} eps_ij * (l_i l_j)^a * exp(-r_ij / lam) / r_ij,
    r_ij = sqrt(d_ij^2 + w^2)

over their segment pairs, where ``l`` are displaced segment lengths, ``d`` the
midpoint distance, ``w`` the wire width and ``eps_ij`` the effective relative
permittivity of the gap. The screening factor stands in for the grounded
neighbours that soak up long-range flux; the length exponent ``a`` is below 1
for same-face pairs, whose coupling grows sub-linearly with stretch (both
fitted against FD frames of inflated states). Same-face gaps see half body, half air (fringing
above a dielectric half-space); cross-face gaps see the body slab and the
inflated chamber air in series. A finger raises ``eps_ij`` for segments and
gap midpoints inside its contact radius. The per-pair scale ``s_ab`` is fitted
once so that the reference state reproduces the finite-difference backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from eskin.config import FieldsConfig
from eskin.geometry import DeformationField, ManipulatorGeometry, TouchSpec
from eskin.sensing import N_PAIRS, CapacitanceFrame, pair_index

EPS0_FF_PER_MM = 8.854187817  # vacuum permittivity in fF/mm


@dataclass(frozen=True)
class _Segments:
    ends0: np.ndarray  # (n, 2) rest (x, y) of segment start
    ends1: np.ndarray  # (n, 2) rest (x, y) of segment end
    electrode: np.ndarray  # (n,) 1..8
    face_sign: np.ndarray  # (n,) +1 front, -1 back
    width: np.ndarray  # (n,) mm


def _build_segments(geom: ManipulatorGeometry, seg_len: float) -> _Segments:
    e0, e1, el, fs, wd = [], [], [], [], []
    for w in geom.wires:
        n = max(1, int(math.ceil(w.length / seg_len)))
        ys = w.y_start + w.direction * np.linspace(0.0, w.length, n + 1)
        for a, b in zip(ys[:-1], ys[1:]):
            e0.append((w.x, a))
            e1.append((w.x, b))
            el.append(w.electrode)
            wd.append(w.width)
        # interface pad as three parallel strips
        x0, x1, y0, y1 = w.pad_rect()
        strip = (x1 - x0) / 3
        for k in range(3):
            xs = x0 + (k + 0.5) * strip
            e0.append((xs, y0))
            e1.append((xs, y1))
            el.append(w.electrode)
            wd.append(strip)
        fs.extend([geom.face_sign(w.face)] * (n + 3))
    return _Segments(
        np.array(e0, float), np.array(e1, float), np.array(el), np.array(fs, float), np.array(wd, float)
    )


class LumpedModel:
    """Segment-pair capacitance surrogate for one manipulator geometry."""

    def __init__(self, geom: ManipulatorGeometry, config: FieldsConfig | None = None, scale=None):
        self.geom = geom
        self.config = config or FieldsConfig()
        seg = _build_segments(geom, self.config.segment_length)
        self.segments = seg
        ii, jj = np.triu_indices(len(seg.electrode), k=1)
        keep = seg.electrode[ii] != seg.electrode[jj]
        ii, jj = ii[keep], jj[keep]
        # order each pair so the lower electrode comes first
        swap = seg.electrode[ii] > seg.electrode[jj]
        ii, jj = np.where(swap, jj, ii), np.where(swap, ii, jj)
        self.ii, self.jj = ii, jj
        self.channel = np.array(
            [pair_index(int(a), int(b)) for a, b in zip(seg.electrode[ii], seg.electrode[jj])]
        )
        self.same_face = seg.face_sign[ii] == seg.face_sign[jj]
        self.reg2 = ((seg.width[ii] + seg.width[jj]) / 2) ** 2
        self.scale = np.ones(N_PAIRS) if scale is None else np.asarray(scale, float)
        self.exponent = np.where(
            self.same_face, self.config.same_face_length_exponent, self.config.cross_face_length_exponent
        )

    # -------------------------------------------------------------------
    def unscaled(self, state: DeformationField) -> np.ndarray:
        """Per-channel coupling (fF) before the per-pair calibration scale."""
        seg = self.segments
        cfg = self.config
        fronts = seg.face_sign > 0
        # pre-bend end points
        z0 = np.where(
            fronts,
            state.face_z(seg.ends0[:, 0], seg.ends0[:, 1], "front"),
            state.face_z(seg.ends0[:, 0], seg.ends0[:, 1], "back"),
        )
        z1 = np.where(
            fronts,
            state.face_z(seg.ends1[:, 0], seg.ends1[:, 1], "front"),
            state.face_z(seg.ends1[:, 0], seg.ends1[:, 1], "back"),
        )
        p0 = np.column_stack([seg.ends0, z0])
        p1 = np.column_stack([seg.ends1, z1])
        # straight-chord lengths underestimate arcs over the bumps; add the midpoint
        zm_rest = (seg.ends0 + seg.ends1) / 2
        zm = np.where(
            fronts,
            state.face_z(zm_rest[:, 0], zm_rest[:, 1], "front"),
            state.face_z(zm_rest[:, 0], zm_rest[:, 1], "back"),
        )
        pm = np.column_stack([zm_rest, zm])
        w0, wm, w1 = state.bend(p0), state.bend(pm), state.bend(p1)
        length = np.linalg.norm(wm - w0, axis=1) + np.linalg.norm(w1 - wm, axis=1)

        ii, jj = self.ii, self.jj
        r = np.sqrt(np.sum((wm[ii] - wm[jj]) ** 2, axis=1) + self.reg2)
        kernel = (length[ii] * length[jj]) ** self.exponent * np.exp(-r / cfg.screening_length) / r

        eps = self._gap_permittivity(state, pm)
        vals = np.bincount(self.channel, weights=eps * kernel, minlength=N_PAIRS)
        return EPS0_FF_PER_MM * vals

    def _gap_permittivity(self, state: DeformationField, pm: np.ndarray) -> np.ndarray:
        cfg = self.config
        eb = cfg.body_permittivity
        ii, jj = self.ii, self.jj
        T = self.geom.thickness
        dz = np.abs(pm[ii, 2] - pm[jj, 2])
        frac = np.minimum(1.0, T / np.maximum(dz, 1e-9))
        cross = 1.0 / (frac / eb + (1.0 - frac))
        eps = np.where(self.same_face, 0.5 * (1.0 + eb), cross)
        touch = state.touch
        if touch.touched:
            c = state.contact_point()
            r = touch.contact_radius * cfg.finger_reach
            w_seg = _finger_weight(np.linalg.norm(pm - c, axis=1), r)
            mid = (pm[ii] + pm[jj]) / 2
            w_mid = np.where(self.same_face, _finger_weight(np.linalg.norm(mid - c, axis=1), r), 0.0)
            g = np.maximum(np.maximum(w_seg[ii], w_seg[jj]), w_mid)
            beta = np.where(self.same_face, cfg.same_face_finger_coupling, cfg.cross_face_finger_coupling)
            eps = eps + (touch.finger_rel_permittivity - 1.0) * beta * g
        return eps

    def frame(self, state: DeformationField) -> CapacitanceFrame:
        return CapacitanceFrame(self.scale * self.unscaled(state), timestamp=state.t, kind="raw")


def _finger_weight(rho, r):
    s = np.clip(1.0 - (rho / r) ** 2, 0.0, None)
    return s * s


def lumped_frame(state: DeformationField, touch: TouchSpec | None = None, model: LumpedModel | None = None):
    """Raw capacitance frame (fF) of a deformed state from the lumped model.

    ``touch`` defaults to the touch the state was deformed with.
    """
    if touch is not None and touch is not state.touch:
        from dataclasses import replace

        state = replace(state, touch=touch)
    model = model or default_lumped_model(state.geom)
    return model.frame(state)


_MODELS: dict = {}


def default_lumped_model(geom: ManipulatorGeometry, config: FieldsConfig | None = None) -> LumpedModel:
    """Lumped model with per-pair scales fitted to the FD backend (cached)."""
    config = config or FieldsConfig()
    key = (geom, config)
    if key not in _MODELS:
        from eskin.fields.fd import reference_frame_fd

        model = LumpedModel(geom, config)
        from eskin.geometry import NO_TOUCH, InflationState, deform

        ref_state = deform(geom, InflationState(), NO_TOUCH, 0.0)
        fd = reference_frame_fd(geom, config)
        model.scale = fd / model.unscaled(ref_state)
        _MODELS[key] = model
    return _MODELS[key]
