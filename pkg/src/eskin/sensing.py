"""Measurement chain: electrode-pair indexing, calibration and readout noise."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Literal

import numpy as np

from eskin.geometry import N_ELECTRODES

PAIRS: tuple[tuple[int, int], ...] = tuple(combinations(range(1, N_ELECTRODES + 1), 2))
N_PAIRS = len(PAIRS)

Kind = Literal["raw", "calibrated"]


def pair_index(i: int, j: int) -> int:
    """Flat lexicographic index of electrode pair ``(i, j)`` with ``1 <= i < j <= 8``."""
    if not (1 <= i < j <= N_ELECTRODES):
        raise ValueError(f"invalid electrode pair ({i}, {j}); need 1 <= i < j <= {N_ELECTRODES}")
    # pairs starting below i, then the offset inside row i
    before = sum(N_ELECTRODES - a for a in range(1, i))
    return before + (j - i - 1)


def pair_from_index(k: int) -> tuple[int, int]:
    if not 0 <= k < N_PAIRS:
        raise ValueError(f"pair index must be in 0..{N_PAIRS - 1}, got {k}")
    return PAIRS[k]


def same_face_mask() -> np.ndarray:
    """True for channels whose two electrodes sit on the same face."""
    return np.array([(i - 1) // 4 == (j - 1) // 4 for i, j in PAIRS])


@dataclass(frozen=True)
class CapacitanceFrame:
    """28 channel values in canonical pair order.

    Raw frames are in fF; calibrated frames are dimensionless relative changes.
    """

    values: np.ndarray
    timestamp: float = 0.0
    kind: Kind = "raw"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (N_PAIRS,):
            raise ValueError(f"a capacitance frame holds exactly {N_PAIRS} values, got shape {v.shape}")
        if self.kind not in ("raw", "calibrated"):
            raise ValueError(f"unknown frame kind {self.kind!r}")
        if self.kind == "raw" and np.any(v <= 0):
            raise ValueError("raw capacitances must be positive")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return N_PAIRS


def calibrate(c_t: CapacitanceFrame, c_0: CapacitanceFrame) -> CapacitanceFrame:
    """Relative change of ``c_t`` against the reference readout ``c_0``."""
    if c_t.kind != "raw" or c_0.kind != "raw":
        raise ValueError("calibrate expects raw frames")
    return CapacitanceFrame(
        calibrate_array(c_t.values, c_0.values), timestamp=c_t.timestamp, kind="calibrated"
    )


def calibrate_array(c_t, c_0) -> np.ndarray:
    """Vectorised calibration; ``c_0`` broadcasts against ``c_t``."""
    c_t = np.asarray(c_t, dtype=float)
    c_0 = np.asarray(c_0, dtype=float)
    if c_t.shape[-1] != c_0.shape[-1]:
        raise ValueError(f"length mismatch: {c_t.shape[-1]} vs {c_0.shape[-1]}")
    if np.any(c_0 <= 0):
        raise ValueError("reference capacitances must be positive")
    return (c_t - c_0) / c_0


@dataclass(frozen=True)
class NoiseModel:
    quantization_step: float = 1.0  # fF
    snr_db: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.quantization_step <= 0:
            raise ValueError("quantization step must be positive")
        if self.snr_db <= 0:
            raise ValueError("SNR must be positive")

    @property
    def relative_std(self) -> float:
        return 10.0 ** (-self.snr_db / 20.0)

    def channel_std(self, values) -> np.ndarray:
        """Total per-channel std (fF): Gaussian part plus uniform quantisation error."""
        v = np.asarray(values, dtype=float)
        return np.sqrt((v * self.relative_std) ** 2 + self.quantization_step**2 / 12.0)


def apply_noise_array(values, model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at the model's SNR, then quantise (any shape, fF)."""
    v = np.asarray(values, dtype=float)
    noisy = v + rng.standard_normal(v.shape) * v * model.relative_std
    q = model.quantization_step
    noisy = np.round(noisy / q) * q
    # a readout never drops to zero: keep at least one quantisation step
    return np.maximum(noisy, q)


def apply_noise(
    frame: CapacitanceFrame, model: NoiseModel, rng: np.random.Generator | None = None
) -> CapacitanceFrame:
    """Noisy readout of a raw frame; without ``rng`` the draw comes from ``model.seed``."""
    if frame.kind != "raw":
        raise ValueError("noise is applied to raw frames")
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    noisy = apply_noise_array(frame.values, model, rng)
    return CapacitanceFrame(noisy, timestamp=frame.timestamp, kind="raw")
