"""Run configuration: one INI-style key/value file, with defaults embedded.

The file has one section per subsystem. Every key is optional; missing keys
keep the defaults below. Lists are comma separated. Example::

    [deformation]
    peak_force = 3.0
    bend_deg_per_n = 1.5

    [fields]
    backend = fd
    spacing = 2.0

The environment variable ``ESKIN_CONFIG`` names a default config file for the
command line tool.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

ENV_CONFIG = "ESKIN_CONFIG"


@dataclass(frozen=True)
class GeometryConfig:
    body_width: float = 50.0
    body_length: float = 120.0
    body_thickness: float = 30.0
    skin_width: float = 40.0
    skin_length: float = 110.0
    chamber_width: float = 40.0
    chamber_length: float = 30.0
    chamber_starts: tuple[float, ...] = (10.0, 45.0, 80.0)
    inlet_width: float = 1.5
    wire_width: float = 1.0
    interface_size: float = 5.0
    # one entry per wire on a face, ordered as electrodes 1..4 (front) / 5..8 (back)
    wire_lengths: tuple[float, ...] = (20.0, 45.0, 70.0, 95.0)
    wire_x: tuple[float, ...] = (-5.0, 5.0, 15.0, -15.0)
    wire_from_top: tuple[int, ...] = (0, 1, 0, 0)
    wire_end_gap: float = 5.0
    back_mirrored: bool = False
    marker_x: float = 25.0
    marker_ys: tuple[float, ...] = (10.0, 35.0, 60.0, 85.0, 110.0)


@dataclass(frozen=True)
class DeformationConfig:
    stiffness_mm_per_n: float = 1.0
    contact_radius: float = 8.0
    bend_deg_per_n: float = 2.0
    hinge_zone: float = 10.0
    bump_taper: float = 5.0
    finger_permittivity: float = 35.0
    peak_force: float = 2.5
    chamber_volume_ml: float = 24.0
    # finite values compress the injected air against a linear wall compliance;
    # inf keeps "face bulge volume = injected volume"
    compliance_ml_per_kpa: float = float("inf")
    atmospheric_kpa: float = 101.325


@dataclass(frozen=True)
class FieldsConfig:
    backend: str = "lumped"
    spacing: float = 2.0
    body_permittivity: float = 2.5
    tol: float = 1e-8
    max_iter: int = 20000
    margin_voxels: int = 2
    segment_length: float = 2.5
    same_face_finger_coupling: float = 0.5
    cross_face_finger_coupling: float = 0.15
    finger_reach: float = 1.5  # lumped finger support, in contact radii
    screening_length: float = 20.0  # mm
    same_face_length_exponent: float = 0.5
    cross_face_length_exponent: float = 1.0


@dataclass(frozen=True)
class SensingConfig:
    snr_db: float = 60.0
    quantization_ff: float = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 30.0
    fps: float = 30.0
    ramp_s: float = 10.0
    onset_s: float = 1.0
    inflation_levels: tuple[float, ...] = (0.0, 10.0, 20.0)
    touches_per_face: int = 3
    touch_splits: tuple[int, ...] = (125, 32, 32)
    tracking_groups: int = 146
    tracking_splits: tuple[int, ...] = (108, 18, 20)
    subregion_margin: float = 5.0
    max_delay_frames: int = 3
    keyframe_stride_lumped: int = 1
    keyframe_stride_fd: int = 10
    coverage_retries: int = 100


@dataclass(frozen=True)
class TouchModelConfig:
    hidden: int = 128
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 1.2
    decay_every: int = 15


@dataclass(frozen=True)
class TrackModelConfig:
    window: int = 10
    width: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_width: int = 128
    embed_hidden: int = 32
    dropout: float = 0.1
    epochs: int = 150
    batch_size: int = 255
    micro_batch: int = 51
    lr: float = 1e-3
    lr_decay: float = 1.2
    decay_every: int = 15
    windows_per_group: int = 32
    val_windows_per_group: int = 30
    translation_augment: bool = True
    augment_scale: float = 20.0


@dataclass(frozen=True)
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    fields: FieldsConfig = field(default_factory=FieldsConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    touch_model: TouchModelConfig = field(default_factory=TouchModelConfig)
    track_model: TrackModelConfig = field(default_factory=TrackModelConfig)

    def replace(self, section: str, **changes: Any) -> "Config":
        """Return a copy with keys of one section replaced."""
        sub = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: sub})

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in fields(self):
            sub = getattr(self, f.name)
            parser[f.name] = {k.name: _format(getattr(sub, k.name)) for k in fields(sub)}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in parser[name].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "Config":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            sub = getattr(cfg, section)
            types = {f.name: f for f in fields(sub)}
            changes = {}
            for key, raw in parser[section].items():
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                default = getattr(sub, key)
                try:
                    changes[key] = _parse(raw, default)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            cfg = cfg.replace(section, **changes)
        return cfg


class ConfigError(ValueError):
    pass


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Load a config file; ``None`` falls back to $ESKIN_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return Config()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return Config.from_ini(p.read_text())


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return tuple(elem(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
