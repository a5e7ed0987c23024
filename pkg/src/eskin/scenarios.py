"""Two-stage experiment replay: touch and tracking datasets, with persistence.

Stage 1 inflates the manipulator without contact; stage 2 touches one
sub-region under steady inflation while the contact force varies. Every group
owns an RNG stream derived from ``(seed, group_id)``, so groups can be built
in any order or in parallel and still come out bit-identical.

On disk a dataset is a directory holding ``manifest.json`` and one
``groups/<id>.jsonl`` file per group with one JSON record per frame.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from eskin.config import Config
from eskin.geometry import (
    N_MARKERS,
    NO_TOUCH,
    InflationState,
    ManipulatorGeometry,
    TouchSpec,
    deform,
)
from eskin.sensing import N_PAIRS, PAIRS, NoiseModel, apply_noise_array, calibrate_array

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GROUPS_PER_STATE = 7
SPLITS = ("train", "val", "test")

_ASSIGN_STREAM = 0xA551
_SPLIT_STREAM = 0x5B1
_TRACK_STREAM = 0x7AC


class DatasetError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# force profile
# --------------------------------------------------------------------------
@dataclass(eq=False)
class ForceProfile:
    """Sampled contact force (N) at the frame times, linearly interpolated."""

    samples: np.ndarray
    fps: float

    def __call__(self, t: float) -> float:
        n = len(self.samples)
        x = t * self.fps
        if x <= 0:
            return float(self.samples[0])
        if x >= n - 1:
            return float(self.samples[-1])
        i = int(x)
        w = x - i
        return float((1 - w) * self.samples[i] + w * self.samples[i + 1])


def synthesize_force_profile(
    seed: int,
    duration: float,
    fps: float,
    peak_force: float = 2.5,
    onset_s: float = 1.0,
) -> ForceProfile:
    """Smooth non-negative force: three seeded sinusoids through a softplus,
    faded in from zero over ``onset_s`` and rescaled to ``peak_force``."""
    if duration <= 0 or fps <= 0:
        raise ValueError("duration and fps must be positive")
    rng = np.random.default_rng(seed)
    periods = rng.uniform(3.0, 15.0, 3)
    phases = rng.uniform(0.0, 2 * np.pi, 3)
    amps = rng.uniform(0.5, 1.0, 3)
    t = np.arange(int(round(duration * fps))) / fps
    s = (amps[:, None] * np.sin(2 * np.pi * t[None] / periods[:, None] + phases[:, None])).sum(0)
    rect = np.logaddexp(0.0, 2.0 * s) / 2.0
    x = np.clip(t / onset_s, 0.0, 1.0) if onset_s > 0 else np.ones_like(t)
    force = rect * x * x * (3 - 2 * x)
    force *= peak_force / force.max()
    return ForceProfile(force, fps)


# --------------------------------------------------------------------------
# group specifications
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    inflation: tuple[float, float, float]
    label: int
    contact_center: tuple[float, float] = (0.0, 0.0)
    force_seed: int = 0
    delay_frames: int = 0

    @property
    def touched(self) -> bool:
        return self.label != 0


@dataclass
class ExperimentGroup:
    """One recorded group; frame arrays share their first axis."""

    spec: GroupSpec
    t: np.ndarray  # (n,)
    inflation: np.ndarray  # (n, 3)
    cap_raw: np.ndarray  # (n, 28) fF
    cap_cal: np.ndarray  # (n, 28)
    markers: np.ndarray  # (n, 5, 3) mm
    reference: np.ndarray  # (28,) raw reference used for calibration
    prior_markers: np.ndarray | None = None  # (5, 3), tracking only

    @property
    def group_id(self) -> int:
        return self.spec.group_id

    @property
    def label(self) -> int:
        return self.spec.label

    @property
    def n_frames(self) -> int:
        return len(self.t)


@dataclass
class Dataset:
    manifest: dict
    groups: dict[int, ExperimentGroup] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    def split_ids(self, split: str) -> list[int]:
        return list(self.manifest["splits"][split])

    def split_groups(self, split: str) -> list[ExperimentGroup]:
        return [self.groups[i] for i in self.split_ids(split)]

    def frame_count(self, split: str | None = None) -> int:
        ids = self.groups if split is None else self.split_ids(split)
        return sum(self.groups[i].n_frames for i in ids)


def inflation_states(levels: Iterable[float]) -> list[tuple[float, float, float]]:
    return [tuple(float(v) for v in p) for p in itertools.product(tuple(levels), repeat=3)]


def group_rng(seed: int, group_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, group_id]))


def assign_subregions(n_states: int, per_face: int, seed: int, retries: int) -> list[list[int]]:
    """Touched sub-regions per inflation state (``per_face`` front, then back),
    redrawn until every index 1..18 appears at least once."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ASSIGN_STREAM]))
    for _ in range(retries):
        out = []
        for _ in range(n_states):
            front = sorted(int(v) + 1 for v in rng.choice(9, per_face, replace=False))
            back = sorted(int(v) + 10 for v in rng.choice(9, per_face, replace=False))
            out.append(front + back)
        if set(itertools.chain.from_iterable(out)) == set(range(1, 19)):
            return out
    raise DatasetError(f"could not cover all 18 sub-regions within {retries} draws")


def touch_group_specs(config: Config, seed: int) -> list[GroupSpec]:
    """The full touch protocol: per state one no-touch group then the touched ones."""
    sc = config.scenarios
    geom = ManipulatorGeometry(config.geometry, config.deformation)
    states = inflation_states(sc.inflation_levels)
    per_state = 1 + 2 * sc.touches_per_face
    assignment = assign_subregions(len(states), sc.touches_per_face, seed, sc.coverage_retries)
    specs = []
    for s, p in enumerate(states):
        for j, label in enumerate([0] + assignment[s]):
            gid = s * per_state + j
            rng = group_rng(seed, gid)
            center = (0.0, 0.0)
            if label:
                _, (u0, u1, v0, v1) = geom.subregion_rect(label)
                m = sc.subregion_margin
                center = (float(rng.uniform(u0 + m, u1 - m)), float(rng.uniform(v0 + m, v1 - m)))
            force_seed = int(rng.integers(2**31))
            delay = int(rng.integers(0, sc.max_delay_frames + 1))
            specs.append(GroupSpec(gid, p, label, center, force_seed, delay))
    return specs


def split_ids(ids: list[int], counts: tuple[int, ...], seed: int, stream: int) -> dict[str, list[int]]:
    if sum(counts) != len(ids):
        raise DatasetError(f"split sizes {counts} do not add up to {len(ids)} groups")
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
    order = [ids[i] for i in rng.permutation(len(ids))]
    out, k = {}, 0
    for name, n in zip(SPLITS, counts):
        out[name] = sorted(order[k : k + n])
        k += n
    return out


# --------------------------------------------------------------------------
# physics per group
# --------------------------------------------------------------------------
class Simulator:
    """Raw capacitance of deformed states through the configured backend."""

    def __init__(self, config: Config):
        self.config = config
        self.geom = ManipulatorGeometry(config.geometry, config.deformation)
        self.backend = config.fields.backend
        if self.backend == "lumped":
            from eskin.fields.lumped import default_lumped_model

            self.model = default_lumped_model(self.geom, config.fields)
        elif self.backend == "fd":
            self.model = None
        else:
            raise ValueError(f"unknown field backend {self.backend!r}")

    @property
    def keyframe_stride(self) -> int:
        sc = self.config.scenarios
        return sc.keyframe_stride_lumped if self.backend == "lumped" else sc.keyframe_stride_fd

    def raw(self, state, warm_cache: dict | None = None) -> np.ndarray:
        if self.backend == "lumped":
            return self.model.frame(state).values
        from eskin.fields.fd import domain_box, fd_frame

        box = domain_box(self.geom, self.config.fields)
        return fd_frame(state, self.config.fields, warm_cache, box).values

    def rest_frame(self) -> np.ndarray:
        return self.raw(deform(self.geom, InflationState(), NO_TOUCH, 0.0))

    def touch_for(self, spec: GroupSpec) -> TouchSpec:
        if not spec.touched:
            return NO_TOUCH
        sc = self.config.scenarios
        mech = self.config.deformation
        profile = synthesize_force_profile(spec.force_seed, sc.duration, sc.fps, mech.peak_force, sc.onset_s)
        return TouchSpec(
            spec.label,
            spec.contact_center,
            mech.contact_radius,
            profile,
            mech.finger_permittivity,
        )

    def trajectory(self, spec: GroupSpec):
        """Noise-free raw frames, inflation and true markers of one group."""
        sc = self.config.scenarios
        n = int(round(sc.duration * sc.fps))
        t = np.arange(n) / sc.fps
        p = np.array(spec.inflation)
        if spec.touched:
            ramp = np.ones(n)
        else:
            ramp = np.clip(t / sc.ramp_s, 0.0, 1.0) if sc.ramp_s > 0 else np.ones(n)
        inflation = ramp[:, None] * p[None]
        touch = self.touch_for(spec)
        states = [deform(self.geom, InflationState(tuple(inflation[i])), touch, float(t[i])) for i in range(n)]
        stride = max(1, self.keyframe_stride)
        keys = sorted(set(range(0, n, stride)) | {n - 1})
        warm: dict = {}
        raw_keys = np.stack([self.raw(states[i], warm) for i in keys])
        if len(keys) == n:
            raw = raw_keys
        else:
            raw = np.stack([np.interp(np.arange(n), keys, raw_keys[:, c]) for c in range(N_PAIRS)], axis=1)
        markers = np.stack([s.marker_positions for s in states])
        return t, inflation, raw, markers


def _noise_model(config: Config) -> NoiseModel:
    return NoiseModel(config.sensing.quantization_ff, config.sensing.snr_db)


def build_group(sim: Simulator, spec: GroupSpec, seed: int, kind: str, rest: np.ndarray) -> ExperimentGroup:
    """Simulate, add readout noise, delay the marker stream and calibrate.

    Touch groups are calibrated against a noisy readout of the rest state;
    tracking groups against their own first frame.
    """
    t, inflation, clean, true_markers = sim.trajectory(spec)
    # the spec draws come from group_rng(seed, id); noise gets a sibling stream
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.group_id, 1]))
    noise = _noise_model(sim.config)
    ref_reading = apply_noise_array(rest, noise, rng)
    raw = apply_noise_array(clean, noise, rng)
    d = spec.delay_frames
    idx = np.maximum(np.arange(len(t)) - d, 0)
    markers = true_markers[idx]
    if kind == "touch":
        reference = ref_reading
        prior = None
    else:
        reference = raw[0].copy()
        prior = markers[0].copy()
    cal = calibrate_array(raw, reference)
    return ExperimentGroup(spec, t, inflation, raw, cal, markers, reference, prior)


_WORKER: dict = {}


def _worker_init(config_ini: str, lumped_scale):
    config = Config.from_ini(config_ini)
    sim = Simulator.__new__(Simulator)
    sim.config = config
    sim.geom = ManipulatorGeometry(config.geometry, config.deformation)
    sim.backend = config.fields.backend
    sim.model = None
    if sim.backend == "lumped":
        from eskin.fields.lumped import LumpedModel

        sim.model = LumpedModel(sim.geom, config.fields, lumped_scale)
    _WORKER["sim"] = sim


def _worker_build(args):
    spec, seed, kind, rest = args
    return build_group(_WORKER["sim"], spec, seed, kind, rest)


def _build_all(config: Config, specs, seed, kind, workers: int) -> dict[int, ExperimentGroup]:
    sim = Simulator(config)
    rest = sim.rest_frame()
    jobs = [(s, seed, kind, rest) for s in specs]
    workers = max(1, int(workers or 1))
    if workers == 1 or len(jobs) == 1:
        return {s.group_id: build_group(sim, s, seed, kind, rest) for s in specs}
    scale = sim.model.scale if sim.model is not None else None
    with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(config.to_ini(), scale)) as ex:
        built = list(ex.map(_worker_build, jobs, chunksize=1))
    return {g.group_id: g for g in built}


def _manifest(kind, config, seed, groups, splits) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "seed": int(seed),
        "config": config.to_ini(),
        "pair_order": [list(p) for p in PAIRS],
        "group_count": len(groups),
        "splits": splits,
        "groups": [],
    }


def gen_touch_dataset(config: Config, seed: int, workers: int = 1) -> Dataset:
    """All 27 inflation states x (1 no-touch + 6 touched) groups, split 125/32/32."""
    specs = touch_group_specs(config, seed)
    groups = _build_all(config, specs, seed, "touch", workers)
    splits = split_ids([s.group_id for s in specs], config.scenarios.touch_splits, seed, _SPLIT_STREAM)
    return Dataset(_manifest("touch", config, seed, groups, splits), groups)


def tracking_group_specs(config: Config, seed: int) -> list[GroupSpec]:
    """The seeded selection of touched groups kept for tracking."""
    sc = config.scenarios
    touched = [s for s in touch_group_specs(config, seed) if s.touched]
    if sc.tracking_groups > len(touched):
        raise DatasetError(f"only {len(touched)} touched groups for {sc.tracking_groups} tracking groups")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TRACK_STREAM]))
    keep = sorted(rng.choice(len(touched), sc.tracking_groups, replace=False))
    return [touched[i] for i in keep]


def gen_tracking_dataset(config: Config, seed: int, workers: int = 1) -> Dataset:
    """A seeded selection of the touched groups, each calibrated against its
    own first frame, split 108/18/20."""
    sc = config.scenarios
    specs = tracking_group_specs(config, seed)
    groups = _build_all(config, specs, seed, "tracking", workers)
    splits = split_ids([s.group_id for s in specs], sc.tracking_splits, seed, _SPLIT_STREAM)
    return Dataset(_manifest("tracking", config, seed, groups, splits), groups)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------
def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _group_lines(g: ExperimentGroup) -> bytes:
    lines = []
    for i in range(g.n_frames):
        rec = {
            "group_id": g.group_id,
            "t": float(g.t[i]),
            "inflation": _floats(g.inflation[i]),
            "label": g.label,
            "cap_raw": _floats(g.cap_raw[i]),
            "cap_cal": _floats(g.cap_cal[i]),
            "markers": _floats(g.markers[i]),
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode()


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``manifest.json`` and ``groups/<id>.jsonl`` under ``path``."""
    root = Path(path)
    (root / "groups").mkdir(parents=True, exist_ok=True)
    entries = []
    split_of = {gid: name for name, ids in ds.manifest["splits"].items() for gid in ids}
    for gid in sorted(ds.groups):
        g = ds.groups[gid]
        blob = _group_lines(g)
        (root / "groups" / f"{gid}.jsonl").write_bytes(blob)
        s = g.spec
        entries.append(
            {
                "id": gid,
                "split": split_of.get(gid),
                "label": s.label,
                "inflation": list(s.inflation),
                "contact_center": list(s.contact_center),
                "force_seed": s.force_seed,
                "delay_frames": s.delay_frames,
                "frames": g.n_frames,
                "reference": _floats(g.reference),
                "prior_markers": None if g.prior_markers is None else _floats(g.prior_markers),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = dict(ds.manifest, groups=entries, group_count=len(entries))
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text)
    ds.manifest = manifest
    return root


def load_dataset(path, verify: bool = True) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest {mpath}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"unsupported dataset schema version {version} (expected {SCHEMA_VERSION})")
    entries = manifest.get("groups", [])
    on_disk = sorted((root / "groups").glob("*.jsonl")) if (root / "groups").exists() else []
    if manifest.get("group_count") != len(entries) or len(on_disk) != len(entries):
        raise DatasetError(
            f"manifest lists {manifest.get('group_count')} groups but {len(on_disk)} group files exist"
        )
    groups = {}
    for e in entries:
        gpath = root / "groups" / f"{e['id']}.jsonl"
        if not gpath.exists():
            raise DatasetError(f"missing group file {gpath}")
        blob = gpath.read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise DatasetError(f"checksum mismatch for {gpath}")
        recs = [json.loads(line) for line in blob.splitlines() if line]
        if len(recs) != e["frames"]:
            raise DatasetError(f"{gpath}: {len(recs)} frames, manifest says {e['frames']}")
        spec = GroupSpec(
            e["id"],
            tuple(e["inflation"]),
            e["label"],
            tuple(e["contact_center"]),
            e["force_seed"],
            e["delay_frames"],
        )
        prior = None if e["prior_markers"] is None else np.array(e["prior_markers"])
        groups[e["id"]] = ExperimentGroup(
            spec,
            np.array([r["t"] for r in recs]),
            np.array([r["inflation"] for r in recs]),
            np.array([r["cap_raw"] for r in recs]),
            np.array([r["cap_cal"] for r in recs]),
            np.array([r["markers"] for r in recs]).reshape(-1, N_MARKERS, 3),
            np.array(e["reference"]),
            prior,
        )
    return Dataset(manifest, groups)


def default_workers() -> int:
    return os.cpu_count() or 1
