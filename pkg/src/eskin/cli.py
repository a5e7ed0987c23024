"""Command-line entry point: ``eskin <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from eskin.config import Config, ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("eskin")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _defaults() -> Config:
    return Config()


def build_parser() -> argparse.ArgumentParser:
    d = _defaults()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $ESKIN_CONFIG, else built-in defaults)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    common.add_argument("--out-dir", default="out", help="directory for all outputs (default: out)")
    common.add_argument("--backend", choices=("lumped", "fd"),
                        help=f"capacitance backend (default: {d.fields.backend})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="eskin", description="E-skin simulation, datasets and models.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a touch or tracking dataset")
    g.add_argument("--kind", choices=("touch", "tracking"), required=True)
    g.add_argument("--workers", type=int, default=None, help="parallel workers (default: all cores)")

    sub.add_parser("validate-solver", parents=[common], help="parallel-plate convergence and solver checks")

    t = sub.add_parser("train", parents=[common], help="train the touch classifier or the tracker")
    t.add_argument("--task", choices=("touch", "track"), required=True)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--epochs", type=int,
                   help=f"epochs (default: touch {d.touch_model.epochs}, track {d.track_model.epochs})")
    t.add_argument("--batch-size", type=int,
                   help=f"batch size (default: touch {d.touch_model.batch_size}, track {d.track_model.batch_size})")
    t.add_argument("--fast", action="store_true", help="tracker: reduced budget (30 epochs, 24 windows per group)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--task", choices=("touch", "track"), required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--plot-groups", default="", help="comma-separated group ids for trajectory plots")

    s = sub.add_parser("simulate", parents=[common], help="characterisation run: one inflation ramp or touch")
    s.add_argument("--inflation", default="20,20,20", help="injected volumes p1,p2,p3 in ml (default: 20,20,20)")
    s.add_argument("--touch", type=int, default=0, help="sub-region 1..18 to touch, 0 for none (default: 0)")
    s.add_argument("--force", type=float, help=f"constant touch force in N (default: {d.deformation.peak_force})")
    s.add_argument("--noise", action="store_true", help="add readout noise")
    return p


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.backend:
        cfg = cfg.replace("fields", backend=args.backend)
    return cfg


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------
def cmd_gen_data(args, cfg: Config) -> int:
    from eskin.scenarios import default_workers, gen_touch_dataset, gen_tracking_dataset, save_dataset

    workers = args.workers if args.workers is not None else default_workers()
    gen = gen_touch_dataset if args.kind == "touch" else gen_tracking_dataset
    ds = gen(cfg, args.seed, workers)
    out = Path(args.out_dir)
    save_dataset(ds, out)
    print(f"{args.kind} dataset: {len(ds.groups)} groups, {ds.frame_count()} frames -> {out}")
    for split in ("train", "val", "test"):
        print(f"  {split}: {len(ds.split_ids(split))} groups, {ds.frame_count(split)} frames")
    return EXIT_OK


def cmd_validate_solver(args, cfg: Config) -> int:
    from eskin.fields.validation import validate_solver

    rep = validate_solver()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "solver_validation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["check", "value", "reference", "rel_error"])
        w.writeheader()
        for row in rep.rows():
            w.writerow({k: repr(float(v)) if not isinstance(v, str) else v for k, v in row.items()})
    for row in rep.rows():
        print(f"{row['check']:>24s}  rel_error {row['rel_error']:.3e}")
    ok = rep.converging and rep.plates[-2].rel_error <= 0.05 and rep.reciprocity <= 1e-6 and rep.linearity <= 1e-10
    print(f"solver validation {'passed' if ok else 'FAILED'} in {rep.seconds:.1f} s")
    return EXIT_OK if ok else EXIT_NUMERIC


def _load(path):
    from eskin.scenarios import load_dataset

    return load_dataset(path)


def cmd_train(args, cfg: Config) -> int:
    from eskin.models import fast_config, train_touch, train_track

    ds = _load(args.data)
    out = Path(args.out_dir)
    if args.task == "touch":
        if ds.kind != "touch":
            raise CliError(f"{args.data} is a {ds.kind} dataset, not touch", EXIT_DATA)
        res = train_touch(ds, cfg, args.seed, out, args.epochs, args.batch_size)
    else:
        if ds.kind != "tracking":
            raise CliError(f"{args.data} is a {ds.kind} dataset, not tracking", EXIT_DATA)
        if args.fast:
            cfg = fast_config(cfg)
        res = train_track(ds, cfg, args.seed, out, args.epochs, args.batch_size)
    print(f"best epoch {res.best_epoch} (val loss {res.best_val_loss:.5f}) -> {res.checkpoint}")
    return EXIT_OK


def evaluate_touch(model, ds):
    from eskin.eval import accuracy, confusion
    from eskin.models import predict_touch

    groups = ds.split_groups("test")
    x = np.concatenate([g.cap_cal for g in groups])
    y = np.concatenate([np.full(g.n_frames, g.label) for g in groups])
    pred = predict_touch(model, x)
    return accuracy(pred, y), confusion(pred, y)


def evaluate_track(model, ds, cfg: Config):
    from eskin.eval import tracking_report
    from eskin.geometry import ManipulatorGeometry
    from eskin.models.c2dt import WindowSource, pair_positions, predict_source

    src = WindowSource(ds.split_groups("test"), model.config.window)
    pos = pair_positions(ManipulatorGeometry(cfg.geometry, cfg.deformation))
    pred = predict_source(model, src, pos)
    _, init, truth = src.batch(src.index)
    gids = np.array([src.groups[g].group_id for g, _ in src.index])
    return tracking_report(pred, truth, init, gids), pred, truth, gids


def cmd_eval(args, cfg: Config) -> int:
    from eskin.eval import EvalResults, emit_report
    from eskin.models import load_touch_model, load_track_model

    ds = _load(args.data)
    out = Path(args.out_dir)
    if args.task == "touch":
        model = load_touch_model(args.checkpoint)
        acc, cm = evaluate_touch(model, ds)
        emit_report(EvalResults(confusion=cm, accuracy=acc), out)
        frac = cm.adjacency_fraction()
        print(f"test accuracy {acc:.5f} ({cm.errors} errors of {cm.total}); adjacent-error share {frac:.3f}")
    else:
        model = load_track_model(args.checkpoint)
        rep, pred, truth, gids = evaluate_track(model, ds, cfg)
        wanted = [int(v) for v in args.plot_groups.split(",") if v.strip()]
        missing = [g for g in wanted if g not in set(gids.tolist())]
        if missing:
            raise CliError(f"groups {missing} are not in the test split", EXIT_DATA)
        traj = {g: (pred[gids == g], truth[gids == g]) for g in wanted}
        emit_report(EvalResults(tracking=rep, trajectories=traj), out)
        print(f"test AD {rep.ad[0]:.3f} +- {rep.ad[1]:.3f} mm; static baseline {rep.baseline_ad[0]:.3f} +- "
              f"{rep.baseline_ad[1]:.3f} mm (ratio {rep.ratio:.3f})")
    return EXIT_OK


def cmd_simulate(args, cfg: Config) -> int:
    from eskin.geometry import NO_TOUCH, InflationState, TouchSpec, deform
    from eskin.scenarios import ForceProfile, Simulator
    from eskin.sensing import PAIRS, NoiseModel, apply_noise_array, calibrate_array

    try:
        p = tuple(float(v) for v in args.inflation.split(","))
    except ValueError as exc:
        raise CliError(f"bad --inflation {args.inflation!r}", EXIT_CONFIG) from exc
    if len(p) != 3:
        raise CliError("--inflation needs three comma-separated volumes", EXIT_CONFIG)
    sc, mech = cfg.scenarios, cfg.deformation
    sim = Simulator(cfg)
    n = int(round(sc.duration * sc.fps))
    t = np.arange(n) / sc.fps
    if args.touch:
        force = mech.peak_force if args.force is None else args.force
        _, center = sim.geom.subregion_center(args.touch)
        touch = TouchSpec(args.touch, tuple(center), mech.contact_radius,
                          ForceProfile(np.full(n, force), sc.fps), mech.finger_permittivity)
        ramp = np.ones(n)
    else:
        touch = NO_TOUCH
        ramp = np.clip(t / sc.ramp_s, 0.0, 1.0)
    stride = max(1, sim.keyframe_stride)
    keys = sorted(set(range(0, n, stride)) | {n - 1})
    warm: dict = {}
    raw_k = np.stack([sim.raw(deform(sim.geom, InflationState(tuple(np.array(p) * ramp[i])), touch, t[i]), warm)
                      for i in keys])
    raw = np.stack([np.interp(np.arange(n), keys, raw_k[:, c]) for c in range(raw_k.shape[1])], axis=1)
    rest = sim.rest_frame()
    if args.noise:
        rng = np.random.default_rng(args.seed)
        nm = NoiseModel(cfg.sensing.quantization_ff, cfg.sensing.snr_db)
        raw = apply_noise_array(raw, nm, rng)
        rest = apply_noise_array(rest, nm, rng)
    cal = calibrate_array(raw, rest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"c{a}{b}" for a, b in PAIRS]
    with open(out / "simulate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + names)
        for i in range(n):
            w.writerow([repr(float(t[i]))] + [repr(float(v)) for v in cal[i]])
    _plot_simulation(t, cal, names, out / "simulate.png", f"inflation {p}, touch {args.touch}")
    final = cal[-1]
    print(f"final calibrated range [{final.min():+.4f}, {final.max():+.4f}] -> {out / 'simulate.csv'}")
    return EXIT_OK


def _plot_simulation(t, cal, names, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from eskin.sensing import same_face_mask

    same = same_face_mask()
    fig, ax = plt.subplots(figsize=(9, 5))
    for c in range(cal.shape[1]):
        ax.plot(t, cal[:, c], color="tab:red" if same[c] else "tab:blue", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("calibrated capacitance")
    ax.set_title(f"{title}  (red: same-face pairs, blue: cross-face pairs)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "validate-solver": cmd_validate_solver,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    from eskin.autodiff.checkpoint import CheckpointError
    from eskin.fields.fd import SolverError
    from eskin.models.common import TrainingError
    from eskin.scenarios import DatasetError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
