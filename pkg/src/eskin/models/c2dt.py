"""Capacitance-to-deformation transformer (C2DT).

The encoder reads 280 tokens, one per (frame, channel) of a 10-frame window.
A token's embedding is the sum of a value MLP of its calibrated reading, one
shared MLP applied to each of the channel's two electrode centroids P and Q,
and a learned embedding of its frame index. Token order carries no meaning.

The decoder attends from the five initial marker coordinates (embedded by a
marker MLP) to the encoder memory; an output MLP maps each decoded query to a
displacement that is added to the initial marker position. The marker MLP
sees the markers relative to their centroid, so a rigid translation of the
initial markers translates the prediction by the same vector.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from eskin.autodiff import AdamState, Tensor, lr_schedule, mean_squared_error, no_grad
from eskin.autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from eskin.autodiff.nn import MLP, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Module
from eskin.autodiff.tensor import reshape
from eskin.config import Config, TrackModelConfig
from eskin.geometry import N_MARKERS, ManipulatorGeometry
from eskin.models.common import TrainingError, TrainResult, apply_update, check_finite, write_history
from eskin.sensing import N_PAIRS, PAIRS

log = logging.getLogger(__name__)

KIND = "c2dt"


def pair_positions(geom: ManipulatorGeometry | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rest-frame electrode centroids (P, Q) of every channel, each (28, 3) mm."""
    geom = geom or ManipulatorGeometry()
    c = geom.electrode_centroids()
    p = np.array([c[a - 1] for a, _ in PAIRS])
    q = np.array([c[b - 1] for _, b in PAIRS])
    return p, q


def make_window(cal: np.ndarray, end: int, window: int) -> np.ndarray:
    """Frames ``end-window+1 .. end`` of ``cal``; indices before 0 repeat frame 0."""
    idx = np.maximum(np.arange(end - window + 1, end + 1), 0)
    return cal[idx]


class C2DT(Module):
    def __init__(self, config: TrackModelConfig | None = None, seed: int = 0, dtype=np.float32):
        c = config or TrackModelConfig()
        self.config = c
        rng = np.random.default_rng(seed)
        w, h = c.width, c.embed_hidden
        self.value_mlp = MLP([1, h, w], rng, dtype)
        self.pos_mlp = MLP([3, h, w], rng, dtype)
        self.frame_embed = Embedding(c.window, w, rng, dtype)
        self.marker_mlp = MLP([3, h, w], rng, dtype)
        self.encoder = [EncoderLayer(w, c.heads, c.ff_width, c.dropout, rng, dtype) for _ in range(c.encoder_layers)]
        self.decoder = [DecoderLayer(w, c.heads, c.ff_width, c.dropout, rng, dtype) for _ in range(c.decoder_layers)]
        self.enc_norm = LayerNorm(w, dtype)
        self.dec_norm = LayerNorm(w, dtype)
        self.head = MLP([w, h, 3], rng, dtype)
        # normalisation buffers, fitted on training data
        self.value_scale = np.ones(N_PAIRS)
        self.pos_center = np.zeros(3)
        self.pos_scale = 1.0
        self.marker_scale = 1.0
        self.target_scale = 1.0

    @property
    def dtype(self):
        return self.head.layers[0].weight.dtype

    # ----- core ------------------------------------------------------------
    def forward_tokens(self, values, p, q, frame_index, init_markers) -> Tensor:
        """Predict (B, 5, 3) from explicit tokens.

        ``values`` (B, T) are scaled readings, ``p``/``q`` (T, 3) raw centroids
        in mm, ``frame_index`` (T,) ints and ``init_markers`` (B, 5, 3) in mm.
        """
        dt = self.dtype
        values = np.asarray(values)
        init = np.asarray(init_markers, dtype=float)
        b, t = values.shape
        v_emb = self.value_mlp(Tensor(values.reshape(b * t, 1).astype(dt)))
        pq = (np.concatenate([p, q]) - self.pos_center) / self.pos_scale
        pq_emb = self.pos_mlp(Tensor(pq.astype(dt)))
        pos = reshape(pq_emb, (2, t, -1)).sum(axis=0) + self.frame_embed(frame_index)
        tokens = reshape(v_emb, (b, t, -1)) + pos
        for layer in self.encoder:
            tokens = layer(tokens)
        memory = self.enc_norm(tokens)
        centred = (init - init.mean(axis=1, keepdims=True)) / self.marker_scale
        x = reshape(self.marker_mlp(Tensor(centred.reshape(-1, 3).astype(dt))), (b, N_MARKERS, -1))
        for layer in self.decoder:
            x = layer(x, memory)
        return self.head(self.dec_norm(x))

    def tokens(self, windows: np.ndarray):
        """Flatten (B, window, 28) calibrated windows into the token layout."""
        b, w, c = windows.shape
        if c != N_PAIRS:
            raise ValueError(f"expected {N_PAIRS} channels, got {c}")
        values = (windows / self.value_scale).reshape(b, w * c)
        frame_index = np.repeat(np.arange(w), c)
        return values, frame_index

    def __call__(self, windows, p, q, init_markers) -> Tensor:
        """Scaled displacement output (B, 5, 3); see :func:`track_deformation`."""
        windows = np.asarray(windows)
        values, frame_index = self.tokens(windows)
        w = windows.shape[1]
        return self.forward_tokens(values, np.tile(p, (w, 1)), np.tile(q, (w, 1)), frame_index, init_markers)

    def predict(self, windows, p, q, init_markers) -> np.ndarray:
        out = self(windows, p, q, init_markers).data.astype(np.float64)
        return np.asarray(init_markers, dtype=float) + out * self.target_scale

    # ----- persistence -----------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = self.state_dict()
        out["buffer.value_scale"] = self.value_scale.copy()
        out["buffer.pos_center"] = self.pos_center.copy()
        out["buffer.scalars"] = np.array([self.pos_scale, self.marker_scale, self.target_scale])
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        arrays = dict(arrays)
        self.value_scale = np.array(arrays.pop("buffer.value_scale"))
        self.pos_center = np.array(arrays.pop("buffer.pos_center"))
        s = arrays.pop("buffer.scalars")
        self.pos_scale, self.marker_scale, self.target_scale = (float(v) for v in s)
        self.load_state_dict(arrays)


def track_deformation(model: C2DT, window, pair_pos, init_markers) -> np.ndarray:
    """Current marker coordinates (5, 3) mm from a calibrated window.

    ``window`` is (n, 28) with the newest frame last. Shorter windows are
    padded at the front by repeating their first frame; longer ones keep the
    newest ``model.config.window`` frames.
    """
    w = np.asarray(window, dtype=float)
    if w.ndim != 2 or w.shape[1] != N_PAIRS or len(w) == 0:
        raise ValueError(f"window must be (n, {N_PAIRS}) with n >= 1, got {w.shape}")
    n = model.config.window
    w = make_window(w, len(w) - 1, n) if len(w) < n else w[-n:]
    p, q = pair_pos
    was = model.training
    model.eval()
    with no_grad():
        out = model.predict(w[None], p, q, np.asarray(init_markers, dtype=float)[None])[0]
    model.train(was)
    return out


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------
class WindowSource:
    """Sliding windows over a list of tracking groups."""

    def __init__(self, groups, window: int):
        if not groups:
            raise TrainingError("tracking split is empty")
        self.groups = groups
        self.window = window
        self.cal = [g.cap_cal for g in groups]
        self.markers = [g.markers for g in groups]
        self.prior = [g.prior_markers if g.prior_markers is not None else g.markers[0] for g in groups]
        self.index = np.array([(gi, i) for gi, g in enumerate(groups) for i in range(g.n_frames)])

    def batch(self, rows: np.ndarray):
        wins = np.stack([make_window(self.cal[g], i, self.window) for g, i in rows])
        init = np.stack([self.prior[g] for g, _ in rows])
        target = np.stack([self.markers[g][i] for g, i in rows])
        return wins, init, target

    def sample(self, per_group: int, rng: np.random.Generator) -> np.ndarray:
        rows = []
        for gi, g in enumerate(self.groups):
            k = min(per_group, g.n_frames)
            rows.extend((gi, int(i)) for i in np.sort(rng.choice(g.n_frames, k, replace=False)))
        return np.array(rows)


def fit_normalizers(model: C2DT, source: WindowSource, pair_pos):
    cal = np.concatenate(source.cal)
    model.value_scale = np.maximum(cal.std(axis=0), 1e-6)
    pq = np.concatenate(pair_pos)
    model.pos_center = pq.mean(axis=0)
    model.pos_scale = float(np.abs(pq - model.pos_center).max())
    prior = np.stack(source.prior)
    model.marker_scale = float(np.abs(prior - prior.mean(axis=1, keepdims=True)).max())
    disp = np.concatenate([m - p for m, p in zip(source.markers, source.prior)])
    model.target_scale = float(max(disp.std(), 1e-3))


def predict_source(model: C2DT, source: WindowSource, pair_pos, rows=None, batch: int = 64) -> np.ndarray:
    rows = source.index if rows is None else rows
    p, q = pair_pos
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(rows), batch):
            wins, init, _ = source.batch(rows[i : i + batch])
            out.append(model.predict(wins, p, q, init))
    model.train()
    return np.concatenate(out) if out else np.zeros((0, N_MARKERS, 3))


def _ad(pred, truth) -> float:
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


def save_track_model(model: C2DT, path, meta: dict | None = None, optimizer=None) -> Path:
    c = model.config
    cfg = {k: getattr(c, k) for k in ("window", "width", "heads", "encoder_layers", "decoder_layers",
                                      "ff_width", "embed_hidden", "dropout")}
    return save_checkpoint(path, model.arrays(), dict(meta or {}, kind=KIND, architecture=cfg), optimizer)


def load_track_model(path) -> C2DT:
    arrays, meta, _ = load_checkpoint(path)
    if meta.get("kind") != KIND:
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} model, not {KIND!r}")
    cfg = TrackModelConfig(**meta["architecture"])
    model = C2DT(cfg, dtype=arrays["head.layers.0.weight"].dtype)
    model.load_arrays(arrays)
    return model.eval()


def train_track(
    dataset,
    config: Config | None = None,
    seed: int = 0,
    out_dir=None,
    epochs: int | None = None,
    batch_size: int | None = None,
) -> TrainResult:
    """Squared-error training of C2DT on the tracking dataset.

    Each epoch draws ``windows_per_group`` random windows from every training
    group; validation uses a fixed draw of ``val_windows_per_group`` windows
    per group and reports AD in mm as the metric. Batches are processed in
    micro-batches with gradient accumulation.
    """
    config = config or Config()
    cfg = config.track_model
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    micro = max(1, min(cfg.micro_batch, batch_size))
    train = WindowSource(dataset.split_groups("train"), cfg.window)
    val = WindowSource(dataset.split_groups("val"), cfg.window)
    geom = ManipulatorGeometry(config.geometry, config.deformation)
    pos = pair_positions(geom)
    p, q = pos
    model = C2DT(cfg, seed)
    fit_normalizers(model, train, pos)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    val_rows = val.sample(cfg.val_windows_per_group, np.random.default_rng(np.random.SeedSequence([seed, 2])))
    _, _, val_truth = val.batch(val_rows)
    state = AdamState()
    result = TrainResult(model)

    def val_eval():
        pred = predict_source(model, val, pos, val_rows)
        return float(np.mean(((pred - val_truth) / model.target_scale) ** 2)), _ad(pred, val_truth)

    result.initial_loss, _ = val_eval()
    best = model.arrays()
    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.decay_every)
        rows = train.sample(cfg.windows_per_group, rng)
        rows = rows[rng.permutation(len(rows))]
        run, seen = 0.0, 0
        for b, i in enumerate(range(0, len(rows), batch_size)):
            chunk = rows[i : i + batch_size]
            model.zero_grad()
            total = 0.0
            for j in range(0, len(chunk), micro):
                wins, init, target = train.batch(chunk[j : j + micro])
                if cfg.translation_augment:
                    shift = rng.uniform(-cfg.augment_scale, cfg.augment_scale, (len(init), 1, 3))
                    init, target = init + shift, target + shift
                out = model(wins, p, q, init)
                loss = mean_squared_error(out, (target - init) / model.target_scale)
                value = float(loss.data)
                check_finite(value, epoch, b)
                loss.backward(np.asarray(len(init) / len(chunk), dtype=out.dtype))
                total += value * len(init)
            apply_update(model, state, lr, epoch, b)
            run += total
            seen += len(chunk)
        val_loss, val_ad = val_eval()
        check_finite(val_loss, epoch, -1)
        result.history.append(
            {"epoch": epoch, "train_loss": run / seen, "val_loss": val_loss, "metric": val_ad}
        )
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best = model.arrays()
        log.info("track epoch %d loss %.4f val %.4f AD %.3f mm", epoch, run / seen, val_loss, val_ad)
    model.load_arrays(best)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"seed": seed, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}
        result.checkpoint = save_track_model(model, out / "track_best.npz", meta)
        write_history(out / "track_history.csv", result.history)
    return result


FAST_EPOCHS = 30
FAST_WINDOWS = 24


def fast_config(config: Config | None = None) -> Config:
    """The reduced-budget tracker recipe: 30 epochs of 24 windows per group."""
    return (config or Config()).replace("track_model", epochs=FAST_EPOCHS, windows_per_group=FAST_WINDOWS)


__all__ = [
    "C2DT",
    "FAST_EPOCHS",
    "WindowSource",
    "fast_config",
    "load_track_model",
    "make_window",
    "pair_positions",
    "predict_source",
    "save_track_model",
    "track_deformation",
    "train_track",
]
