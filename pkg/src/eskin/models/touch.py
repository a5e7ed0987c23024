"""Single-hidden-layer touch classifier over one calibrated frame."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from eskin.autodiff import AdamState, Tensor, lr_schedule, no_grad, relu, softmax_cross_entropy
from eskin.autodiff.checkpoint import load_checkpoint, save_checkpoint
from eskin.autodiff.nn import Dropout, Linear, Module
from eskin.config import Config, TouchModelConfig
from eskin.models.common import TrainingError, TrainResult, apply_update, check_finite, write_history
from eskin.sensing import N_PAIRS

log = logging.getLogger(__name__)

N_CLASSES = 19
KIND = "touch-mlp"


class TouchClassifier(Module):
    """28 calibrated values -> 128 ReLU (dropout) -> 19 logits."""

    def __init__(self, config: TouchModelConfig | None = None, seed: int = 0, dtype=np.float32):
        config = config or TouchModelConfig()
        rng = np.random.default_rng(seed)
        self.hidden = Linear(N_PAIRS, config.hidden, rng, dtype)
        self.drop = Dropout(config.dropout, rng)
        self.out = Linear(config.hidden, N_CLASSES, rng, dtype)

    def __call__(self, x) -> Tensor:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != N_PAIRS:
            raise ValueError(f"expected frames of width {N_PAIRS}, got shape {x.shape}")
        z = Tensor(x.astype(self.hidden.weight.dtype))
        return self.out(self.drop(relu(self.hidden(z))))

    def arrays(self) -> dict[str, np.ndarray]:
        return self.state_dict()

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.load_state_dict(dict(arrays))


def classify_touch(model: TouchClassifier, frame) -> np.ndarray:
    """Class probabilities for one frame (28,) or a batch (n, 28)."""
    x = np.asarray(frame, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    with no_grad():
        logits = model(x).data.astype(np.float64)
    model.train(was_training)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def predict_touch(model: TouchClassifier, frames, batch: int = 8192) -> np.ndarray:
    x = np.asarray(frames)
    return np.concatenate(
        [classify_touch(model, x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    ) if len(x) else np.zeros(0, dtype=int)


def split_arrays(dataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    groups = dataset.split_groups(split)
    if not groups:
        raise TrainingError(f"split {split!r} is empty")
    x = np.concatenate([g.cap_cal for g in groups])
    y = np.concatenate([np.full(g.n_frames, g.label) for g in groups])
    return x, y


def _eval_loss(model, x, y, batch: int = 8192) -> tuple[float, float]:
    model.eval()
    total, correct = 0.0, 0
    with no_grad():
        for i in range(0, len(x), batch):
            logits = model(x[i : i + batch])
            total += float(softmax_cross_entropy(logits, y[i : i + batch]).data) * len(logits.data)
            correct += int((logits.data.argmax(axis=1) == y[i : i + batch]).sum())
    model.train()
    return total / len(x), correct / len(x)


def save_touch_model(model: TouchClassifier, path, meta: dict | None = None, optimizer=None) -> Path:
    return save_checkpoint(path, model.arrays(), dict(meta or {}, kind=KIND), optimizer)


def load_touch_model(path, config: TouchModelConfig | None = None) -> TouchClassifier:
    from eskin.autodiff.checkpoint import CheckpointError

    arrays, meta, _ = load_checkpoint(path)
    if meta.get("kind") != KIND:
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} model, not {KIND!r}")
    hidden = arrays["hidden.weight"].shape[1]
    cfg = TouchModelConfig(hidden=hidden, dropout=(config or TouchModelConfig()).dropout)
    model = TouchClassifier(cfg, dtype=arrays["hidden.weight"].dtype)
    model.load_arrays(arrays)
    return model.eval()


def train_touch(
    dataset,
    config: Config | None = None,
    seed: int = 0,
    out_dir=None,
    epochs: int | None = None,
    batch_size: int | None = None,
) -> TrainResult:
    """Cross-entropy training with Adam and step-decayed learning rate.

    The model with the smallest validation loss is kept; with ``out_dir`` it
    is written to ``touch_best.npz`` next to ``touch_history.csv``.
    """
    cfg = (config or Config()).touch_model
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    x_tr, y_tr = split_arrays(dataset, "train")
    x_va, y_va = split_arrays(dataset, "val")
    model = TouchClassifier(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    state = AdamState()
    result = TrainResult(model)
    result.initial_loss, _ = _eval_loss(model, x_va, y_va)
    best = model.arrays()
    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.decay_every)
        order = rng.permutation(len(x_tr))
        run, seen = 0.0, 0
        for b, i in enumerate(range(0, len(order), batch_size)):
            idx = order[i : i + batch_size]
            model.zero_grad()
            loss = softmax_cross_entropy(model(x_tr[idx]), y_tr[idx])
            value = float(loss.data)
            check_finite(value, epoch, b)
            loss.backward()
            apply_update(model, state, lr, epoch, b)
            run += value * len(idx)
            seen += len(idx)
        val_loss, val_acc = _eval_loss(model, x_va, y_va)
        check_finite(val_loss, epoch, -1)
        result.history.append(
            {"epoch": epoch, "train_loss": run / seen, "val_loss": val_loss, "metric": val_acc}
        )
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best = model.arrays()
        log.info("touch epoch %d loss %.4f val %.4f acc %.4f", epoch, run / seen, val_loss, val_acc)
    model.load_arrays(best)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"seed": seed, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}
        result.checkpoint = save_touch_model(model, out / "touch_best.npz", meta)
        write_history(out / "touch_history.csv", result.history)
    return result
