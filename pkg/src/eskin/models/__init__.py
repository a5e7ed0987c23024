"""Touch classifier and deformation tracker with their training loops."""

from eskin.models.c2dt import (
    C2DT,
    FAST_EPOCHS,
    WindowSource,
    fast_config,
    load_track_model,
    make_window,
    pair_positions,
    predict_source,
    save_track_model,
    track_deformation,
    train_track,
)
from eskin.models.common import TrainingError, TrainResult, write_history
from eskin.models.touch import (
    N_CLASSES,
    TouchClassifier,
    classify_touch,
    load_touch_model,
    predict_touch,
    save_touch_model,
    split_arrays,
    train_touch,
)

__all__ = [
    "C2DT",
    "FAST_EPOCHS",
    "N_CLASSES",
    "TouchClassifier",
    "TrainResult",
    "TrainingError",
    "WindowSource",
    "classify_touch",
    "fast_config",
    "load_touch_model",
    "load_track_model",
    "make_window",
    "pair_positions",
    "predict_source",
    "predict_touch",
    "save_touch_model",
    "save_track_model",
    "split_arrays",
    "track_deformation",
    "train_touch",
    "train_track",
    "write_history",
]
