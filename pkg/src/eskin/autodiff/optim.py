"""Adam with bias correction and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def lr_schedule(epoch: int, base: float = 1e-3, decay: float = 1.2, every: int = 15) -> float:
    """Learning rate for ``epoch`` (0-based): ``base / decay ** (epoch // every)``."""
    return base / decay ** (epoch // every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int, **hyper) -> "AdamState":
        st = cls(step=step, **hyper)
        for key, a in arrays.items():
            kind, name = key.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = np.array(a, copy=True)
        return st


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update of ``params`` (name -> Tensor or array).

    Parameters without a gradient entry are left alone.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g.shape != data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(data.dtype, copy=False)
        data -= update
    return state
