"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from eskin.autodiff.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tolerance: float = 1e-4
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error <= self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    eps: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``fn``'s reverse-mode gradient with central differences.

    ``fn`` takes one :class:`Tensor` per entry of ``point`` and returns a
    scalar tensor. Everything runs in float64. The relative error of element
    ``i`` is ``|a - n| / max(|a| + |n|, floor)``; the report carries the
    largest over all inputs.
    """
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in point]
    failures: list[str] = []
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    try:
        out = fn(*tensors)
        if out.data.size != 1:
            raise ValueError(f"function must return a scalar, got shape {out.shape}")
        out.backward()
    except Exception as exc:  # the report carries failures
        return GradCheckReport(float("inf"), [], tolerance, [f"{type(exc).__name__}: {exc}"])

    def value(arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    per_input = []
    for k, a in enumerate(arrays):
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = value(arrays)
            flat[i] = old - eps
            fm = value(arrays)
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if a.size else 0.0
        if not np.all(np.isfinite(analytic)):
            failures.append(f"input {k}: non-finite analytic gradient")
        per_input.append(err)
    return GradCheckReport(max(per_input, default=0.0), per_input, tolerance, failures)


def module_grad_check(
    params: Sequence[Tensor],
    loss: Callable[[], Tensor],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Gradient check with respect to parameter tensors perturbed in place.

    ``loss`` closes over the model and recomputes a scalar loss. Parameters
    must already hold float64 data. ``max_entries`` samples that many
    entries per tensor (seeded by ``rng``) to bound the cost on large models.

    The default step is smaller than :func:`grad_check`'s: whole networks hold
    many ReLU units, and a step of 1e-4 regularly straddles a kink.
    """
    for p in params:
        p.grad = None
    try:
        loss().backward()
    except Exception as exc:
        return GradCheckReport(float("inf"), [], tolerance, [f"{type(exc).__name__}: {exc}"])
    rng = rng or np.random.default_rng(0)
    per_input = []
    failures = []
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        a = analytic.reshape(-1)[idx]
        n = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = float(loss().data)
            flat[i] = old - eps
            fm = float(loss().data)
            flat[i] = old
            n[j] = (fp - fm) / (2 * eps)
        if not np.all(np.isfinite(a)):
            failures.append(f"parameter {k}: non-finite analytic gradient")
        per_input.append(float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))))
    return GradCheckReport(max(per_input, default=0.0), per_input, tolerance, failures)
