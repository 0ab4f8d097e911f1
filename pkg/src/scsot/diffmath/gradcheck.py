"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, backward


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` over the flattened gradient.

    The floor keeps exactly-zero gradients (e.g. attention key biases, which
    softmax is invariant to) from turning finite-difference noise into a
    relative error of 1.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn, inputs, tol: float = 1e-4, step: float = 1e-5,
              max_coords: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare ``backward`` gradients of scalar ``fn(*inputs)`` with central differences.

    Args:
        fn: callable mapping the input Tensors to a scalar Tensor.
        inputs: list of Tensors or a dict name -> Tensor; each must require grad.
        tol: pass threshold on the per-input relative error.
        step: finite-difference step.
        max_coords: if set, only this many randomly chosen coordinates per
            input are perturbed (the analytic side is compared on the same
            coordinates). Keeps whole-model checks affordable.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {str(i): t for i, t in enumerate(inputs)}
    args = list(inputs.values()) if isinstance(inputs, dict) else list(inputs)
    for t in named.values():
        t.grad = None
    out = fn(*args)
    backward(out)
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in named.items()}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for name, t in named.items():
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(fn(*args).data)
            flat[idx] = orig - step
            down = float(fn(*args).data)
            flat[idx] = orig
            numeric[j] = (up - down) / (2 * step)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    return report


def leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
