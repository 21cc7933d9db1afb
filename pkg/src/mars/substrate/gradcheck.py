"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def gradient_check(fn, inputs: list[Tensor], step: float | None = None) -> float:
    """Compare reverse-mode gradients of a scalar-valued ``fn`` against
    fourth-order central finite differences.

    Returns the worst relative error across inputs, measured as
    ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-12) per input tensor.
    The step defaults to 2e-2 for float32 inputs and 1e-3 for float64; the
    five-point stencil keeps truncation ~h^4 so the step can stay large
    enough to swamp evaluation roundoff.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
        t.data = np.ascontiguousarray(t.data)  # keep the flat view below writable-through
    out = fn(*inputs)
    out.backward()

    worst = 0.0
    for t in inputs:
        h = step if step is not None else (2e-2 if t.data.dtype == np.float32 else 1e-3)
        analytic = (np.zeros(t.data.size) if t.grad is None
                    else np.ravel(t.grad).astype(np.float64))
        numeric = np.zeros(t.data.size)
        flat = t.data.reshape(-1)

        def eval_at(i, value):
            flat[i] = value
            return float(fn(*inputs).data)

        for i in range(flat.size):
            orig = flat[i]
            hi = h * (1.0 + abs(float(orig)))
            f1 = eval_at(i, orig + hi)
            f2 = eval_at(i, orig + 2 * hi)
            fm1 = eval_at(i, orig - hi)
            fm2 = eval_at(i, orig - 2 * hi)
            flat[i] = orig
            numeric[i] = (fm2 - 8.0 * fm1 + 8.0 * f1 - f2) / (12.0 * hi)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
