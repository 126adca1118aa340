"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tensor


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              tol: float = 1e-4, refine: float = 1e-2) -> GradcheckResult:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``fn`` is re-evaluated after perturbing entries of each input in place.
    With ``max_entries`` set, that many randomly chosen entries per input are
    checked. An entry that fails ``tol`` at step ``h`` but passes at step
    ``h * refine`` had a ReLU or max switch inside its stencil; it is counted
    as a kink and left out of the error. A wrong gradient fails at both steps.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn().data)
        flat[i] = orig - step
        f_minus = float(fn().data)
        flat[i] = orig
        return (f_plus - f_minus) / (2 * step)

    worst, checked, skipped = 0.0, 0, 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            a = float(grad.reshape(-1)[i])
            err = relative_error(a, central(flat, i, h))
            if err >= tol and relative_error(a, central(flat, i, h * refine)) < tol:
                skipped += 1
                continue
            worst = max(worst, err)
            checked += 1
    for t in inputs:
        t.grad = None
    return GradcheckResult(worst, checked, skipped)
