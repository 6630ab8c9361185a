from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tol


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-4, n_coords: int | None = None,
               rng=None, floor: float = 1e-6, kink_ratio: float = 0.1, refine: bool = False) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    When ``n_coords`` is given, that many coordinates are sampled per input.
    Coordinates whose one-sided differences disagree by more than
    ``kink_ratio`` (relative) sit on a kink and are skipped. With
    ``refine=True`` a coordinate is also skipped when the central difference
    at ``eps / 2`` moves by more than ``tol / 100`` (relative) and by more
    than rounding noise: a switch point of a piecewise-smooth function lies
    inside the stencil and the numeric reference is not accurate there.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    def value() -> float:
        return float(f(*inputs).data.reshape(-1)[0])

    rng = rng if rng is not None else np.random.default_rng(0)
    f0 = value()
    # a few ulps of f over the step: central differences cannot resolve anything finer
    noise = 8 * np.spacing(abs(f0)) / eps
    worst, checked, skipped = 0.0, 0, 0
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_coords is not None and n_coords < flat.size:
            coords = rng.choice(flat.size, n_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            if abs(fwd - bwd) > kink_ratio * max(abs(fwd), abs(bwd), floor):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            if refine:
                flat[i] = orig + eps / 2
                fp2 = value()
                flat[i] = orig - eps / 2
                fm2 = value()
                flat[i] = orig
                num2 = (fp2 - fm2) / eps
                if abs(num - num2) > max(tol / 100 * max(abs(num), abs(num2), floor), noise):
                    skipped += 1
                    continue
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, checked, skipped, tol)
