"""Central-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``; any NaN on either side yields ``inf``.
    A jump at ``x`` also yields ``inf``: coordinates with a large error are
    re-differenced at a tenth of the step, and a quotient that grows like
    ``1/step`` marks a discontinuity.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(x0.copy(), requires_grad=True)
        out = f(xt)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        backward(out)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

        def central(i, h):
            xp = x0.copy().reshape(-1)
            xp[i] += h
            xm = x0.copy().reshape(-1)
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            return (fp - fm) / (2 * h)

        with no_grad():
            numeric = np.array([central(i, step) for i in range(x0.size)]).reshape(x0.shape)
            if np.isnan(analytic).any() or np.isnan(numeric).any():
                return float("inf")
            err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
            for i in np.flatnonzero(err.reshape(-1) > 0.1):
                fine = central(i, step / 10)
                if abs(fine) > 5 * abs(numeric.reshape(-1)[i]) + 1e-8:
                    return float("inf")
    return float(err.max()) if err.size else 0.0
