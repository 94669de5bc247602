"""Central finite-difference gradient verification.

The checker treats the function under test as a black box from a list of
leaf tensors to a scalar, perturbs each coordinate by +/- h, and compares
the numerical slope against the analytical gradient produced by backward.
The comparison metric is |analytic - numeric| / max(1, |analytic|): relative
for large gradients, absolute near zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["finite_diff_check", "GradCheckFailure"]


class GradCheckFailure(AssertionError):
    """Raised when an analytical gradient disagrees with finite differences."""


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Verify d fn / d params against central differences.

    ``fn`` must rebuild its graph on every call (so perturbed evaluations
    see fresh data) and return a scalar Tensor. Every tensor in ``params``
    must have ``requires_grad`` set. When ``max_coords`` is given, at most
    that many coordinates per parameter are probed, drawn without
    replacement from ``rng``; the analytical side is still the full
    backward pass. Returns the worst relative error seen and raises
    :class:`GradCheckFailure` when it exceeds ``tol``.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("all checked parameters must require grad")
        p.zero_grad()

    out = fn()
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar objective")
    out.backward()
    analytical = []
    for p in params:
        analytical.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        p.zero_grad()

    worst = 0.0
    for p, grad in zip(params, analytical):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ValueError("rng is required when subsampling coordinates")
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        gflat = grad.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(fn().data)
            flat[idx] = orig - h
            f_minus = float(fn().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(numeric - gflat[idx]) / max(1.0, abs(gflat[idx]))
            if err > worst:
                worst = err
            if err > tol:
                raise GradCheckFailure(
                    f"gradient mismatch at coordinate {idx} of shape {p.shape}: "
                    f"analytical {gflat[idx]:.10g}, numeric {numeric:.10g}, rel err {err:.3g}"
                )
    return worst
