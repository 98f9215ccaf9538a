"""Shared test utilities: the central finite-difference gradient checker
used as the independent oracle for every differentiable primitive."""

from __future__ import annotations

import numpy as np

from cellgraph.tensor import Tape, Tensor


def numeric_gradient(build, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar build() w.r.t. one tensor.

    build() must re-run the forward pass from current parameter values and
    return a scalar Tensor; no tape is active during these evaluations.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = build().item()
        flat[i] = orig - h
        down = build().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_gradients_match(build, params: list[Tensor], h: float = 1e-5,
                           rtol: float = 1e-4, atol: float = 1e-6) -> None:
    """Backprop build() once, then compare every parameter gradient against
    central differences at relative tolerance rtol."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
        tape.backward(loss)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(build, p, h)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        err = np.abs(analytic - numeric)
        bad = err > np.maximum(rtol * scale, atol)
        assert not bad.any(), (
            f"gradient mismatch at {np.argwhere(bad)[0]}: "
            f"analytic {analytic[bad][0]:.8g} vs numeric {numeric[bad][0]:.8g}"
        )


def spot_check_gradients(build, params: list[Tensor], rng: np.random.Generator,
                         entries_per_param: int = 4, h: float = 1e-5,
                         rtol: float = 1e-4, atol: float = 1e-6) -> None:
    """Like assert_gradients_match but probing only a few random entries of
    each parameter; used for expensive end-to-end graphs."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
        tape.backward(loss)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries_per_param, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            scale = max(abs(aflat[i]), abs(numeric))
            assert abs(aflat[i] - numeric) <= max(rtol * scale, atol), (
                f"entry {i}: analytic {aflat[i]:.8g} vs numeric {numeric:.8g}"
            )
