"""Shared test utilities, most importantly the finite-difference oracle.

The oracle is deliberately independent of the autodiff engine: it only ever
calls a function's *forward* pass and estimates derivatives with central
differences (h = 1e-3) in float64. Tests first freeze oracle outputs as
expected values, then check the engine's analytic gradients against them.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mstp.autodiff import Tensor

FD_STEP = 1e-3


def finite_diff(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = FD_STEP):
    """Central-difference gradients of scalar-valued `f` w.r.t. each array.

    `f` receives float64 Tensors built from perturbed copies of `arrays` and
    must return a scalar Tensor. Only forward evaluations are used.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(mats):
        out = f(*[Tensor(m, requires_grad=False, dtype=np.float64) for m in mats])
        return float(out.data)

    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (value(plus) - value(minus)) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]):
    """Engine gradients of scalar-valued `f`, computed in float64."""
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()
    return [t.grad for t in tensors]


def assert_grads_close(analytic, expected, rtol: float = 1e-3, atol: float = 1e-5):
    """Per-element |a - e| <= atol + rtol * max(|a|, |e|), the usual gradcheck rule."""
    for a, e in zip(analytic, expected):
        a = np.asarray(a, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        assert a.shape == e.shape, f"gradient shape {a.shape} vs expected {e.shape}"
        err = np.abs(a - e)
        bound = atol + rtol * np.maximum(np.abs(a), np.abs(e))
        worst = (err - bound).max()
        assert (err <= bound).all(), f"gradient mismatch, worst excess {worst:.3g}"


def check_against_fd(f: Callable[..., Tensor], arrays, rtol: float = 1e-3, atol: float = 1e-5):
    """Convenience wrapper: engine grads vs the finite-difference oracle."""
    expected = finite_diff(f, arrays)
    got = analytic_grads(f, arrays)
    assert_grads_close(got, expected, rtol=rtol, atol=atol)
    return expected
