"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NumericError, Tensor, backward, get_tape, mean_all, mul, no_grad

# The finite-difference side runs in extended precision where the platform
# has it: at double, roundoff in (f(x+h) - f(x-h)) / 2h is ~1e-11, which
# swamps genuinely small gradient entries under a relative-error metric.
ORACLE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def _scalarize(out: Tensor, probe: np.ndarray) -> Tensor:
    if out.dims == (1, 1, 1, 1):
        return out
    return mean_all(mul(out, Tensor(probe)))


def _check_tape_finite() -> None:
    tape = get_tape()
    for node in tape.nodes:
        if not np.all(np.isfinite(node.output.data)):
            tape.clear()
            raise NumericError(f"non-finite output from operation {node.name!r}")


def grad_check(
    forward: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    max_checks: Optional[int] = None,
    oracle_dtype=ORACLE_DTYPE,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for each scalar is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``forward(*inputs)`` may return any tensor; non-scalar outputs are
    reduced with a fixed random projection so every output element matters.
    ``max_checks`` limits how many scalars per input are perturbed (chosen
    deterministically from ``seed``); by default every scalar is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericError("grad_check inputs must be finite")
    # salted so the probe never coincides with caller data drawn from the same seed
    rng = np.random.default_rng([seed, 0x5EED])
    get_tape().clear()

    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = forward(*inputs)
    probe = rng.standard_normal(out.dims)
    loss = _scalarize(out, probe.astype(out.dtype))
    _check_tape_finite()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    originals = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(oracle_dtype)
    probe_hi = probe.astype(oracle_dtype)

    def evaluate():
        with no_grad():
            value = _scalarize(forward(*inputs), probe_hi).data.reshape(-1)[0]
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite differencing")
        return value

    worst = 0.0
    try:
        for t, a_grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                plus = evaluate()
                flat[i] = orig - eps
                minus = evaluate()
                flat[i] = orig
                numeric = float((plus - minus) / (2 * eps))
                analytic_i = float(a_grad.reshape(-1)[i])
                denom = max(abs(analytic_i), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic_i - numeric) / denom)
    finally:
        for t, data in zip(inputs, originals):
            t.data = data
    return worst
