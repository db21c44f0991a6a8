"""Evaluate kernel compositions, collect gradients, and check them numerically."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tape, Tensor

Program = Callable[[dict[str, Tensor], "np.random.Generator | None"], Tensor]


def _as_tensors(inputs: Mapping[str, np.ndarray | Tensor], requires_grad: bool) -> dict[str, Tensor]:
    out = {}
    for name, value in inputs.items():
        data = value.data if isinstance(value, Tensor) else value
        out[name] = Tensor(np.array(data, copy=True), requires_grad=requires_grad, name=name)
    return out


def eval_graph(
    inputs: Mapping[str, np.ndarray | Tensor],
    program: Program,
    seed: int | None = None,
) -> Tensor:
    """Run ``program`` on fresh copies of ``inputs``.

    The program receives the named tensors and a generator seeded from
    ``seed`` (``None`` disables stochastic kernels such as dropout).
    """
    rng = None if seed is None else np.random.default_rng(seed)
    return program(_as_tensors(inputs, requires_grad=False), rng)


def grad_graph(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar output for every named leaf on ``tape`` that requires grad."""
    if output.data.size != 1:
        raise ShapeError("grad_graph", output.shape, detail="output must be scalar")
    leaves: dict[str, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad:
                leaves.setdefault(t.name if t.name is not None else f"#{id(t)}", t)
    return tape.gradient(output, leaves)


def value_and_grad(
    inputs: Mapping[str, np.ndarray | Tensor],
    program: Program,
    seed: int | None = None,
    check_finite: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    tensors = _as_tensors(inputs, requires_grad=True)
    rng = None if seed is None else np.random.default_rng(seed)
    with Tape(check_finite=check_finite) as tape:
        out = program(tensors, rng)
    if out.data.size != 1:
        raise ShapeError("value_and_grad", out.shape, detail="output must be scalar")
    return float(out.data), tape.gradient(out, tensors)


def _scalar(inputs, program, seed) -> float:
    out = eval_graph(inputs, program, seed)
    value = float(out.data)
    if not np.isfinite(value):
        raise NonFiniteError("program output")
    return value


def finite_diff_check(
    program: Program,
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-5,
    seed: int | None = None,
    max_coords: int | None = None,
    coord_seed: int = 0,
) -> dict[str, float]:
    """Max relative error between tape gradients and central differences.

    For each input the error is
    ``max |g - n| / max(|g|, |n|, 1e-8)`` over its coordinates, where ``n``
    is the fourth-order central difference.  ``max_coords`` caps the number
    of coordinates probed per input (chosen at random); ``None`` checks all.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-7, 1e-4]")
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = value_and_grad(base, program, seed=seed, check_finite=True)
    pick = np.random.default_rng(coord_seed)
    errors: dict[str, float] = {}
    for name, x in base.items():
        flat_idx = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            flat_idx = np.sort(pick.choice(x.size, size=max_coords, replace=False))
        analytic = grads[name].reshape(-1)
        worst = 0.0
        for i in flat_idx:
            probe = dict(base)
            vals = []
            for k in (-2, -1, 1, 2):
                xp = x.copy().reshape(-1)
                xp[i] += k * step
                probe[name] = xp.reshape(x.shape)
                vals.append(_scalar(probe, program, seed))
            numeric = (8 * (vals[2] - vals[1]) - (vals[3] - vals[0])) / (12 * step)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors
