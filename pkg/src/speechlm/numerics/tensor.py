"""Dense arrays with a reverse-mode gradient tape.

A :class:`Tape` records every kernel evaluated while it is active, in
execution order (which is already a topological order).  Calling
:meth:`Tape.gradient` walks the record backwards once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a kernel receives operands of incompatible shape."""

    def __init__(self, kernel: str, *shapes: tuple[int, ...], detail: str = ""):
        self.kernel = kernel
        self.shapes = shapes
        msg = f"{kernel}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised by a checking tape when a kernel produces NaN or Inf."""

    def __init__(self, kernel: str, where: str = "forward"):
        self.kernel = kernel
        super().__init__(f"non-finite value in {kernel} ({where})")


class Tensor:
    """A numpy array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        # True when some recorded node produced this tensor or it requires grad
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the kernels live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class Node:
    kernel: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records kernels evaluated inside ``with tape:``.

    ``check_finite`` makes every recorded forward and backward result get
    scanned for NaN/Inf, raising :class:`NonFiniteError` naming the kernel.
    """

    check_finite: bool = False
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def gradient(
        self,
        output: Tensor,
        wrt: Mapping[str, Tensor] | Iterable[Tensor],
    ) -> dict:
        """Gradients of scalar ``output`` with respect to ``wrt``.

        Returns a dict keyed like ``wrt`` (names for a mapping, the tensors'
        positions for a sequence).  Tensors the output does not depend on get
        exact zeros.
        """
        if output.data.size != 1:
            raise ShapeError("gradient", output.shape, detail="output must be scalar")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t._tracked:
                    continue
                if self.check_finite and not np.all(np.isfinite(gi)):
                    raise NonFiniteError(node.kernel, "backward")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if isinstance(wrt, Mapping):
            items = list(wrt.items())
        else:
            items = list(enumerate(wrt))
        out = {}
        for key, t in items:
            g = grads.get(id(t))
            out[key] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
        return out


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(
    kernel: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a kernel result, registering it on the active tape when needed."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(kernel)
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(Node(kernel, out, tuple(inputs), backward))
    return out
