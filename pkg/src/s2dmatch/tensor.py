"""Dense tensors with a small reverse-mode autodiff tape.

Feature maps are stored channels-first as ``(C, H, W)`` arrays. Parameters
(conv kernels, batch-norm vectors) and scalar losses reuse the same class with
other ranks. Every op keeps the dtype of its inputs, so a graph built from
float64 leaves runs entirely in double precision.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus an optional gradient buffer and a backward closure.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else is cast to
        float32.
    requires_grad : bool
        Whether ``backward`` should accumulate into ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # graph construction -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        """Wrap an op result, recording ``backward`` only when some parent needs it.

        ``backward`` maps the output gradient to one gradient (or None) per
        parent, in order.
        """
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # elementwise arithmetic ---------------------------------------------

    def __add__(self, other) -> Tensor:
        if not isinstance(other, Tensor):
            return Tensor.from_op(self.data + other, (self,), lambda g: (g,))
        if other.shape != self.shape:
            raise ValueError(f"add: shape mismatch {self.shape} vs {other.shape}")
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __mul__(self, scalar) -> Tensor:
        if isinstance(scalar, Tensor):
            raise TypeError("only scalar multiplication is supported")
        s = self.data.dtype.type(scalar)
        return Tensor.from_op(self.data * s, (self,), lambda g: (g * s,))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return self * -1.0

    def sum(self) -> Tensor:
        shape = self.shape
        return Tensor.from_op(
            np.asarray(self.data.sum(), dtype=self.dtype),
            (self,),
            lambda g: (np.broadcast_to(g, shape).copy(),),
        )

    def mean(self) -> Tensor:
        return self.sum() * (1.0 / self.data.size)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else Tensor(x.data.astype(dtype))
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def add_all(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of a non-empty sequence of equally shaped tensors, left to right."""
    if not tensors:
        raise ValueError("add_all needs at least one tensor")
    out = tensors[0]
    for t in tensors[1:]:
        out = out + t
    return out


# raw interchange files ------------------------------------------------------

TENSOR_MAGIC = b"S2DT"
TENSOR_VERSION = 1


class TensorFormatError(ValueError):
    pass


def save_tensor(path, tensor: Tensor | np.ndarray) -> None:
    """Write a rank-3 tensor as ``S2DT`` + u32 version + 3*u32 shape + f32 LE payload."""
    from ._atomic import atomic_write_bytes

    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.ndim != 3:
        raise ValueError(f"tensor files hold (C, H, W) arrays, got shape {data.shape}")
    header = TENSOR_MAGIC + struct.pack("<4I", TENSOR_VERSION, *data.shape)
    atomic_write_bytes(path, header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise TensorFormatError(f"{path}: truncated header")
    version, c, h, w = struct.unpack("<4I", raw[4:20])
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    n = c * h * w
    if len(raw) != 20 + 4 * n:
        raise TensorFormatError(f"{path}: payload is {len(raw) - 20} bytes, expected {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", offset=20, count=n).astype(np.float32)
    return Tensor(data.reshape(c, h, w))
