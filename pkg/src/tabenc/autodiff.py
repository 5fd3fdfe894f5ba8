"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record, per operation, a closure that propagates
the output gradient back to the inputs. ``backward`` on a scalar walks the
recorded graph once in reverse topological order. Everything runs in float64
with deterministic sequential reductions, so repeated runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class NoTape(ValueError):
    """Backward was requested on a tensor with no recorded graph."""


class NonFinite(ValueError):
    """NaN or Inf crossed an operation boundary."""


ArrayLike = Union[np.ndarray, float, int, Sequence]


def _as_array(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("tensor data contains NaN or Inf")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional gradient graph node.

    ``requires_grad`` marks leaves whose gradients should be accumulated;
    intermediate results inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing --

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar, filling ``grad`` on every tensor
        that requires gradients. Visits each node exactly once."""
        if self.data.size != 1:
            raise NotScalar(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise NoTape("no gradient graph is attached to this tensor")
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators --

    def _lift(self, other: ArrayLike) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, self._lift(other))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return mul(self, Tensor(-1.0))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, -self._lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(-self, self._lift(other))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, self._lift(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._make(data, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return Tensor._make(np.asarray(data), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return Tensor._make(data, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(x.data, a, b)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.swapaxes(g, a, b))

    return Tensor._make(data, (x,), backward)


def index_axis0(x: Tensor, i: int) -> Tensor:
    """Select subtensor ``x[i]`` along the leading axis."""
    if not 0 <= i < x.shape[0]:
        raise ShapeMismatch(f"index {i} out of range for extent {x.shape[0]}")
    data = x.data[i]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[i] = g
            x._accumulate(full)

    return Tensor._make(data.copy(), (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * data)

    return Tensor._make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g / x.data)

    return Tensor._make(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * 0.5 / data)

    return Tensor._make(data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return Tensor._make(data, (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth tanh-form gaussian error linear unit."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return Tensor._make(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; slices sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x._accumulate(data * (g - dot))

    return Tensor._make(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalize slices along ``axis`` to zero mean and unit variance (with
    ``eps`` inside the square root), then apply the affine gain and bias."""
    extent = x.shape[axis]
    if gain.shape != (extent,) or bias.shape != (extent,):
        raise ShapeMismatch(
            f"gain/bias must have shape ({extent},), got {gain.shape} and {bias.shape}")
    mu = tmean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=axis, keepdims=True)
    inv = div(Tensor(1.0), sqrt(var + Tensor(eps)))
    normed = centered * inv
    if axis not in (-1, x.ndim - 1):
        shape = [1] * x.ndim
        shape[axis] = extent
        return normed * reshape(gain, tuple(shape)) + reshape(bias, tuple(shape))
    return normed * gain + bias


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm."""
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True))
    return div(x, norm)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack rank-k tensors along a new leading axis."""
    data = np.stack([p.data for p in parts])
    offsets = list(range(len(parts)))

    def backward(g: np.ndarray) -> None:
        for i, p in zip(offsets, parts):
            if p.requires_grad:
                p._accumulate(g[i])

    return Tensor._make(data, tuple(parts), backward)


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from ``loss`` and collect gradients for ``params``.
    Parameters the loss never touched get zero gradients."""
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """Adaptive-moment estimation state with the standard defaults."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: AdamState) -> None:
    """One in-place Adam update of every parameter tensor."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- checkpoint format --------------------------------------------------------

_MAGIC = b"TENC"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: str, config: dict, params: dict[str, Tensor]) -> None:
    """Write named tensors after a header carrying the format version and the
    config (JSON plus its digest). Round trip is bit-exact."""
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    digest = hashlib.sha256(blob).hexdigest().encode("ascii")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.ndim))
            for extent in p.shape:
                f.write(struct.pack("<Q", extent))
            f.write(p.data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> tuple[dict, dict[str, Tensor]]:
    with open(path, "rb") as f:
        def take(n: int) -> bytes:
            chunk = f.read(n)
            if len(chunk) != n:
                raise CheckpointError("truncated checkpoint")
            return chunk

        if take(4) != _MAGIC:
            raise CheckpointError("bad magic")
        (version,) = struct.unpack("<I", take(4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported version {version}")
        (dlen,) = struct.unpack("<I", take(4))
        digest = take(dlen).decode("ascii")
        (clen,) = struct.unpack("<I", take(4))
        blob = take(clen)
        if hashlib.sha256(blob).hexdigest() != digest:
            raise CheckpointError("config digest mismatch")
        config = json.loads(blob.decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape).copy()
            t = Tensor(arr)
            t.requires_grad = True
            params[name] = t
        return config, params
