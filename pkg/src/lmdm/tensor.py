"""Dense float tensors with a reverse-mode gradient tape.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and
at least one input has ``requires_grad`` set, the op appends a node holding
its backward rule to the tape. ``Tape.backward`` walks the nodes in reverse
order once and returns a mapping from every grad-enabled leaf to its
gradient.

Broadcasting is deliberately narrow: operands of an elementwise op must have
equal shapes, or one of them is a scalar, or one shape is a suffix of the
other (expansion over leading axes). Anything else goes through
:func:`expand` explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "GradientMap", "tensor", "parameter", "no_record",
    "precision", "count_macs", "detach", "matmul", "add", "sub", "mul",
    "scale", "neg", "silu", "exp", "log", "softplus", "square", "sum",
    "mean", "softmax", "layer_norm", "reshape", "transpose", "concat",
    "expand", "masked_fill", "rope", "take",
]

_local = threading.local()


def _tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _dtype():
    return getattr(_local, "dtype", np.float32)


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the float type used for new tensors and op results.

    Only finite-difference oracles should need 64-bit; model math is 32-bit.
    """
    prev = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def no_record():
    """Run ops without recording them on any tape."""
    prev = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class _MacCounter:
    def __init__(self):
        self.total = 0


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` inside the block."""
    counter = _MacCounter()
    prev = getattr(_local, "macs", None)
    _local.macs = counter
    try:
        yield counter
    finally:
        _local.macs = prev


class Tensor:
    """Immutable float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = arr.astype(_dtype(), copy=False)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def parameter(data) -> Tensor:
    """A grad-enabled leaf."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x))


@dataclass
class _Node:
    index: int
    output: Tensor
    inputs: tuple
    backward: Callable
    region: tuple | None = None


class GradientMap(dict):
    """Maps leaf tensors (by identity) to gradient arrays."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside it (and outside
    :func:`no_record`) are recorded when any input requires grad.
    """

    nodes: list = field(default_factory=list)
    frozen: bool = False
    _region: tuple | None = None
    _region_ids: Iterable = field(default_factory=itertools.count)

    def __enter__(self):
        if self.frozen:
            raise ContractError("tape is frozen; create a new tape")
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    @contextlib.contextmanager
    def region(self, label: str):
        """Tag nodes recorded inside the block with ``(label, instance_id)``."""
        prev = self._region
        self._region = (label, next(self._region_ids))
        try:
            yield
        finally:
            self._region = prev

    def count_regions(self, label: str) -> int:
        """Number of distinct region instances with ``label`` that recorded nodes."""
        return len({n.region for n in self.nodes if n.region and n.region[0] == label})

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor) -> GradientMap:
        if self.frozen:
            raise ContractError("backward already ran on this tape")
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        self.frozen = True
        grads = GradientMap()
        if not root.requires_grad:
            return grads
        acc: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        if root.node is None:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            g = acc.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                if inp.node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            if key in acc:
                grads[leaf] = np.array(acc[key])
        return grads


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(np.asarray(data))
    if not _recording():
        return out
    stack = _tapes()
    if not stack:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    tape = stack[-1]
    if tape.frozen:
        raise ContractError("cannot record on a frozen tape")
    node = _Node(len(tape.nodes), out, tuple(inputs), backward, tape._region)
    out.requires_grad = True
    out.node = node
    tape.nodes.append(node)
    return out


def detach(x) -> Tensor:
    """Same values, no tape participation."""
    x = _as_tensor(x)
    return Tensor._wrap(x.data)


# --------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise DimensionError(f"incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def neg(x) -> Tensor:
    return scale(x, -1.0)


def square(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    return _result(d * d, (x,), lambda g: (2.0 * g * d,))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    sig = 1.0 / (1.0 + np.exp(-d))
    return _result(d * sig, (x,), lambda g: (g * sig * (1.0 + d * (1.0 - sig)),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = _as_tensor(x)
    d = x.data
    out = np.logaddexp(0.0, d)
    return _result(out, (x,), lambda g: (g / (1.0 + np.exp(-d)),))


# --------------------------------------------------------------------------
# reductions and linear algebra


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    # accumulate in 64 bits; long float32 sums lose several ulps otherwise
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64), x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _result(out, (x,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across ``a``'s leading axes) or have the same
    leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    counter = getattr(_local, "macs", None)
    if counter is not None:
        counter.total += int(out.size) * ad.shape[-1]

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply optional ``gain``/``bias``."""
    x = _as_tensor(x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = d.shape[-1]

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _result(xhat, (x,), backward)
    if gain is not None:
        gain = _as_tensor(gain)
        if gain.shape != (n,):
            raise DimensionError(f"gain shape {gain.shape} != ({n},)")
        out = mul(out, gain)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (n,):
            raise DimensionError(f"bias shape {bias.shape} != ({n},)")
        out = add(out, bias)
    return out


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        lead = (slice(None),) * (axis % g.ndim)
        return tuple(g[lead + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, xs, backward)


def take(x, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter backward."""
    x = _as_tensor(x)
    shape, dtype = x.shape, x.data.dtype
    out = x.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.array(out), (x,), backward)


def expand(x, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); backward sums the copies."""
    x = _as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - len(old)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), backward)


def masked_fill(x, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Replace entries where ``mask`` is False with ``value``.

    ``mask`` is a boolean array broadcastable to ``x``; True keeps the entry.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.data, np.asarray(value, x.data.dtype))
    return _result(out, (x,), lambda g: (np.where(mask, g, 0.0).astype(g.dtype),))


_ROPE_BASE = 10000.0


def rope_angles(positions, dim: int, base: float = _ROPE_BASE):
    """cos/sin tables of shape ``(len(positions), dim // 2)``."""
    if dim % 2:
        raise DimensionError(f"rotary dimension must be even, got {dim}")
    inv_freq = base ** (-np.arange(0, dim // 2, dtype=np.float64) / (dim // 2))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x, positions, base: float = _ROPE_BASE) -> Tensor:
    """Rotary position encoding over the last axis (half-split pairing).

    ``x`` has shape ``(..., T, D)`` and ``positions`` length ``T``.
    """
    x = _as_tensor(x)
    d = x.shape[-1]
    if x.shape[-2] != len(positions):
        raise DimensionError(f"{len(positions)} positions for {x.shape[-2]} rows")
    cos, sin = rope_angles(positions, d, base)
    cos = cos.astype(x.data.dtype)
    sin = sin.astype(x.data.dtype)
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _result(out, (x,), backward)
