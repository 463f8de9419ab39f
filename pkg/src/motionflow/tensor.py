"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is recorded on the tensors themselves: every op output keeps
references to its parent tensors plus a closure holding the local partials
(a vector-Jacobian product). Parents are created before their children, so
the record is topologically ordered by construction. ``backward`` replays
the record once in reverse order and marks every interior node consumed;
touching a consumed node again raises ``TapeReuseError``.

Conventions (one each, stated and tested):
  * everything is float64,
  * ``layer_norm`` uses population variance with eps=1e-5 inside the sqrt,
  * the L1 / abs subgradient at exactly 0 is 0,
  * tensors are immutable after construction (buffers are frozen); only
    ``grad`` buffers mutate, during a single backward pass.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "concat",
    "stack",
    "softmax",
    "layer_norm",
    "gelu",
    "cosine_similarity",
    "l1_loss",
    "backward",
    "custom_op",
    "no_grad",
    "set_debug_finite",
    "ShapeError",
    "NonFiniteError",
    "TapeReuseError",
    "DegenerateMaskError",
    "ZeroVectorError",
]

LAYER_NORM_EPS = 1e-5

_grad_enabled = True
_debug_finite = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor buffer."""


class TapeReuseError(RuntimeError):
    """A backward pass touched an already-consumed graph."""


class DegenerateMaskError(ValueError):
    """A softmax row has every entry masked out."""


class ZeroVectorError(ValueError):
    """cosine_similarity received a zero-norm vector."""


def set_debug_finite(enabled: bool) -> None:
    """Toggle the post-op NaN/Inf sweep (off by default; creation always checks)."""
    global _debug_finite
    _debug_finite = bool(enabled)


@contextmanager
def no_grad():
    """Suspend graph recording inside the block (sampling / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with NaN/Inf entries")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._consumed = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        """Read-only view of the buffer."""
        return self.data

    def __float__(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})\n{self.data!r}"

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data
        return _from_op(
            out_data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out_data = self.data - other.data
        return _from_op(
            out_data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data
        return _from_op(
            out_data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data
        return _from_op(
            out_data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        return _from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** p
        return _from_op(
            out_data,
            (self,),
            lambda g: (g * p * self.data ** (p - 1),),
            "pow",
        )

    def __matmul__(self, other):
        return matmul(self, Tensor._lift(other))

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _from_op(
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(old),),
            "reshape",
        )

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return _from_op(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inv),),
            "transpose",
        )

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T expects a 2-D tensor, got shape {self.shape}")
        return self.transpose((1, 0))

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return _from_op(self.data[idx], (self,), vjp, "getitem")

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return _from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return _from_op(out_data, (self,), lambda g: (g * out_data,), "exp")

    def log(self):
        return _from_op(np.log(self.data), (self,), lambda g: (g / self.data,), "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return _from_op(out_data, (self,), lambda g: (g / (2.0 * out_data),), "sqrt")

    def tanh(self):
        out_data = np.tanh(self.data)
        return _from_op(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")

    def abs(self):
        # subgradient at 0 is 0 (np.sign(0) == 0)
        return _from_op(np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),), "abs")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _from_op(data: np.ndarray, parents, vjp, op_name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if _debug_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output of op '{op_name}'")
    if arr.base is not None or arr.flags.writeable:
        arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    out.data = arr
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def custom_op(data, parents, vjp, name: str = "custom") -> Tensor:
    """Register a hand-rolled op node (used by tests to plant wrong rules)."""
    return _from_op(data, tuple(Tensor._lift(p) for p in parents), vjp, name)


# -- constructors -------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D in the base contract, stacked (batched) dims allowed."""
    a = Tensor._lift(a)
    b = Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _from_op(a.data @ b.data, (a, b), vjp, "matmul")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


# -- fused ops with hand-written partials --------------------------------------


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, numerically stabilized by max-subtraction.

    ``mask`` is a boolean array broadcastable to ``x.shape``; masked entries
    come out exactly 0 and each row renormalizes over its unmasked entries.
    """
    x = Tensor._lift(x)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=-1).all():
            raise DegenerateMaskError("softmax mask leaves at least one row fully masked")
        xm = np.where(m, x.data, -np.inf)
    else:
        xm = x.data
    shifted = xm - xm.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _from_op(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1; no affine."""
    x = Tensor._lift(x)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _from_op(xhat, (x,), vjp, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = Tensor._lift(x)
    inv_sqrt2 = 0.7071067811865476
    inv_sqrt2pi = 0.3989422804014327
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out_data = x.data * cdf

    def vjp(g):
        pdf = inv_sqrt2pi * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _from_op(out_data, (x,), vjp, "gelu")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, as a differentiable scalar."""
    a = Tensor._lift(a)
    b = Tensor._lift(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity expects equal-shape vectors, got {a.shape} and {b.shape}")
    if not np.linalg.norm(a.data) > 0 or not np.linalg.norm(b.data) > 0:
        raise ZeroVectorError("cosine_similarity is undefined for zero-norm vectors")
    na = (a * a).sum().sqrt()
    nb = (b * b).sum().sqrt()
    return (a * b).sum() / (na * nb)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements (subgradient 0 at kinks)."""
    pred = Tensor._lift(pred)
    target = Tensor._lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


# -- backward -------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar. The pass consumes the recorded graph: re-running
    backward through any of its interior nodes raises ``TapeReuseError``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeReuseError("this graph has already been backpropagated")

    # Iterative post-order topological sort (graphs can be deep).
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = discovered, 1 = finished
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid not in state:
            state[nid] = 0
            for p in node._parents:
                if id(p) not in state:
                    stack.append(p)
        else:
            stack.pop()
            if state[nid] == 0:
                state[nid] = 1
                topo.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            if node._consumed:
                raise TapeReuseError("backward re-entered a consumed graph node")
            node._consumed = True
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    loss._consumed = True
