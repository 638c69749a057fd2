"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a backward closure on the result; calling
:meth:`Tensor.backward` on a scalar builds a :class:`Tape` (the reachable
operations in topological order) and replays the adjoints in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from tmloss.errors import NumericalError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_settings = {"dtype": np.dtype(np.float32), "checked": False, "grad_enabled": True}


def get_default_dtype() -> np.dtype:
    return _settings["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _settings["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the default floating dtype (``float32``/``float64``)."""
    previous = _settings["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _settings["dtype"] = previous


def is_checked() -> bool:
    return _settings["checked"]


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Enable domain checks and non-finite detection on every operation."""
    previous = _settings["checked"]
    _settings["checked"] = enabled
    try:
        yield
    finally:
        _settings["checked"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them for differentiation."""
    previous = _settings["grad_enabled"]
    _settings["grad_enabled"] = False
    try:
        yield
    finally:
        _settings["grad_enabled"] = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    # construction of interior nodes -------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _settings["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        if _settings["checked"] and not np.all(np.isfinite(data)):
            raise NumericalError(f"operation '{op}' produced a non-finite value")
        return out

    # basic properties ----------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # differentiation -----------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        Without ``grad`` the tensor must be a scalar.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        Tape.record(self).replay(grad, retain_graph=retain_graph)

    # operator sugar (implementations live in functional) ----------------
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __rtruediv__(self, other):
        return F.div(other, self)

    def __neg__(self):
        return F.neg(self)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return F.max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return F.transpose(self, None)

    def exp(self):
        return F.exp(self)

    def log(self):
        return F.log(self)

    def sqrt(self):
        return F.sqrt(self)

    def relu(self):
        return F.relu(self)


class Tape:
    """Operations reachable from an output, in topological order.

    Replaying walks the list backwards, so every node's adjoint is complete
    before it is propagated to its inputs. A tape can be replayed once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray, retain_graph: bool = False) -> None:
        """Propagate adjoints; leaves accumulate into ``.grad``, interior nodes
        receive this pass's adjoint (so a retained graph can be replayed again)."""
        if self.consumed:
            raise RuntimeError("tape already replayed; run the forward pass again")
        self.consumed = True
        if not self.nodes:
            return
        adjoints: dict[int, np.ndarray] = {id(self.nodes[-1]): _fit(seed, self.nodes[-1])}
        for node in reversed(self.nodes):
            g_node = adjoints.pop(id(node), None)
            if g_node is None:
                continue
            if node.op == "leaf":
                _accumulate(node, g_node)
                continue
            node.grad = g_node
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(g_node)):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + _fit(g, parent)
                else:
                    adjoints[key] = _fit(g, parent)
            if not retain_graph:
                node._backward = None
                node._parents = ()


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    g = np.asarray(g)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    return np.array(g, dtype=t.data.dtype, copy=True) if g.dtype != t.data.dtype or not g.flags.writeable else g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


from tmloss.autodiff import functional as F  # noqa: E402  (circular: functional builds Tensors)
