"""Tensor value type, recording tape and reverse-mode backward pass.

Tensors wrap C-contiguous float64 numpy arrays. Differentiable primitives
(see :mod:`cunet.autodiff.ops`) append a :class:`Node` to the active
:class:`Tape` whenever one of their inputs requires a gradient. Because nodes
are appended in execution order the tape is already topologically sorted,
so :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import contextvars
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericFault

DTYPE = np.float64

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "cunet_active_tape", default=None
)
# Set by efficiency.CostMeter; primitives report FLOPs through charge().
_cost_hook: contextvars.ContextVar[Optional[Callable[[str, float], None]]] = (
    contextvars.ContextVar("cunet_cost_hook", default=None)
)


_cost_scope: contextvars.ContextVar[str] = contextvars.ContextVar("cunet_cost_scope", default="static")


def charge(kind: str, flops: float) -> None:
    hook = _cost_hook.get()
    if hook is not None:
        hook(kind, flops)


def current_cost_scope() -> str:
    return _cost_scope.get()


class cost_scope:
    """Tag FLOPs charged inside the block (e.g. ``"ode"`` for integration)."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self._token = _cost_scope.set(self.name)

    def __exit__(self, *exc):
        _cost_scope.reset(self._token)


class Tensor:
    """Dense N-D array of 64-bit reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericFault(f"non-finite values in {what} of shape {self.shape}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic dispatches to the differentiable primitives.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    forward: Callable[..., np.ndarray]


@dataclass
class Tape:
    """Records differentiable primitive applications while active.

    Use as a context manager; only one tape may be active per context and a
    tape is never shared between threads.
    """

    nodes: list = field(default_factory=list)
    visit_count: int = 0
    _grads: dict = field(default_factory=dict, repr=False)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. any recorded tensor."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def replay(self) -> bool:
        """Re-run every node's forward from its recorded inputs.

        Returns True when every recomputed output equals the recorded one
        bit for bit.
        """
        for node in self.nodes:
            out = node.forward(*[inp.data for inp in node.inputs])
            if out.shape != node.output.shape or not np.array_equal(out, node.output.data):
                return False
        return True


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def no_tape():
    """Context manager that suspends recording (e.g. for sampling)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp, forward) -> Tensor:
    """Wrap a primitive's output, appending a node when gradients are needed."""
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), result, vjp, forward))
    return result


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if g.shape != t.data.shape:
        raise ContractError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    prev = grads.get(key)
    grads[key] = g if prev is None else prev + g


def backward(tape: Tape, loss: Tensor, params: Optional["ParamStore"] = None) -> dict:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a map from parameter name to gradient array for every trainable
    entry of ``params``; parameters the loss does not depend on get zeros.
    Gradients for other tensors are available via :meth:`Tape.grad_of`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    tape.visit_count = 0
    for node in reversed(tape.nodes):
        tape.visit_count += 1
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.vjp(g_out)
        for inp, g in zip(node.inputs, in_grads):
            if g is not None and inp.requires_grad:
                _accumulate(grads, inp, g)
    tape._grads = grads
    if params is None:
        return {}
    return {
        name: grads[id(t)] if id(t) in grads else np.zeros_like(t.data)
        for name, t in params.trainable_items()
    }


class ParamStore:
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def trainable_items(self):
        return [(k, t) for k, t in self._entries.items() if t.requires_grad]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].requires_grad

    def set_trainable(self, name: str, flag: bool) -> None:
        self._entries[name].requires_grad = flag

    def num_params(self) -> int:
        return sum(t.size for _, t in self.trainable_items())

    def names(self, prefix: str = "") -> list:
        return [k for k in self._entries if k.startswith(prefix)]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._entries.items():
            out.add(k, t.data.copy(), trainable=t.requires_grad)
        return out

    def state(self) -> dict:
        return {k: t.data for k, t in self._entries.items()}
