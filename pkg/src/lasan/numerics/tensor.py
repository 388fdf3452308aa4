"""Dense tensors and the reverse-mode trace.

Operations only record themselves while a :class:`Trace` is active::

    with Trace() as tr:
        loss = ops.sum(ops.mul(w, x))
    grads = tr.backward(loss)

Outside a trace every op runs as plain numpy (inference mode). Leaf tensors
with ``requires_grad=True`` receive their gradient in ``.grad``.
"""
import threading

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_local = threading.local()


def _stack():
    if not hasattr(_local, "traces"):
        _local.traces = []
    return _local.traces


def active_trace():
    st = _stack()
    return st[-1] if st else None


class Tensor:
    """An n-dimensional float array that may participate in a trace."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ContractError(f"item() on tensor of shape {self.shape}", module="numerics")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        if self._node is None:
            raise ContractError("tensor was not produced inside a trace", module="numerics")
        return self._node.trace.backward(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops
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

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops

        return ops.getitem(self, idx)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "trace")

    def __init__(self, op, inputs, output, backward_fn, trace):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.trace = trace


class Trace:
    """Ordered record of differentiable operations executed while active.

    Nodes are appended in execution order, which is a topological order of
    the graph. :meth:`backward` walks them once in reverse and then marks the
    trace consumed.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        if self.consumed:
            raise ContractError("cannot record into a consumed trace", module="numerics")
        node = _Node(op, inputs, output, backward_fn, self)
        output._node = node
        output.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss):
        return backward(loss, self)


def backward(loss, trace=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a dict mapping each leaf tensor that received a gradient to that
    gradient array.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("loss must be a Tensor", module="numerics")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}", module="numerics")
    if trace is None:
        if loss._node is None:
            raise ContractError("loss was not produced inside a trace", module="numerics")
        trace = loss._node.trace
    if trace.consumed:
        raise ContractError("trace already consumed by a previous backward", module="numerics")
    if loss._node is None or loss._node.trace is not trace:
        raise ContractError("loss was not produced by this trace", module="numerics")

    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(trace.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise DimensionError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
                leaves[id(inp)] = inp
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
        node.backward_fn = None
    # tensor <-> node references form cycles; break them so activations are
    # freed immediately rather than at the next cyclic collection
    for node in trace.nodes:
        node.inputs = ()
        if node.output is not None:
            node.output._node = None
        node.output = None
    trace.consumed = True
    trace.nodes = []
    return {t: t.grad for t in leaves.values()}


def check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float32))
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)
