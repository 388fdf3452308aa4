"""Parameter containers and the layers LASAN is built from."""
import math
from collections import OrderedDict

import numpy as np

from ..errors import ConfigurationError
from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. ``requires_grad=False`` means frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad=True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Minimal module tree: named parameters, buffers, children, train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        """Copies of all parameters and buffers keyed by dotted name."""
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        for n, b in self.named_buffers():
            state[n] = b.copy()
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        if strict:
            expected = set(params) | set(buffers)
            missing = expected - set(state)
            extra = set(state) - expected
            if missing or extra:
                raise ConfigurationError(
                    f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}", module="numerics"
                )
        for n, arr in state.items():
            if n in params:
                if params[n].shape != arr.shape:
                    raise ConfigurationError(f"{n}: shape {arr.shape} != {params[n].shape}", module="numerics")
                params[n].data = np.array(arr, dtype=params[n].dtype, copy=True)
            elif n in buffers:
                buffers[n][...] = arr
        return self

    def astype(self, dtype):
        """Cast parameters and buffers in place (used by the float64 gradient check)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_out, n_in)))
        self.bias = Parameter(_uniform(rng, bound, (n_out,))) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel_size, rng, stride=1, padding=0):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel_size)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,)))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"embed dim {dim} not divisible by {heads} heads", module="numerics")
        self.heads = heads
        bound = 1.0 / math.sqrt(dim)
        for name in ("q", "k", "v", "o"):
            setattr(self, "w" + name, Parameter(_uniform(rng, bound, (dim, dim))))
            setattr(self, "b" + name, Parameter(np.zeros(dim, np.float32)))

    def forward(self, x):
        return ops.multi_head_attention(x, self.heads, {n: p for n, p in self._params.items()})


class TransformerEncoderLayer(Module):
    """Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim, heads, ffn_dim, dropout, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ffn_dim, rng)
        self.ff2 = Linear(ffn_dim, dim, rng)
        self.dropout = dropout

    def forward(self, x, rng=None):
        h = ops.dropout(self.attn(self.norm1(x)), self.dropout, rng, self.training)
        x = ops.add(x, h)
        h = ops.relu(self.ff1(self.norm2(x)))
        h = ops.dropout(h, self.dropout, rng, self.training)
        h = ops.dropout(self.ff2(h), self.dropout, rng, self.training)
        return ops.add(x, h)
