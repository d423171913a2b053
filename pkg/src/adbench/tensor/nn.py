"""Module containers and the layers the three architectures are built from."""
import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or DEFAULT_DTYPE)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and buffer in place."""
        for m in self.modules():
            for name, p in m._params.items():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def state_dict(self):
        """Named parameter and buffer arrays (views, not copies)."""
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        owners = {}
        for m_prefix, m in self._named_modules():
            for bname in m._buffers:
                owners[m_prefix + bname] = (m, bname)
        missing = (set(params) | set(owners)) - set(state)
        if missing:
            raise KeyError(f"state is missing blocks: {sorted(missing)}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(arr.shape):
                    raise ValueError(f"shape mismatch for {name}: {p.shape} vs {arr.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            elif name in owners:
                m, bname = owners[name]
                m.register_buffer(bname, np.array(arr, dtype=m._buffers[bname].dtype))
            else:
                raise KeyError(f"unexpected block {name}")

    def _named_modules(self, prefix=""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m._named_modules(prefix + name + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.weight = Parameter(kaiming(rng, (d_out, d_in), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=False):
        super().__init__()
        kh, kw = (k, k) if isinstance(k, int) else k
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming(rng, (c_out, c_in, kh, kw), c_in * kh * kw))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(c, dtype=DEFAULT_DTYPE))

    def forward(self, x):
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise F.ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self._order = []
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
            self._order.append(layer)

    def forward(self, x):
        for layer in self._order:
            x = layer(x)
        return x


class MultiHeadSelfAttention(Module):
    def __init__(self, d, heads, rng):
        super().__init__()
        if heads < 1 or d % heads:
            raise F.ConfigError(f"token dim {d} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.last_attention = None

    def forward(self, x):
        y, attn = F.multi_head_self_attention(
            x, self.q.weight, self.k.weight, self.v.weight, self.out.weight,
            self.q.bias, self.k.bias, self.v.bias, self.out.bias, self.heads,
        )
        self.last_attention = attn.data
        return y


class TransformerLayer(Module):
    """Post-norm encoder layer: LN(x + MHSA(x)), then LN(x + FFN(x))."""

    def __init__(self, d, heads, d_ff, rng, dropout=0.0):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)
        self.norm2 = LayerNorm(d)
        self.drop = Dropout(dropout, rng)

    def forward(self, x):
        x = self.norm1(x + self.drop(self.attn(x)))
        h = self.ff2(F.relu(self.ff1(x)))
        return self.norm2(x + self.drop(h))
