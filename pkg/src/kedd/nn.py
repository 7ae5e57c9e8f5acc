"""Parameter containers and small building blocks on top of the autodiff ops."""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np

from .autodiff import Tensor, apply

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "LayerNorm",
    "Dropout",
    "Embedding",
    "RngPool",
    "kaiming_uniform",
]


def kaiming_uniform(rng, fan_in, shape):
    """Uniform fan-in initialization, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class RngPool:
    """Named random streams derived from one root seed.

    Each component (init, dropout, masking, shuffling, ...) pulls its own
    generator so ablations only perturb the streams they actually use.
    """

    def __init__(self, root_seed):
        self.root_seed = int(root_seed)
        self._streams = {}

    def get(self, name):
        if name not in self._streams:
            tag = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence(entropy=(self.root_seed, tag))
            self._streams[name] = np.random.default_rng(seq)
        return self._streams[name]


class Parameter:
    """A trainable tensor with a dotted name and its initialization rule."""

    __slots__ = ("tensor", "name", "init_spec")

    def __init__(self, values, init_spec="unspecified", name=""):
        self.tensor = Tensor(values, requires_grad=True)
        self.name = name
        self.init_spec = init_spec

    @property
    def values(self):
        return self.tensor.values

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.tensor.shape})"


class Module:
    """Minimal module tree: tracks parameters, buffers, and train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, values):
        """Non-trainable state saved with the model (e.g. frozen embeddings)."""
        arr = np.asarray(values, dtype=np.float64, order="C")
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix=f"{prefix}{name}.")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, mode=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", bool(mode))
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def stamp_parameter_names(self):
        """Assign dotted path names; names must be unique within the model."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name '{name}'")
            seen.add(name)
            p.name = name
        return self

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.tensor.values.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        extra = set(state) - (set(own) | set(bufs))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64, order="C")
            if arr.shape != p.tensor.values.shape:
                raise ValueError(f"shape mismatch for '{name}'")
            p.tensor.values[...] = arr
        for name, b in bufs.items():
            arr = np.asarray(state[name], dtype=np.float64, order="C")
            if arr.shape != b.shape:
                raise ValueError(f"shape mismatch for buffer '{name}'")
            b[...] = arr


class Linear(Module):
    """y = x @ W + b with W stored (in_dim, out_dim)."""

    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(
            kaiming_uniform(rng, in_dim, (in_dim, out_dim)),
            init_spec=f"kaiming_uniform(fan_in={in_dim})",
        )
        self.bias = Parameter(np.zeros(out_dim), init_spec="zeros") if bias else None

    def __call__(self, x):
        out = apply("matmul", [x, self.weight.tensor])
        if self.bias is not None:
            out = apply("add", [out, self.bias.tensor])
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gain = Parameter(np.ones(dim), init_spec="ones")
        self.shift = Parameter(np.zeros(dim), init_spec="zeros")

    def __call__(self, x):
        return apply(
            "layernorm", [x, self.gain.tensor, self.shift.tensor], {"eps": self.eps}
        )


class Dropout(Module):
    """Inverted dropout: scales kept units at train time, identity in eval."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, rng=None):
        return apply(
            "dropout",
            [x],
            {"rate": self.rate, "training": self.training, "rng": rng},
        )


class Embedding(Module):
    def __init__(self, num_embeddings, dim, rng):
        super().__init__()
        self.num_embeddings = num_embeddings
        self.dim = dim
        bound = np.sqrt(3.0 / dim)
        self.table = Parameter(
            rng.uniform(-bound, bound, size=(num_embeddings, dim)),
            init_spec=f"uniform(+-sqrt(3/{dim}))",
        )

    def __call__(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return apply("embedding_lookup", [self.table.tensor], {"indices": idx})
