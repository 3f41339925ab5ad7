"""Parameter containers: Module, Linear, Embedding, RMSNorm and the LoRA wrapper."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    """Tracks Tensor and Module attributes in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        if params is None:
            raise RuntimeError("Module.__init__ must run before assigning attributes")
        params.pop(name, None)
        self._children.pop(name, None)
        if isinstance(value, Tensor):
            params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(p.shape) != tuple(np.shape(arr)):
                raise ValueError(f"{name}: shape {np.shape(arr)} does not match {p.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def num_parameters(self, trainable_only=False):
        return sum(p.size for _, p in self.named_parameters() if p.requires_grad or not trainable_only)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """y = x @ weight + bias, with weight stored as (d_in, d_out)."""

    def __init__(self, d_in, d_out, rng, bias=True, std=INIT_STD):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = T.parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LoRALinear(Module):
    """Frozen base projection plus a trainable low-rank update.

    effective weight = base + (alpha / rank) * down @ up, with ``up`` zero at
    init so the wrapped layer starts output-identical to the base.
    """

    def __init__(self, base: Linear, rank: int, alpha: float, rng):
        super().__init__()
        if rank < 1 or rank > min(base.d_in, base.d_out):
            raise ConfigError(f"LoRA rank must be in [1, {min(base.d_in, base.d_out)}], got {rank}")
        self.rank, self.alpha = rank, float(alpha)
        self.scaling = self.alpha / rank
        self.base = base
        for p in base.parameters():
            p.requires_grad = False
        self.down = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(base.d_in), size=(base.d_in, rank)))
        self.up = T.parameter(np.zeros((rank, base.d_out)))

    @property
    def d_in(self):
        return self.base.d_in

    @property
    def d_out(self):
        return self.base.d_out

    def effective_weight(self):
        return self.base.weight.data + self.scaling * (self.down.data @ self.up.data)

    def __call__(self, x):
        low = T.matmul(T.matmul(x, self.down), self.up)
        return self.base(x) + low * self.scaling


def lora_wrap(base: Linear, rank: int, alpha: float, rng=None) -> LoRALinear:
    return LoRALinear(base, rank, alpha, rng if rng is not None else np.random.default_rng(0))


class Embedding(Module):
    def __init__(self, num, dim, rng, std=INIT_STD):
        super().__init__()
        self.weight = T.parameter(rng.normal(0.0, std, size=(num, dim)))

    def __call__(self, ids):
        return T.getitem(self.weight, np.asarray(ids, dtype=np.int64))


class RMSNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.eps = eps
        self.weight = T.parameter(np.ones(dim))

    def __call__(self, x):
        return T.rmsnorm(x, self.weight, self.eps)
