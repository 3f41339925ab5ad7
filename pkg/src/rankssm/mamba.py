"""The Mamba block: gated selective-SSM mixer with a short causal conv."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module, RMSNorm
from .ssm import SelectiveParams
from .tensor import Tensor


class MambaBlock(Module):
    """u + out_proj(scan(silu(conv(in_x))) * silu(gate)), pre-normed with RMSNorm.

    Defaults follow the reference architecture: d_inner = 2 * d_model, conv
    width 4, N = 16.
    """

    def __init__(self, d_model, rng, n_state=16, expand=2, conv_width=4, dt_rank=None):
        super().__init__()
        if d_model < 1 or expand < 1 or conv_width < 1 or n_state < 1:
            raise ConfigError(f"invalid Mamba block dims d_model={d_model} expand={expand} "
                              f"conv_width={conv_width} n_state={n_state}")
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.n_state = n_state
        self.conv_width = conv_width
        self.norm = RMSNorm(d_model)
        # fan-in scaled projections: with a flat 0.02 std the document tokens barely
        # reach the final position of a freshly initialized stack
        self.in_proj = Linear(d_model, 2 * self.d_inner, rng, bias=False, std=d_model**-0.5)
        self.conv_weight = T.parameter(rng.normal(0.0, conv_width**-0.5, size=(self.d_inner, conv_width)))
        self.conv_bias = T.parameter(np.zeros(self.d_inner))
        self.ssm = SelectiveParams(n_state, self.d_inner, rng, dt_rank=dt_rank or max(1, -(-d_model // 16)))
        self.out_proj = Linear(self.d_inner, d_model, rng, bias=False, std=self.d_inner**-0.5)

    def mixer(self, u: Tensor, mode="sequential", backward_memory="store_all") -> Tensor:
        di = self.d_inner
        xz = self.in_proj(self.norm(u))
        x, z = xz[:, :di], xz[:, di:]
        x = T.silu(T.depthwise_causal_conv(x, self.conv_weight, self.conv_bias))
        y = self.ssm(x, mode, backward_memory)
        return self.out_proj(y * T.silu(z))

    def __call__(self, u: Tensor, mode="sequential", backward_memory="store_all") -> Tensor:
        if u.ndim != 2 or u.shape[1] != self.d_model:
            raise ConfigError(f"Mamba block expects (L, {self.d_model}) input, got {u.shape}")
        return u + self.mixer(u, mode, backward_memory)


def mamba_block_forward(u: Tensor, block: MambaBlock, mode="sequential", backward_memory="store_all") -> Tensor:
    return block(u, mode, backward_memory)
