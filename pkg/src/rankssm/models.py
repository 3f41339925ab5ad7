"""Backbones (Mamba stack, causal and bidirectional attention stacks), the
linear ranking head, and the config file format that describes them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputFormatError
from .mamba import MambaBlock
from .nn import Embedding, Linear, LoRALinear, Module, RMSNorm
from .tensor import Tensor
from .tokenizer import CLS, EOS, VOCAB_SIZE

KINDS = ("mamba", "attention-causal", "attention-bidirectional")
MASK_VALUE = -1e30


@dataclass
class BackboneConfig:
    kind: str = "mamba"
    n_layers: int = 2
    d_model: int = 64
    n_state: int = 16
    n_heads: int = 4
    max_len: int = 512
    seed: int = 0
    lora_rank: int = 0
    lora_alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.n_layers < 1 or self.d_model < 1 or self.max_len < 1:
            raise ConfigError("n_layers, d_model and max_len must be positive")
        if self.kind == "mamba" and self.n_state < 1:
            raise ConfigError("n_state must be positive")
        if self.kind != "mamba" and (self.n_heads < 1 or self.d_model % self.n_heads):
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")

    @property
    def causal(self):
        return self.kind != "attention-bidirectional"

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "BackboneConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"model config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"model config line {lineno}: unknown key {key!r}")
            conv = {"int": int, "float": float}.get(types[key], str)
            try:
                kw[key] = conv(val)
            except ValueError:
                raise ConfigError(f"model config line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**kw)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "BackboneConfig":
        return cls.from_text(Path(path).read_text())


class AttentionBlock(Module):
    """Pre-norm multi-head self-attention followed by a SiLU MLP."""

    def __init__(self, d_model, n_heads, causal, rng):
        super().__init__()
        self.d_model, self.n_heads, self.causal = d_model, n_heads, causal
        self.norm1 = RMSNorm(d_model)
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.norm2 = RMSNorm(d_model)
        self.fc1 = Linear(d_model, 4 * d_model, rng)
        self.fc2 = Linear(4 * d_model, d_model, rng)

    def attend(self, u: Tensor) -> Tensor:
        L, d = u.shape
        H = self.n_heads
        dh = d // H
        qkv = T.transpose(T.reshape(self.qkv(u), (L, 3, H, dh)), (1, 2, 0, 3))  # (3, H, L, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
        if self.causal:
            scores = scores + np.triu(np.full((L, L), MASK_VALUE), k=1)
        att = T.matmul(T.softmax_lastdim(scores), v)  # (H, L, dh)
        return self.out(T.reshape(T.transpose(att, (1, 0, 2)), (L, d)))

    def __call__(self, u: Tensor) -> Tensor:
        u = u + self.attend(self.norm1(u))
        return u + self.fc2(T.silu(self.fc1(self.norm2(u))))


class Backbone(Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.embed = Embedding(VOCAB_SIZE, d, rng)
        if config.kind == "mamba":
            self.layers = [MambaBlock(d, rng, n_state=config.n_state) for _ in range(config.n_layers)]
        else:
            self.pos = Embedding(config.max_len, d, rng)
            self.layers = [AttentionBlock(d, config.n_heads, config.causal, rng) for _ in range(config.n_layers)]
        self.norm_f = RMSNorm(d)
        if config.lora_rank:
            self.apply_lora(config.lora_rank, config.lora_alpha or float(config.lora_rank), rng)

    def apply_lora(self, rank, alpha, rng):
        """Freeze every backbone weight and attach LoRA factors to the block projections."""
        for p in self.parameters():
            p.requires_grad = False
        names = ("in_proj", "out_proj") if self.config.kind == "mamba" else ("qkv", "out", "fc1", "fc2")
        for layer in self.layers:
            for name in names:
                setattr(layer, name, LoRALinear(getattr(layer, name), rank, alpha, rng))

    def __call__(self, ids, mode="sequential", backward_memory="store_all") -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("ids must be a non-empty 1-D sequence")
        if len(ids) > self.config.max_len:
            raise ValueError(f"sequence of {len(ids)} tokens exceeds max_len={self.config.max_len}")
        h = self.embed(ids)
        if self.config.kind == "mamba":
            for layer in self.layers:
                h = layer(h, mode, backward_memory)
        else:
            h = h + self.pos(np.arange(len(ids)))
            for layer in self.layers:
                h = layer(h)
        return self.norm_f(h)


def backbone_forward(ids, backbone: Backbone, **kw) -> Tensor:
    return backbone(ids, **kw)


class RankingHead(Module):
    """Single linear layer mapping one d_model vector to a relevance score."""

    def __init__(self, d_model, rng):
        super().__init__()
        self.weight = T.parameter(rng.normal(0.0, 0.02, size=(d_model, 1)))
        self.bias = T.parameter(np.zeros(1))

    def __call__(self, rep: Tensor) -> Tensor:
        return T.reshape(T.matmul(T.reshape(rep, (1, -1)), self.weight) + self.bias, ())


class Reranker(Module):
    """f(q, d) -> s: backbone plus head on the EOS (causal) or CLS (bidirectional) position."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.head = RankingHead(config.d_model, np.random.default_rng([config.seed, 1]))

    def score(self, ids, mode="sequential") -> Tensor:
        return score(ids, self.backbone, self.head, mode)


def score(ids, backbone: Backbone, head: RankingHead, mode="sequential") -> Tensor:
    ids = list(ids)
    if backbone.config.causal:
        if not ids or ids[-1] != EOS:
            raise InputFormatError("causal/mamba input must end with [EOS]")
        pos = len(ids) - 1
    else:
        if not ids or ids[0] != CLS:
            raise InputFormatError("bidirectional input must begin with [CLS]")
        pos = 0
    reps = backbone(ids, mode=mode)
    return head(reps[pos])


def expected_parameter_count(config: BackboneConfig) -> int:
    """Closed-form parameter count of ``Reranker(config)`` without LoRA."""
    d, Lyr = config.d_model, config.n_layers
    count = VOCAB_SIZE * d + d  # embedding + final norm
    if config.kind == "mamba":
        di, N = 2 * d, config.n_state
        R = max(1, -(-d // 16))
        per = d + d * 2 * di + di * 4 + di + di * (R + 2 * N) + R * di + di + di * N + di + di * d
    else:
        count += config.max_len * d
        per = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    return count + Lyr * per + d + 1


def model_summary(model: Reranker) -> dict:
    return {
        "kind": model.config.kind,
        "total": model.num_parameters(),
        "trainable": model.num_parameters(trainable_only=True),
        "position_embedding": "pos" in model.backbone._children,
    }
