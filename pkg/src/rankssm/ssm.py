"""Diagonal state space layers: ZOH discretization, recurrent and convolutional
LTI evaluation, the selective (input-dependent) parameterization, and the fused
selective scan with a choice of backward memory strategy.

Array layout conventions: sequence-level public functions take ``x`` as
(D, L) channel-major; the fused scan and the Mamba block work time-major,
(L, D). The state axis N is always last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ModeError, NumericError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor

SCAN_MODES = ("sequential", "parallel")
MEMORY_MODES = ("store_all", "recompute")


def init_a_matrix(n_state: int, d_channels: int) -> np.ndarray:
    """log(-A) with A[d, n] = -(n + 1), identical for every channel."""
    if n_state < 1 or d_channels < 1:
        raise ConfigError(f"n_state and d_channels must be >= 1, got {n_state}, {d_channels}")
    return np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (d_channels, 1))


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def discretize_zoh(delta, a, b):
    """Zero-order-hold discretization of a diagonal (or scalar) system.

    Returns ``(a_bar, b_bar)`` with a_bar = exp(delta*a) and
    b_bar = (exp(delta*a) - 1) / a * b, falling back to delta*b when
    |delta*a| < 1e-8.
    """
    delta, a, b = (np.asarray(v, dtype=np.float64) for v in (delta, a, b))
    for name, v in (("delta", delta), ("a", a), ("b", b)):
        if not np.all(np.isfinite(v)):
            raise NumericError(f"discretize_zoh: non-finite {name}")
    if np.any(delta < 0):
        raise ValueError("discretize_zoh: delta must be non-negative")
    z = delta * a
    phi, _, _ = kernels.zoh_gain_arrays(delta, z)
    a_bar = np.exp(z)
    b_bar = phi * b
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def zoh_gain(delta: Tensor, a: Tensor) -> Tensor:
    """Differentiable (exp(delta*a) - 1)/a, i.e. delta * E(delta*a)."""
    dd, ad = delta.data, a.data
    z = dd * ad
    phi, E, dE = kernels.zoh_gain_arrays(dd, z)

    def bw(g):
        gd = g * (E + z * dE)
        ga = g * dd * dd * dE
        return T.unbroadcast(gd, dd.shape), T.unbroadcast(ga, ad.shape)

    return T._make(phi, (delta, a), bw, "zoh_gain")


def discretize_zoh_t(delta: Tensor, a: Tensor, b: Tensor):
    """Tensor version of :func:`discretize_zoh`; both outputs are differentiable."""
    return T.exp(T.mul(delta, a)), T.mul(zoh_gain(delta, a), b)


# ---------------------------------------------------------------------------
# linear recurrence
# ---------------------------------------------------------------------------


@dataclass
class DiscretizedStep:
    a_bar: np.ndarray
    b_bar_x: np.ndarray

    def __post_init__(self):
        self.a_bar = np.asarray(self.a_bar, dtype=np.float64)
        self.b_bar_x = np.asarray(self.b_bar_x, dtype=np.float64)
        if self.a_bar.shape != self.b_bar_x.shape:
            raise ShapeError(f"a_bar {self.a_bar.shape} vs b_bar_x {self.b_bar_x.shape}")


@dataclass(frozen=True)
class ScanElement:
    """Affine map h -> a*h + b; ``e2.compose(e1)`` applies e1 first."""

    a: np.ndarray | float
    b: np.ndarray | float

    def compose(self, first: "ScanElement") -> "ScanElement":
        return ScanElement(self.a * first.a, self.a * first.b + self.b)

    def apply(self, h):
        return self.a * h + self.b


IDENTITY = ScanElement(1.0, 0.0)


def _stack_steps(steps: Sequence[DiscretizedStep], h0):
    if len(steps) == 0:
        return None, None, None
    a = np.stack([s.a_bar for s in steps])
    b = np.stack([s.b_bar_x for s in steps])
    h0 = np.zeros(a.shape[1:]) if h0 is None else np.asarray(h0, dtype=np.float64)
    if h0.shape != a.shape[1:]:
        raise ShapeError(f"h0 shape {h0.shape} does not match step shape {a.shape[1:]}")
    return a, b, h0


def linear_scan(a, b, h0=None, mode="sequential"):
    """Hidden states of h_t = a_t * h_{t-1} + b_t for (L, ...) arrays."""
    if mode not in SCAN_MODES:
        raise ConfigError(f"unknown scan mode {mode!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"a {a.shape} vs b {b.shape}")
    L = a.shape[0]
    tail = a.shape[1:]
    h0 = np.zeros(tail) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=np.float64), tail)
    if L == 0:
        return np.empty_like(b)
    fn = kernels.scan_blelloch if mode == "parallel" else kernels.scan_sequential
    return fn(a.reshape(L, -1), b.reshape(L, -1), h0.reshape(-1)).reshape(a.shape)


def recurrent_scan_sequential(steps: Sequence[DiscretizedStep], h0=None) -> np.ndarray:
    a, b, h0 = _stack_steps(steps, h0)
    if a is None:
        return np.empty((0,))
    return linear_scan(a, b, h0, "sequential")


def recurrent_scan_parallel(steps: Sequence[DiscretizedStep], h0=None) -> np.ndarray:
    a, b, h0 = _stack_steps(steps, h0)
    if a is None:
        return np.empty((0,))
    return linear_scan(a, b, h0, "parallel")


def linear_recurrence(a: Tensor, b: Tensor, h0: Tensor | None = None, mode="sequential") -> Tensor:
    """Differentiable :func:`linear_scan`. Shapes (L, ...); returns h_1..h_L."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"a {ad.shape} vs b {bd.shape}")
    L = ad.shape[0]
    h0d = np.zeros(ad.shape[1:]) if h0 is None else h0.data
    h = linear_scan(ad, bd, h0d, mode)

    def bw(g):
        # g_t = dh_t + a_{t+1} g_{t+1}, run as a forward scan over reversed time
        a_rev = np.empty_like(ad)
        a_rev[0] = 1.0
        a_rev[1:] = ad[:0:-1]
        gs = linear_scan(a_rev, g[::-1], np.zeros(ad.shape[1:]), mode)[::-1]
        hp = np.empty_like(h)
        hp[0] = h0d
        hp[1:] = h[:-1]
        grads = [gs * hp, gs.copy()]
        if h0 is not None:
            grads.append(ad[0] * gs[0])
        return tuple(grads)

    inputs = (a, b) if h0 is None else (a, b, h0)
    if L == 0:
        return Tensor(np.empty_like(bd), _check=False)
    return T._make(h, inputs, bw, "linear_recurrence")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class SsmParams(Module):
    """Diagonal SSM parameters shared by both modes. A = -exp(a_log) < 0."""

    mode = "base"

    def __init__(self, n_state, d_channels, skip=True):
        super().__init__()
        self.n_state, self.d_channels = n_state, d_channels
        self.a_log = T.parameter(init_a_matrix(n_state, d_channels))
        self.skip_d = T.parameter(np.ones(d_channels)) if skip else None

    def A(self) -> Tensor:
        return T.neg(T.exp(self.a_log))


class LTIParams(SsmParams):
    """Time-invariant SSM: static per-channel delta, B and C."""

    mode = "lti"

    def __init__(self, n_state, d_channels, delta, b, c, a_log=None, skip=False):
        super().__init__(n_state, d_channels, skip=skip)
        delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (d_channels,))
        if np.any(delta <= 0):
            raise ConfigError("LTI delta must be strictly positive")
        self.log_delta = T.parameter(np.log(delta))
        self.b = T.parameter(np.broadcast_to(np.asarray(b, dtype=np.float64), (d_channels, n_state)))
        self.c = T.parameter(np.broadcast_to(np.asarray(c, dtype=np.float64), (d_channels, n_state)))
        if a_log is not None:
            self.a_log = T.parameter(np.broadcast_to(np.asarray(a_log, dtype=np.float64), (d_channels, n_state)))

    @classmethod
    def random(cls, n_state, d_channels, rng):
        return cls(
            n_state,
            d_channels,
            delta=np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_channels)),
            b=rng.normal(size=(d_channels, n_state)),
            c=rng.normal(size=(d_channels, n_state)),
            a_log=np.log(rng.uniform(0.1, 4.0, size=(d_channels, n_state))),
        )

    def delta(self) -> Tensor:
        return T.exp(self.log_delta)

    def discretize(self):
        """(a_bar, b_bar), each (D, N)."""
        d = T.reshape(self.delta(), (self.d_channels, 1))
        return discretize_zoh_t(d, self.A(), self.b)


def _inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


class SelectiveParams(SsmParams):
    """Input-dependent SSM: B_t, C_t are linear in x_t and
    delta_t = softplus(x_t @ W_down @ W_up + bias)."""

    mode = "selective"

    def __init__(self, n_state, d_channels, rng, dt_rank=None, dt_min=1e-3, dt_max=1e-1, skip=True):
        super().__init__(n_state, d_channels, skip=skip)
        self.dt_rank = dt_rank or max(1, math.ceil(d_channels / 16))
        self.x_proj = Linear(d_channels, self.dt_rank + 2 * n_state, rng, bias=False, std=d_channels**-0.5)
        self.dt_proj = Linear(self.dt_rank, d_channels, rng, bias=True, std=self.dt_rank**-0.5)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_channels))
        self.dt_proj.bias = T.parameter(_inverse_softplus(dt))

    def parameterize(self, x: Tensor):
        """x: (L, D) -> (delta (L, D), B (L, N), C (L, N))."""
        if x.shape[-1] != self.d_channels:
            raise ShapeError(f"expected {self.d_channels} channels, got input {x.shape}")
        R, N = self.dt_rank, self.n_state
        dbc = self.x_proj(x)
        dt = dbc[..., :R]
        B = dbc[..., R : R + N]
        C = dbc[..., R + N :]
        delta = T.softplus(self.dt_proj(dt))
        return delta, B, C

    def __call__(self, x: Tensor, mode="sequential", backward_memory="store_all") -> Tensor:
        delta, B, C = self.parameterize(x)
        return selective_scan_fn(x, delta, self.A(), B, C, self.skip_d, mode, backward_memory)


def selective_parameterize(x_t: Tensor, params: SelectiveParams):
    """Per-timestep (delta_t, B_t, C_t) for a single x_t of shape (D,)."""
    if params.mode != "selective":
        raise ModeError("selective_parameterize needs selective-mode params")
    single = x_t.ndim == 1
    x = T.reshape(x_t, (1, -1)) if single else x_t
    delta, B, C = params.parameterize(x)
    if single:
        delta, B, C = delta[0], B[0], C[0]
    return delta, B, C


# ---------------------------------------------------------------------------
# convolutional mode
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    taps: Tensor

    @property
    def length(self):
        return self.taps.shape[1]


def conv_taps(a_bar: Tensor, b_bar: Tensor, c: Tensor, length: int) -> Tensor:
    """taps[d, k] = sum_n c[d, n] * a_bar[d, n]**k * b_bar[d, n]."""
    ad, bd, cd = a_bar.data, b_bar.data, c.data
    k = np.arange(length, dtype=np.float64)
    pw = ad[..., None] ** k  # (D, N, L)
    cb = cd * bd
    taps = np.einsum("dn,dnk->dk", cb, pw)

    def bw(g):
        gp = g[:, None, :]  # (D, 1, L)
        gcb = np.sum(gp * pw, axis=2)
        dpw = np.zeros_like(pw)
        if length > 1:
            dpw[..., 1:] = k[1:] * ad[..., None] ** k[:-1]
        ga = np.sum(gp * dpw, axis=2) * cb
        return ga, gcb * cd, gcb * bd

    return T._make(taps, (a_bar, b_bar, c), bw, "conv_taps")


def build_conv_kernel(params: SsmParams, length: int) -> ConvKernel:
    if params.mode != "lti":
        raise ModeError("convolution kernels exist only for time-invariant (LTI) parameters")
    if length < 1:
        raise ConfigError(f"kernel length must be >= 1, got {length}")
    a_bar, b_bar = params.discretize()
    return ConvKernel(conv_taps(a_bar, b_bar, params.c, length))


def conv_apply_causal(x: Tensor, kernel: ConvKernel) -> Tensor:
    """y[:, t] = sum_{k <= t} taps[:, k] * x[:, t - k] for x of shape (D, L)."""
    k = kernel.taps if isinstance(kernel, ConvKernel) else kernel
    if x.ndim != 2 or x.shape != k.shape:
        raise ShapeError(f"conv input {x.shape} and kernel {k.shape} must both be (D, L)")
    xd, kd = x.data, k.data
    y = kernels.causal_conv(xd, kd)

    def bw(g):
        return kernels.causal_conv_backward(xd, kd, g)

    return T._make(y, (x, k), bw, "causal_conv")


def lti_conv_forward(x: Tensor, params: LTIParams) -> Tensor:
    y = conv_apply_causal(x, build_conv_kernel(params, x.shape[1]))
    if params.skip_d is not None:
        y = y + T.reshape(params.skip_d, (-1, 1)) * x
    return y


def lti_recurrent_forward(x: Tensor, params: LTIParams, mode="sequential") -> Tensor:
    """Same map as :func:`lti_conv_forward`, computed by the recurrence. x: (D, L)."""
    if params.mode != "lti":
        raise ModeError("lti_recurrent_forward needs LTI params")
    D, L = x.shape
    N = params.n_state
    a_bar, b_bar = params.discretize()
    xt = T.reshape(T.transpose(x), (L, D, 1))
    bx = T.mul(xt, b_bar)
    a_seq = T.add(T.reshape(a_bar, (1, D, N)), np.zeros((L, D, N)))
    h = linear_recurrence(a_seq, bx, mode=mode)
    y = T.transpose(T.tsum(T.mul(h, params.c), axis=2))
    if params.skip_d is not None:
        y = y + T.reshape(params.skip_d, (-1, 1)) * x
    return y


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


def recompute_chunk_size(L: int) -> int:
    return max(1, math.ceil(math.sqrt(L)))


def selective_scan_fn(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    skip: Tensor | None = None,
    mode: str = "sequential",
    backward_memory: str = "store_all",
    chunk: int | None = None,
) -> Tensor:
    """Fused discretize + scan + readout.

    x, delta: (L, D); A: (D, N); B, C: (L, N); skip: (D,). Returns y (L, D)
    with y_t = C_t . h_t + skip * x_t.

    ``store_all`` keeps every h_t for the backward pass. ``recompute`` keeps
    only the state at each chunk boundary (chunks of ceil(sqrt(L)) steps) and
    replays each chunk's forward during backward.
    """
    if mode not in SCAN_MODES:
        raise ConfigError(f"unknown scan mode {mode!r}; expected one of {SCAN_MODES}")
    if backward_memory not in MEMORY_MODES:
        raise ConfigError(f"unknown backward_memory {backward_memory!r}; expected one of {MEMORY_MODES}")
    L, D = x.shape
    N = A.shape[1]
    if delta.shape != (L, D) or A.shape != (D, N) or B.shape != (L, N) or C.shape != (L, N):
        raise ShapeError(
            f"selective_scan shapes: x {x.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
        )
    xd, dd, Ad, Bd, Cd = (np.ascontiguousarray(t.data, dtype=np.float64) for t in (x, delta, A, B, C))
    parallel = mode == "parallel"
    store = backward_memory == "store_all"
    cs = (chunk or L if store else chunk or recompute_chunk_size(L)) or 1
    starts = list(range(0, L, cs))

    y = np.empty((L, D))
    hs_all = np.empty((L, D, N)) if store else None
    boundary = None if store else np.empty((len(starts), D, N))
    scratch = None if store else np.empty((min(cs, L), D, N))
    h = np.zeros((D, N))
    for ci, s in enumerate(starts):
        e = min(s + cs, L)
        if store:
            buf = hs_all[s:e]
        else:
            boundary[ci] = h
            buf = scratch[: e - s]
        h = kernels.selective_forward_chunk(xd[s:e], dd[s:e], Ad, Bd[s:e], Cd[s:e], h, buf, y[s:e], parallel)
    del scratch
    sd = None if skip is None else skip.data
    if sd is not None:
        y += sd * xd

    def bw(g):
        dy = np.ascontiguousarray(g)
        dx = np.zeros((L, D))
        ddelta = np.zeros((L, D))
        dA = np.zeros((D, N))
        dB = np.zeros((L, N))
        dC = np.zeros((L, N))
        carry = np.zeros((D, N))
        zero = np.zeros((D, N))
        if not store:
            hbuf = np.empty((min(cs, L), D, N))
            ybuf = np.empty((min(cs, L), D))
        for ci in range(len(starts) - 1, -1, -1):
            s = starts[ci]
            e = min(s + cs, L)
            if store:
                hs = hs_all[s:e]
                h_prev = hs_all[s - 1] if s > 0 else zero
            else:
                h_prev = boundary[ci]
                hs = hbuf[: e - s]
                kernels.selective_forward_chunk(
                    xd[s:e], dd[s:e], Ad, Bd[s:e], Cd[s:e], h_prev, hs, ybuf[: e - s], parallel
                )
            carry = kernels.selective_backward_chunk(
                xd[s:e], dd[s:e], Ad, Bd[s:e], Cd[s:e], h_prev, hs, dy[s:e], carry,
                dx[s:e], ddelta[s:e], dA, dB[s:e], dC[s:e], parallel,
            )
        grads = [dx, ddelta, dA, dB, dC]
        if sd is not None:
            dx += dy * sd
            grads.append(np.sum(dy * xd, axis=0))
        return tuple(grads)

    inputs = (x, delta, A, B, C) if skip is None else (x, delta, A, B, C, skip)
    return T._make(y, inputs, bw, "selective_scan")


def selective_scan(x: Tensor, params: SelectiveParams, mode="sequential", backward_memory="store_all") -> Tensor:
    """Selective SSM over x of shape (D, L); returns y of shape (D, L)."""
    if params.mode != "selective":
        raise ModeError("selective_scan needs selective-mode params")
    if mode not in SCAN_MODES:
        raise ConfigError(f"unknown scan mode {mode!r}")
    return T.transpose(params(T.transpose(x), mode, backward_memory))
