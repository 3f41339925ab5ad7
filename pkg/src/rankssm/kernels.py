"""Hot numeric loops: linear-recurrence scans, causal convolution, and the fused
selective-scan chunk kernels.

Every kernel has two implementations with identical signatures: a numba
``@njit`` version and a pure-numpy version. The active one is chosen by the
``RANKSSM_BACKEND`` environment variable (``numba`` or ``numpy``; default
``numba`` when it imports) and can be overridden per block with
:func:`use_backend`.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is often too old and numba warns on every process
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

BACKENDS = ("numba", "numpy")

# |z| below which (e^z - 1)/z is replaced by its limit 1
ZOH_SERIES_EPS = 1e-8
# |z| below which the derivative of (e^z - 1)/z uses its Taylor series
ZOH_DERIV_SERIES_EPS = 1e-4


def _default_backend() -> str:
    name = os.environ.get("RANKSSM_BACKEND", "numba" if HAS_NUMBA else "numpy").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"RANKSSM_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("RANKSSM_BACKEND=numba but numba is not importable")
    return name


_state = threading.local()
_DEFAULT = _default_backend()


def get_backend() -> str:
    return getattr(_state, "backend", _DEFAULT)


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily select the kernel backend for the current thread."""
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not installed")
    prev = get_backend()
    _state.backend = name
    try:
        yield
    finally:
        _state.backend = prev


def set_threads(n: int) -> None:
    if HAS_NUMBA and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def get_threads() -> int:
    return numba.get_num_threads() if HAS_NUMBA else 1


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _scan_sequential_np(a, b, h0):
    L = a.shape[0]
    out = np.empty_like(b)
    h = h0.copy()
    for t in range(L):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def _scan_blelloch_np(a, b, h0):
    L, M = a.shape
    if L == 0:
        return np.empty_like(b)
    P = 1
    while P < L:
        P *= 2
    A = np.ones((P, M))
    B = np.zeros((P, M))
    A[:L] = a
    B[:L] = b
    d = 1
    while d < P:
        r = np.arange(2 * d - 1, P, 2 * d)
        l = r - d
        B[r] = A[r] * B[l] + B[r]
        A[r] = A[r] * A[l]
        d *= 2
    A[P - 1] = 1.0
    B[P - 1] = 0.0
    d = P // 2
    while d >= 1:
        r = np.arange(2 * d - 1, P, 2 * d)
        l = r - d
        ta, tb = A[l].copy(), B[l].copy()
        A[l], B[l] = A[r], B[r]
        B[r] = ta * B[r] + tb
        A[r] = ta * A[r]
        d //= 2
    # A, B now hold exclusive prefixes; fold in each element and the initial state
    return a * (A[:L] * h0 + B[:L]) + b


def _causal_conv_np(x, k):
    D, L = x.shape
    y = np.zeros_like(x)
    for j in range(L):
        y[:, j:] += k[:, j : j + 1] * x[:, : L - j]
    return y


def _causal_conv_bwd_np(x, k, dy):
    D, L = x.shape
    dx = np.zeros_like(x)
    dk = np.zeros_like(k)
    for j in range(L):
        dk[:, j] = np.sum(dy[:, j:] * x[:, : L - j], axis=1)
        dx[:, : L - j] += k[:, j : j + 1] * dy[:, j:]
    return dx, dk


def zoh_gain_arrays(delta, z):
    """Return (phi, E, E') for phi = delta * E(z), E(z) = (e^z - 1)/z."""
    az = np.abs(z)
    small = az < ZOH_SERIES_EPS
    zs = np.where(small, 1.0, z)
    E = np.where(small, 1.0, np.expm1(zs) / zs)
    tiny = az < ZOH_DERIV_SERIES_EPS
    zt = np.where(tiny, 1.0, z)
    dE = np.where(
        tiny,
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0,
        (zt * np.exp(zt) - np.expm1(zt)) / (zt * zt),
    )
    return delta * E, E, dE


def _sel_fwd_chunk_np(x, delta, A, B, C, h0, hs, y, parallel):
    T, D = x.shape
    N = A.shape[1]
    z = delta[:, :, None] * A[None, :, :]
    ab = np.exp(z)
    phi, _, _ = zoh_gain_arrays(delta[:, :, None], z)
    bx = phi * B[:, None, :] * x[:, :, None]
    scan = scan_blelloch if parallel else scan_sequential
    h = scan(ab.reshape(T, D * N), bx.reshape(T, D * N), h0.reshape(D * N)).reshape(T, D, N)
    hs[...] = h
    y[...] = np.einsum("tdn,tn->td", h, C)
    return h[T - 1].copy()


def _sel_bwd_chunk_np(x, delta, A, B, C, h_prev, hs, dy, carry, dx, ddelta, dA, dB, dC, parallel):
    T, D = x.shape
    N = A.shape[1]
    z = delta[:, :, None] * A[None, :, :]
    ab = np.exp(z)
    phi, E, dE = zoh_gain_arrays(delta[:, :, None], z)
    r = dy[:, :, None] * C[:, None, :]
    # reverse recurrence g_t = r_t + ab_{t+1} g_{t+1}, seeded by the incoming carry
    a_rev = np.empty((T, D, N))
    a_rev[0] = 1.0
    a_rev[1:] = ab[:0:-1]
    scan = scan_blelloch if parallel else scan_sequential
    g = scan(a_rev.reshape(T, D * N), r[::-1].reshape(T, D * N).copy(), carry.reshape(D * N))
    g = g.reshape(T, D, N)[::-1]
    hp = np.empty_like(hs)
    hp[0] = h_prev
    hp[1:] = hs[:-1]
    dC += np.einsum("td,tdn->tn", dy, hs)
    dz = g * hp * ab
    bx = B[:, None, :] * x[:, :, None]
    dphi = g * bx
    dx += np.einsum("tdn,tdn,tn->td", g, phi, B)
    dB += np.einsum("tdn,tdn,td->tn", g, phi, x)
    ddelta += np.sum(dphi * (E + z * dE) + dz * A[None], axis=2)
    dl = delta[:, :, None]
    dA += np.sum(dphi * dl * dl * dE + dz * dl, axis=0)
    return ab[0] * g[0]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _scan_sequential_nb(a, b, h0):
        L, M = a.shape
        out = np.empty((L, M))
        h = h0.copy()
        for t in range(L):
            for m in range(M):
                h[m] = a[t, m] * h[m] + b[t, m]
                out[t, m] = h[m]
        return out

    @njit(cache=True, parallel=True)
    def _scan_blelloch_nb(a, b, h0):
        L, M = a.shape
        out = np.empty((L, M))
        if L == 0:
            return out
        P = 1
        while P < L:
            P *= 2
        A = np.ones((P, M))
        B = np.zeros((P, M))
        A[:L] = a
        B[:L] = b
        d = 1
        while d < P:
            npairs = P // (2 * d)
            for i in prange(npairs):
                r = 2 * d * i + 2 * d - 1
                l = r - d
                for m in range(M):
                    B[r, m] = A[r, m] * B[l, m] + B[r, m]
                    A[r, m] = A[r, m] * A[l, m]
            d *= 2
        for m in range(M):
            A[P - 1, m] = 1.0
            B[P - 1, m] = 0.0
        d = P // 2
        while d >= 1:
            npairs = P // (2 * d)
            for i in prange(npairs):
                r = 2 * d * i + 2 * d - 1
                l = r - d
                for m in range(M):
                    ta = A[l, m]
                    tb = B[l, m]
                    A[l, m] = A[r, m]
                    B[l, m] = B[r, m]
                    B[r, m] = ta * B[r, m] + tb
                    A[r, m] = ta * A[r, m]
            d //= 2
        for t in prange(L):
            for m in range(M):
                out[t, m] = a[t, m] * (A[t, m] * h0[m] + B[t, m]) + b[t, m]
        return out

    @njit(cache=True)
    def _causal_conv_nb(x, k):
        D, L = x.shape
        y = np.zeros((D, L))
        for d in range(D):
            for t in range(L):
                acc = 0.0
                for j in range(t + 1):
                    acc += k[d, j] * x[d, t - j]
                y[d, t] = acc
        return y

    @njit(cache=True)
    def _causal_conv_bwd_nb(x, k, dy):
        D, L = x.shape
        dx = np.zeros((D, L))
        dk = np.zeros((D, L))
        for d in range(D):
            for t in range(L):
                g = dy[d, t]
                for j in range(t + 1):
                    dk[d, j] += g * x[d, t - j]
                    dx[d, t - j] += g * k[d, j]
        return dx, dk

    @njit(cache=True, inline="always")
    def _gain(delta, z):
        # returns (exp(z), phi, E, E') sharing one expm1 evaluation
        em1 = math.expm1(z)
        az = abs(z)
        if az < ZOH_SERIES_EPS:
            E = 1.0
        else:
            E = em1 / z
        if az < ZOH_DERIV_SERIES_EPS:
            dE = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
        else:
            dE = (z * (em1 + 1.0) - em1) / (z * z)
        return em1 + 1.0, delta * E, E, dE

    @njit(cache=True)
    def _sel_fwd_chunk_nb(x, delta, A, B, C, h0, hs, y):
        T, D = x.shape
        N = A.shape[1]
        h = h0.copy()
        for t in range(T):
            for d in range(D):
                acc = 0.0
                dt = delta[t, d]
                xt = x[t, d]
                for n in range(N):
                    ab, phi, _, _ = _gain(dt, dt * A[d, n])
                    h[d, n] = ab * h[d, n] + phi * B[t, n] * xt
                    hs[t, d, n] = h[d, n]
                    acc += C[t, n] * h[d, n]
                y[t, d] = acc
        return h

    @njit(cache=True)
    def _sel_bwd_chunk_nb(x, delta, A, B, C, h_prev, hs, dy, carry, dx, ddelta, dA, dB, dC):
        T, D = x.shape
        N = A.shape[1]
        g_next = carry.copy()
        for t in range(T - 1, -1, -1):
            for d in range(D):
                dt = delta[t, d]
                xt = x[t, d]
                dyt = dy[t, d]
                for n in range(N):
                    a = A[d, n]
                    z = dt * a
                    ab, phi, E, dE = _gain(dt, z)
                    g = dyt * C[t, n] + g_next[d, n]
                    dC[t, n] += dyt * hs[t, d, n]
                    hp = hs[t - 1, d, n] if t > 0 else h_prev[d, n]
                    dz = g * hp * ab
                    dphi = g * B[t, n] * xt
                    dx[t, d] += g * phi * B[t, n]
                    dB[t, n] += g * phi * xt
                    ddelta[t, d] += dphi * (E + z * dE) + dz * a
                    dA[d, n] += dphi * dt * dt * dE + dz * dt
                    g_next[d, n] = ab * g
        return g_next


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _f64(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def scan_sequential(a, b, h0):
    """Left fold of h_t = a_t * h_{t-1} + b_t over axis 0 of (L, M) arrays."""
    a, b, h0 = _f64(a), _f64(b), _f64(h0)
    if get_backend() == "numba":
        return _scan_sequential_nb(a, b, h0)
    return _scan_sequential_np(a, b, h0)


def scan_blelloch(a, b, h0):
    """Same result as :func:`scan_sequential` via a two-phase up/down sweep."""
    a, b, h0 = _f64(a), _f64(b), _f64(h0)
    if get_backend() == "numba":
        return _scan_blelloch_nb(a, b, h0)
    return _scan_blelloch_np(a, b, h0)


def causal_conv(x, k):
    """y[d, t] = sum_{j <= t} k[d, j] * x[d, t - j], evaluated directly."""
    x, k = _f64(x), _f64(k)
    if get_backend() == "numba":
        return _causal_conv_nb(x, k)
    return _causal_conv_np(x, k)


def causal_conv_backward(x, k, dy):
    x, k, dy = _f64(x), _f64(k), _f64(dy)
    if get_backend() == "numba":
        return _causal_conv_bwd_nb(x, k, dy)
    return _causal_conv_bwd_np(x, k, dy)


def selective_forward_chunk(x, delta, A, B, C, h0, hs, y, parallel=False):
    """Run one chunk of the discretize-and-recur loop.

    Writes hidden states into ``hs`` (T, D, N) and the C-readout into ``y``
    (T, D); returns the final state. The skip term is added by the caller.
    """
    if get_backend() == "numba" and not parallel:
        return _sel_fwd_chunk_nb(x, delta, A, B, C, h0, hs, y)
    return _sel_fwd_chunk_np(x, delta, A, B, C, h0, hs, y, parallel)


def selective_backward_chunk(x, delta, A, B, C, h_prev, hs, dy, carry, dx, ddelta, dA, dB, dC, parallel=False):
    """Reverse pass over one chunk; accumulates into the gradient buffers.

    ``carry`` is Ā_{t+1}·g_{t+1} flowing in from the chunk to the right; the
    return value is the carry for the chunk to the left.
    """
    if get_backend() == "numba" and not parallel:
        return _sel_bwd_chunk_nb(x, delta, A, B, C, h_prev, hs, dy, carry, dx, ddelta, dA, dB, dC)
    return _sel_bwd_chunk_np(x, delta, A, B, C, h_prev, hs, dy, carry, dx, ddelta, dA, dB, dC, parallel)
