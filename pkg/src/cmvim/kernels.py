"""Selective-scan kernels.

Two interchangeable backends compute the same forward/backward pair:

* ``numba``: sequential recurrence compiled with ``@njit``.
* ``numpy``: chunked forward that evaluates each block of steps at once from
  cumulative log-decays, and a step loop vectorised over batch/channel/state
  for the backward.

The numba kernels fuse discretisation, recurrence and the chain rule into one
pass per direction; the numpy path builds the discretised tensors up front.

The backend is picked once at import from ``CMVIM_NUMBA`` (``0`` forces
numpy; default is numba when importable) and can be switched with
:func:`set_backend`. ``CMVIM_THREADS`` caps numba's thread pool.

Array layout, batch-first: ``u, delta: [B, L, Di]``, ``A: [Di, N]``,
``Bm, C: [B, L, N]``, ``D: [Di]``. States are ``hs: [B, L, Di, N]``.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

ZOH = 0
EULER = 1

# |delta*A| below this switches the ZOH input weight to its Taylor series
_SERIES_CUTOFF = 1e-4

_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("CMVIM_NUMBA", "1") != "0" else "numpy"

if HAVE_NUMBA and os.environ.get("CMVIM_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["CMVIM_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown scan backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


# ---------------------------------------------------------------------------
# discretisation (numpy, shared by the numpy backend and the public API)
# ---------------------------------------------------------------------------

def zoh_weight(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``(exp(delta*A) - 1) / A``, continuous at ``A == 0`` where it equals ``delta``."""
    x = delta * A
    small = np.abs(x) < _SERIES_CUTOFF
    safe_A = np.where(small, 1.0, A)
    exact = np.expm1(x) / safe_A
    series = delta * (1.0 + x / 2.0 + x * x / 6.0)
    return np.where(small, series, exact)


def zoh_weight_dA(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Derivative of :func:`zoh_weight` with respect to ``A``."""
    x = delta * A
    small = np.abs(x) < _SERIES_CUTOFF
    safe_A = np.where(small, 1.0, A)
    em = np.expm1(x)
    exact = (x * (em + 1.0) - em) / (safe_A * safe_A)
    series = delta * delta * (0.5 + x / 3.0 + x * x / 8.0)
    return np.where(small, series, exact)


def discretize(delta: np.ndarray, A: np.ndarray, Bm: np.ndarray, mode: int = ZOH):
    """Per-step decay and input weight.

    ``delta: [..., L, Di]``, ``A: [Di, N]``, ``Bm: [..., L, N]`` ->
    ``Abar, Bbar: [..., L, Di, N]``.
    """
    dA = delta[..., :, None] * A
    Abar = np.exp(dA)
    if mode == ZOH:
        w = zoh_weight(delta[..., :, None], A)
    else:
        w = np.broadcast_to(delta[..., :, None], dA.shape)
    return Abar, w * Bm[..., :, None, :]


# ---------------------------------------------------------------------------
# recurrence cores: forward (y, hs) and backward (du, dC, dD, state adjoints)
# ---------------------------------------------------------------------------

def _core_fwd_np(u, log_decay, Bbar, C, D, chunk=16):
    """Blocked scan: inside a chunk every state is a decay-weighted sum of inputs."""
    Bsz, L, Di, N = Bbar.shape
    hs = np.empty((Bsz, L, Di, N), dtype=u.dtype)
    h = np.zeros((Bsz, Di, N), dtype=u.dtype)
    for t0 in range(0, L, chunk):
        t1 = min(t0 + chunk, L)
        K = t1 - t0
        x = Bbar[:, t0:t1] * u[:, t0:t1, :, None]             # [B,K,Di,N]
        cs = np.cumsum(log_decay[:, t0:t1], axis=1)           # log decay since chunk start
        seg = cs[:, :, None] - cs[:, None, :]                 # [B,K(t),K(s),Di,N]
        causal = np.tril(np.ones((K, K), dtype=bool))[None, :, :, None, None]
        w = np.where(causal, np.exp(np.where(causal, seg, 0.0)), 0.0).astype(u.dtype)
        hc = np.einsum("btsdn,bsdn->btdn", w, x) + np.exp(cs) * h[:, None]
        hs[:, t0:t1] = hc
        h = hc[:, -1]
    y = np.einsum("btdn,btn->btd", hs, C) + u * D
    return y.astype(u.dtype, copy=False), hs


def _core_bwd_np(dy, u, Abar, Bbar, C, D, hs):
    Bsz, L, Di, N = Bbar.shape
    dh_all = np.empty_like(hs)
    dh = np.zeros((Bsz, Di, N), dtype=hs.dtype)
    for t in range(L - 1, -1, -1):
        dh = dh + dy[:, t, :, None] * C[:, t, None, :]
        dh_all[:, t] = dh
        dh = dh * Abar[:, t]
    du = dy * D + np.einsum("btdn,btdn->btd", dh_all, Bbar)
    dC = np.einsum("btd,btdn->btn", dy, hs)
    dD = np.einsum("btd,btd->d", dy, u)
    return du, dC, dD, dh_all


if HAVE_NUMBA:
    # The numba kernels take ``em = expm1(delta*A)`` precomputed by numpy (its
    # vectorised expm1 is several times faster than a scalar libm call per
    # element) and derive decay, input weight and its A-derivative from it.

    @njit(cache=True, nogil=True, inline="always")
    def _weights_nb(dt, a, em, mode):
        abar = em + 1.0
        if mode == 1:
            return abar, dt, 0.0
        x = dt * a
        if abs(x) < 1e-4:
            w = dt * (1.0 + x / 2.0 + x * x / 6.0)
            dw = dt * dt * (0.5 + x / 3.0 + x * x / 8.0)
        else:
            w = em / a
            dw = (x * abar - em) / (a * a)
        return abar, w, dw

    @njit(cache=True, nogil=True)
    def _fused_fwd_nb(u, delta, A, Bm, C, D, em, mode):
        Bsz, L, Di = u.shape
        N = A.shape[1]
        y = np.empty_like(u)
        hs = np.empty((Bsz, L, Di, N), dtype=u.dtype)
        h = np.zeros((Di, N))
        for b in range(Bsz):
            h[:] = 0.0
            for t in range(L):
                for d in range(Di):
                    ut = float(u[b, t, d])
                    dt = float(delta[b, t, d])
                    acc = 0.0
                    for n in range(N):
                        abar, w, _ = _weights_nb(dt, float(A[d, n]), float(em[b, t, d, n]), mode)
                        hn = abar * h[d, n] + w * Bm[b, t, n] * ut
                        h[d, n] = hn
                        hs[b, t, d, n] = hn
                        acc += C[b, t, n] * hn
                    y[b, t, d] = acc + D[d] * ut
        return y, hs

    @njit(cache=True, nogil=True)
    def _fused_bwd_nb(dy, u, delta, A, Bm, C, D, hs, em, mode):
        Bsz, L, Di = u.shape
        N = A.shape[1]
        du = np.empty_like(u)
        ddelta = np.empty_like(delta)
        dA = np.zeros((Di, N))
        dB = np.zeros(Bm.shape)
        dC = np.zeros(C.shape)
        dD = np.zeros(Di)
        dh = np.zeros((Di, N))
        for b in range(Bsz):
            dh[:] = 0.0
            for t in range(L - 1, -1, -1):
                for d in range(Di):
                    g = float(dy[b, t, d])
                    ut = float(u[b, t, d])
                    dt = float(delta[b, t, d])
                    dD[d] += g * ut
                    acc_u = g * D[d]
                    acc_dt = 0.0
                    for n in range(N):
                        a = float(A[d, n])
                        abar, w, dw_da = _weights_nb(dt, a, float(em[b, t, d, n]), mode)
                        bm = float(Bm[b, t, n])
                        dC[b, t, n] += g * hs[b, t, d, n]
                        dhn = dh[d, n] + g * C[b, t, n]
                        h_prev = hs[b, t - 1, d, n] if t > 0 else 0.0
                        g_log = dhn * h_prev * abar
                        dbbar = dhn * ut
                        acc_u += dhn * w * bm
                        dB[b, t, n] += dbbar * w
                        dw = dbbar * bm
                        if mode == 1:
                            acc_dt += g_log * a + dw
                            dA[d, n] += g_log * dt
                        else:
                            acc_dt += g_log * a + dw * abar
                            dA[d, n] += g_log * dt + dw * dw_da
                        dh[d, n] = dhn * abar
                    du[b, t, d] = acc_u
                    ddelta[b, t, d] = acc_dt
        return du, ddelta, dA.astype(A.dtype), dB.astype(Bm.dtype), dC.astype(C.dtype), dD.astype(D.dtype)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _discretized(delta, A, Bm, mode):
    log_decay = delta[..., None] * A                           # [B,L,Di,N]
    Abar = np.exp(log_decay)
    if mode == ZOH:
        w = zoh_weight(delta[..., None], A)
    else:
        w = np.broadcast_to(delta[..., None], log_decay.shape)
    return log_decay, Abar, w, w * Bm[:, :, None, :]


def scan_forward(u, delta, A, Bm, C, D, mode: int = ZOH, backend: str | None = None):
    """Run the recurrence ``h_t = Abar_t h_{t-1} + Bbar_t u_t``, ``y_t = C_t h_t + D u_t``.

    Returns ``(y, hs)`` with ``hs`` holding every state for the backward pass.
    """
    backend = backend or _BACKEND
    if backend == "numba":
        em = np.expm1(delta[..., None] * A)
        return _fused_fwd_nb(u, delta, A, Bm, C, D, em, mode)
    log_decay, _, _, Bbar = _discretized(delta, A, Bm, mode)
    return _core_fwd_np(u, log_decay, Bbar, C, D)


def scan_backward(dy, u, delta, A, Bm, C, D, hs, mode: int = ZOH, backend: str | None = None):
    """Gradients ``(du, ddelta, dA, dB, dC, dD)`` for upstream ``dy``."""
    backend = backend or _BACKEND
    dy = np.ascontiguousarray(dy, dtype=u.dtype)
    if backend == "numba":
        em = np.expm1(delta[..., None] * A)
        return _fused_bwd_nb(dy, u, delta, A, Bm, C, D, hs, em, mode)
    _, Abar, w, Bbar = _discretized(delta, A, Bm, mode)
    du, dC, dD, dh = _core_bwd_np(dy, u, Abar, Bbar, C, D, hs)
    # chain rule through the discretisation
    h_prev = np.zeros_like(hs)
    h_prev[:, 1:] = hs[:, :-1]
    g_log = dh * h_prev * Abar                                 # d/d(delta*A)
    dBbar = dh * u[..., None]
    dB = np.einsum("btdn,btdn->btn", dBbar, w)
    dw = np.einsum("btdn,btn->btdn", dBbar, Bm)
    ddelta = np.einsum("btdn,dn->btd", g_log, A)
    dA = np.einsum("btdn,btd->dn", g_log, delta)
    if mode == ZOH:
        ddelta += np.einsum("btdn,btdn->btd", dw, Abar)
        dA += np.einsum("btdn,btdn->dn", dw, zoh_weight_dA(delta[..., None], A))
    else:
        ddelta += dw.sum(axis=-1)
    return du, ddelta, dA, dB, dC, dD
