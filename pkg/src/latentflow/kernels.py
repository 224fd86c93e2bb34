"""Hot numeric kernels with numba-accelerated and pure-numpy implementations.

Every kernel exists in two functionally identical variants. The numba path is
used by default when numba imports cleanly; setting the environment variable
``LATENTFLOW_NUMBA=0`` (or ``false``/``off``) before import selects the
pure-numpy fallback. ``set_backend`` switches at runtime, which the test suite
and ``benchmarks/bench_kernels.py`` use to compare both paths.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _NUMBA_OK = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _NUMBA_OK = False

_env = os.environ.get("LATENTFLOW_NUMBA", "1").strip().lower()
_USE_NUMBA = _NUMBA_OK and _env not in ("0", "false", "off")


def set_backend(name: str) -> None:
    """Select 'numba' or 'numpy' at runtime (overrides the env flag)."""
    global _USE_NUMBA
    if name == "numba":
        if not _NUMBA_OK:
            raise RuntimeError("numba backend requested but numba is not importable")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def using_numba() -> bool:
    return _USE_NUMBA


# ---------------------------------------------------------------------------
# masked softmax over attention scores
# scores: (B, H, Lq, Lk), key_valid: (B, Lk) boolean.
# Rows whose valid-key set is empty produce an all-zero probability row.
# ---------------------------------------------------------------------------


def _masked_softmax_np(scores, key_valid):
    neg = np.array(-np.inf, dtype=scores.dtype)
    masked = np.where(key_valid[:, None, None, :], scores, neg)
    m = masked.max(axis=-1, keepdims=True)
    any_valid = key_valid.any(axis=-1)[:, None, None, None]
    m = np.where(any_valid, m, 0.0)
    e = np.exp(masked - m)
    e = np.where(key_valid[:, None, None, :], e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    z = np.where(z > 0, z, 1.0)
    return (e / z).astype(scores.dtype)


if _NUMBA_OK:

    @njit(cache=True)
    def _masked_softmax_nb(scores, key_valid):
        B, H, Lq, Lk = scores.shape
        out = np.zeros_like(scores)
        for b in range(B):
            for h in range(H):
                for i in range(Lq):
                    m = -np.inf
                    for j in range(Lk):
                        if key_valid[b, j] and scores[b, h, i, j] > m:
                            m = scores[b, h, i, j]
                    if m == -np.inf:
                        continue
                    z = 0.0
                    for j in range(Lk):
                        if key_valid[b, j]:
                            e = np.exp(scores[b, h, i, j] - m)
                            out[b, h, i, j] = e
                            z += e
                    for j in range(Lk):
                        if key_valid[b, j]:
                            out[b, h, i, j] /= z
        return out


def masked_softmax(scores: np.ndarray, key_valid: np.ndarray) -> np.ndarray:
    if _USE_NUMBA:
        return _masked_softmax_nb(scores, np.ascontiguousarray(key_valid))
    return _masked_softmax_np(scores, key_valid)


def _softmax_bwd_np(dprobs, probs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


if _NUMBA_OK:

    @njit(cache=True)
    def _softmax_bwd_nb(dprobs, probs):
        B, H, Lq, Lk = probs.shape
        out = np.empty_like(probs)
        for b in range(B):
            for h in range(H):
                for i in range(Lq):
                    inner = 0.0
                    for j in range(Lk):
                        inner += dprobs[b, h, i, j] * probs[b, h, i, j]
                    for j in range(Lk):
                        out[b, h, i, j] = probs[b, h, i, j] * (dprobs[b, h, i, j] - inner)
        return out


def softmax_bwd(dprobs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient of y=softmax(x) given dL/dy; zero rows stay zero."""
    if _USE_NUMBA:
        return _softmax_bwd_nb(np.ascontiguousarray(dprobs), probs)
    return _softmax_bwd_np(dprobs, probs)


# ---------------------------------------------------------------------------
# partial rotary embedding
# x: (B, H, L, hd); cos/sin: (L, R/2) for the R rotated dimensions.
# Pairs (2i, 2i+1) for i < R/2 are rotated; the rest pass through.
# The backward pass is rope_apply with negated sin.
# ---------------------------------------------------------------------------


def _rope_apply_np(x, cos, sin):
    r2 = cos.shape[1]
    out = x.copy()
    xe = x[..., : 2 * r2 : 2]
    xo = x[..., 1 : 2 * r2 : 2]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out[..., : 2 * r2 : 2] = xe * c - xo * s
    out[..., 1 : 2 * r2 : 2] = xe * s + xo * c
    return out


if _NUMBA_OK:

    @njit(cache=True)
    def _rope_apply_nb(x, cos, sin):
        B, H, L, hd = x.shape
        r2 = cos.shape[1]
        out = x.copy()
        for b in range(B):
            for h in range(H):
                for l in range(L):
                    for i in range(r2):
                        c = cos[l, i]
                        s = sin[l, i]
                        xe = x[b, h, l, 2 * i]
                        xo = x[b, h, l, 2 * i + 1]
                        out[b, h, l, 2 * i] = xe * c - xo * s
                        out[b, h, l, 2 * i + 1] = xe * s + xo * c
        return out


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    if _USE_NUMBA:
        return _rope_apply_nb(np.ascontiguousarray(x), cos, sin)
    return _rope_apply_np(x, cos, sin)


# ---------------------------------------------------------------------------
# RMS normalization over the last axis
# x: (N, d). Returns y = x * r * g with r = 1/sqrt(mean(x^2) + eps).
# ---------------------------------------------------------------------------


def _rmsnorm_fwd_np(x, g, eps):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * g, r[..., 0]


if _NUMBA_OK:

    @njit(cache=True)
    def _rmsnorm_fwd_nb(x, g, eps):
        N, d = x.shape
        y = np.empty_like(x)
        r = np.empty(N, dtype=x.dtype)
        for n in range(N):
            ss = 0.0
            for i in range(d):
                ss += x[n, i] * x[n, i]
            rn = 1.0 / np.sqrt(ss / d + eps)
            r[n] = rn
            for i in range(d):
                y[n, i] = x[n, i] * rn * g[i]
        return y, r


def rmsnorm_fwd(x: np.ndarray, g: np.ndarray, eps: float):
    if _USE_NUMBA:
        return _rmsnorm_fwd_nb(np.ascontiguousarray(x), g, x.dtype.type(eps))
    return _rmsnorm_fwd_np(x, g, eps)


def _rmsnorm_bwd_np(dy, x, g, r):
    d = x.shape[-1]
    rc = r[..., None]
    dg = (dy * x * rc).sum(axis=0)
    inner = (dy * g * x).sum(axis=-1, keepdims=True)
    dx = dy * g * rc - x * (rc**3) * inner / d
    return dx, dg


if _NUMBA_OK:

    @njit(cache=True)
    def _rmsnorm_bwd_nb(dy, x, g, r):
        N, d = x.shape
        dx = np.empty_like(x)
        dg = np.zeros(d, dtype=x.dtype)
        for n in range(N):
            rn = r[n]
            inner = 0.0
            for i in range(d):
                inner += dy[n, i] * g[i] * x[n, i]
                dg[i] += dy[n, i] * x[n, i] * rn
            coef = rn * rn * rn * inner / d
            for i in range(d):
                dx[n, i] = dy[n, i] * g[i] * rn - x[n, i] * coef
        return dx, dg


def rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, g: np.ndarray, r: np.ndarray):
    if _USE_NUMBA:
        return _rmsnorm_bwd_nb(np.ascontiguousarray(dy), np.ascontiguousarray(x), g, r)
    return _rmsnorm_bwd_np(dy, x, g, r)


# ---------------------------------------------------------------------------
# 1-D convolution, kernel size 3, zero padding, stride 1
# x: (B, Ci, L), w: (Co, Ci, 3), b: (Co,)
# ---------------------------------------------------------------------------


def _conv1d3_fwd_np(x, w, b):
    B, Ci, L = x.shape
    xp = np.zeros((B, Ci, L + 2), dtype=x.dtype)
    xp[:, :, 1:-1] = x
    windows = np.stack([xp[:, :, 0:L], xp[:, :, 1 : L + 1], xp[:, :, 2 : L + 2]], axis=-1)
    y = np.einsum("bclk,ock->bol", windows, w, optimize=True) + b[None, :, None]
    return y.astype(x.dtype)


if _NUMBA_OK:

    @njit(cache=True)
    def _conv1d3_fwd_nb(x, w, b):
        B, Ci, L = x.shape
        Co = w.shape[0]
        y = np.empty((B, Co, L), dtype=x.dtype)
        for bb in range(B):
            for o in range(Co):
                for l in range(L):
                    acc = b[o]
                    for c in range(Ci):
                        if l > 0:
                            acc += w[o, c, 0] * x[bb, c, l - 1]
                        acc += w[o, c, 1] * x[bb, c, l]
                        if l < L - 1:
                            acc += w[o, c, 2] * x[bb, c, l + 1]
                    y[bb, o, l] = acc
        return y


def conv1d3_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _USE_NUMBA:
        return _conv1d3_fwd_nb(np.ascontiguousarray(x), w, b)
    return _conv1d3_fwd_np(x, w, b)


def _conv1d3_bwd_np(dy, x, w):
    B, Ci, L = x.shape
    xp = np.zeros((B, Ci, L + 2), dtype=x.dtype)
    xp[:, :, 1:-1] = x
    windows = np.stack([xp[:, :, 0:L], xp[:, :, 1 : L + 1], xp[:, :, 2 : L + 2]], axis=-1)
    dw = np.einsum("bol,bclk->ock", dy, windows, optimize=True)
    db = dy.sum(axis=(0, 2))
    dxp = np.zeros_like(xp)
    for k in range(3):
        dxp[:, :, k : k + L] += np.einsum("bol,ock->bcl", dy, w[:, :, k : k + 1], optimize=True)
    dx = dxp[:, :, 1:-1]
    return dx.astype(x.dtype), dw.astype(x.dtype), db.astype(x.dtype)


if _NUMBA_OK:

    @njit(cache=True)
    def _conv1d3_bwd_nb(dy, x, w):
        B, Ci, L = x.shape
        Co = w.shape[0]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        db = np.zeros(Co, dtype=x.dtype)
        for bb in range(B):
            for o in range(Co):
                for l in range(L):
                    g = dy[bb, o, l]
                    db[o] += g
                    for c in range(Ci):
                        if l > 0:
                            dw[o, c, 0] += g * x[bb, c, l - 1]
                            dx[bb, c, l - 1] += g * w[o, c, 0]
                        dw[o, c, 1] += g * x[bb, c, l]
                        dx[bb, c, l] += g * w[o, c, 1]
                        if l < L - 1:
                            dw[o, c, 2] += g * x[bb, c, l + 1]
                            dx[bb, c, l + 1] += g * w[o, c, 2]
        return dx, dw, db


def conv1d3_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    if _USE_NUMBA:
        return _conv1d3_bwd_nb(np.ascontiguousarray(dy), np.ascontiguousarray(x), w)
    return _conv1d3_bwd_np(dy, x, w)
