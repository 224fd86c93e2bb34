"""Numpy building blocks with explicit forward/backward pairs.

Forward functions return ``(out, cache)``; the matching backward consumes the
cache and returns input gradients plus parameter gradients. Matrix products
stay in BLAS; the loopy parts (masked softmax, RoPE, RMSNorm, small convs)
live in :mod:`latentflow.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def sigmoid(x):
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # log(1 + e^x), stable for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# -- linear -----------------------------------------------------------------


def linear_fwd(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_bwd(dy, cache):
    x, w, has_b = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_b else None
    return dx, dw, db


# -- SiLU and SwiGLU ---------------------------------------------------------


def silu_fwd(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_bwd(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def swiglu_fwd(x, wa, wg, wo):
    """(x @ wa) * SiLU(x @ wg) projected back through wo."""
    a = x @ wa
    u = x @ wg
    su, silu_cache = silu_fwd(u)
    h = a * su
    y = h @ wo
    return y, (x, wa, wg, wo, a, su, silu_cache, h)


def swiglu_bwd(dy, cache):
    x, wa, wg, wo, a, su, silu_cache, h = cache
    x2 = x.reshape(-1, x.shape[-1])
    dh = dy @ wo.T
    dwo = h.reshape(-1, h.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    da = dh * su
    dsu = dh * a
    du = silu_bwd(dsu, silu_cache)
    dwa = x2.T @ da.reshape(-1, da.shape[-1])
    dwg = x2.T @ du.reshape(-1, du.shape[-1])
    dx = da @ wa.T + du @ wg.T
    return dx, dwa, dwg, dwo


# -- RMSNorm -----------------------------------------------------------------


def rmsnorm_fwd(x, g, eps=1e-5):
    """x / sqrt(mean(x^2) + eps) * g over the last axis; any leading shape."""
    shape = x.shape
    x2 = np.ascontiguousarray(x.reshape(-1, shape[-1]))
    y, r = kernels.rmsnorm_fwd(x2, g, eps)
    return y.reshape(shape), (x2, g, r, shape)


def rmsnorm_bwd(dy, cache):
    x2, g, r, shape = cache
    dy2 = dy.reshape(-1, shape[-1])
    dx, dg = kernels.rmsnorm_bwd(dy2, x2, g, r)
    return dx.reshape(shape), dg


# -- rotary position embedding ------------------------------------------------


def rope_tables(length, rotate_dims, base=10000.0, dtype=np.float64):
    """cos/sin tables (length, rotate_dims/2) for pairwise rotation."""
    half = rotate_dims // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / rotate_dims)
    ang = np.arange(length, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_fwd(x, cos, sin):
    return kernels.rope_apply(x, cos, sin), (cos, sin)


def rope_bwd(dy, cache):
    cos, sin = cache
    return kernels.rope_apply(dy, cos, -sin)


# -- attention ----------------------------------------------------------------


def split_heads(x, n_heads):
    B, L, d = x.shape
    hd = d // n_heads
    return np.ascontiguousarray(x.reshape(B, L, n_heads, hd).transpose(0, 2, 1, 3))


def merge_heads(x):
    B, H, L, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, L, H * hd)


def attention_fwd(q, k, v, key_valid, scale):
    """Masked scaled-dot attention on per-head tensors.

    q: (B,H,Lq,hd), k/v: (B,H,Lk,hd), key_valid: (B,Lk) bool. Queries whose
    valid-key set is empty yield zero output.
    """
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    probs = kernels.masked_softmax(scores, key_valid)
    out = np.matmul(probs, v)
    return out, (q, k, v, probs, scale)


def attention_bwd(dout, cache):
    q, k, v, probs, scale = cache
    dprobs = np.matmul(dout, v.transpose(0, 1, 3, 2))
    dv = np.matmul(probs.transpose(0, 1, 3, 2), dout)
    dscores = kernels.softmax_bwd(dprobs, probs)
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(dscores.transpose(0, 1, 3, 2), q) * scale
    return dq, dk, dv


# -- token embedding -----------------------------------------------------------


def embed_fwd(ids, table, pad_vec):
    """ids: (B,S) ints, -1 marks a padding slot filled with pad_vec."""
    safe = np.clip(ids, 0, table.shape[0] - 1)
    emb = table[safe]
    padded = ids < 0
    emb[padded] = pad_vec
    return emb, (ids, padded, table.shape)


def embed_bwd(demb, cache):
    ids, padded, tshape = cache
    dtable = np.zeros(tshape, dtype=demb.dtype)
    dpad = demb[padded].sum(axis=0) if padded.any() else np.zeros(tshape[1], dtype=demb.dtype)
    keep = ~padded
    if keep.any():
        np.add.at(dtable, ids[keep], demb[keep])
    return dtable, dpad


# -- Fourier features -----------------------------------------------------------


def fourier_features(u, dim, fmin=1.0, fmax=1.0e4):
    """Scalar in [0,1] -> dim features; log-spaced frequency bank."""
    half = dim // 2
    freqs = np.logspace(np.log10(fmin), np.log10(fmax), half)
    ang = np.asarray(u, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


# -- leaky ReLU -----------------------------------------------------------------


def leaky_relu_fwd(x, slope=0.2):
    y = np.where(x > 0, x, slope * x)
    return y, (x > 0, slope)


def leaky_relu_bwd(dy, cache):
    pos, slope = cache
    return np.where(pos, dy, slope * dy)


# -- masked GroupNorm ------------------------------------------------------------
# Statistics are taken over (channels-in-group x valid frames) so scores at
# valid positions do not depend on how much padding the batch carries.


def groupnorm_fwd(x, gamma, beta, valid, groups, eps=1e-5):
    B, C, L = x.shape
    cg = C // groups
    xg = x.reshape(B, groups, cg, L)
    vm = valid[:, None, None, :]
    nv = valid.sum(axis=1).astype(x.dtype)  # (B,)
    count = (cg * nv)[:, None, None, None]
    mean = (xg * vm).sum(axis=(2, 3), keepdims=True) / count
    var = (((xg - mean) ** 2) * vm).sum(axis=(2, 3), keepdims=True) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mean) * inv
    xhat = np.where(vm, xhat, 0.0)
    y = xhat.reshape(B, C, L) * gamma[None, :, None] + beta[None, :, None]
    y = np.where(valid[:, None, :], y, 0.0)
    return y.astype(x.dtype), (xhat, inv, valid, gamma, groups, count)


def groupnorm_bwd(dy, cache):
    xhat, inv, valid, gamma, groups, count = cache
    B, G, cg, L = xhat.shape
    C = G * cg
    vm = valid[:, None, None, :]
    dyv = np.where(valid[:, None, :], dy, 0.0)
    dgamma = (dyv * xhat.reshape(B, C, L)).sum(axis=(0, 2))
    dbeta = dyv.sum(axis=(0, 2))
    dxhat = (dyv * gamma[None, :, None]).reshape(B, G, cg, L)
    dxhat = np.where(vm, dxhat, 0.0)
    s1 = dxhat.sum(axis=(2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
    dx = inv * (dxhat - (s1 + xhat * s2) / count)
    dx = np.where(vm, dx, 0.0)
    return dx.reshape(B, C, L), dgamma, dbeta


# -- Adam -------------------------------------------------------------------------


class Adam:
    """Adam with inverse power-law learning-rate decay."""

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, decay_gamma=1e6, decay_power=0.5):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_gamma = decay_gamma
        self.decay_power = decay_power
        self.step_count = 0
        self.m = {}
        self.v = {}

    def current_lr(self):
        return self.lr / (1.0 + self.step_count / self.decay_gamma) ** self.decay_power

    def step(self, params, grads):
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / corr1
            vhat = v / corr2
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
