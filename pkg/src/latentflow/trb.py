"""Structural autoencoder: patching, transformer resampling via interleaved
learnable query embeddings, and a soft-normalisation bottleneck.

Downsampling by k appends one learnable query after every k-segment, runs the
interleaved sequence through a transformer stack, and keeps only the query
positions; upsampling reverses the pattern with k queries per input. Patching
at 256 samples combined with a 16x resampler gives the 4096x temporal ratio.
Reconstruction training here is a toy MSE objective; the full production loss
stack is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass
class TrbConfig:
    audio_channels: int = 2
    patch_size: int = 256
    resample_factor: int = 16
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    latent_dim: int = 8
    rope_base: float = 10000.0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# patching
# ---------------------------------------------------------------------------


def patch(signal: np.ndarray, patch_size: int = 256) -> np.ndarray:
    """(channels, samples) -> (n_patches, channels*patch_size); zero-pads the
    tail so the sample count divides the patch size."""
    ch, S = signal.shape
    n = int(np.ceil(S / patch_size))
    padded = np.zeros((ch, n * patch_size), dtype=signal.dtype)
    padded[:, :S] = signal
    # (ch, n, P) -> (n, ch, P) -> (n, ch*P)
    return np.ascontiguousarray(padded.reshape(ch, n, patch_size).transpose(1, 0, 2)).reshape(
        n, ch * patch_size
    )


def unpatch(embs: np.ndarray, channels: int) -> np.ndarray:
    n, width = embs.shape
    P = width // channels
    return np.ascontiguousarray(embs.reshape(n, channels, P).transpose(1, 0, 2)).reshape(
        channels, n * P
    )


# ---------------------------------------------------------------------------
# transformer stack (pre-norm attention + SwiGLU, RoPE positions)
# ---------------------------------------------------------------------------


def init_stack(prefix: str, config: TrbConfig, rng, dtype=np.float32) -> dict:
    w = config.embed_dim
    p = {}
    for k in range(config.n_layers):
        pre = f"{prefix}.layer{k}."
        p[pre + "attn_norm.g"] = np.ones(w, dtype=dtype)
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + nm] = (rng.standard_normal((w, w)) / np.sqrt(w)).astype(dtype)
        p[pre + "ffn_norm.g"] = np.ones(w, dtype=dtype)
        p[pre + "ffn.wa"] = (rng.standard_normal((w, 4 * w)) / np.sqrt(w)).astype(dtype)
        p[pre + "ffn.wg"] = (rng.standard_normal((w, 4 * w)) / np.sqrt(w)).astype(dtype)
        p[pre + "ffn.wo"] = (rng.standard_normal((4 * w, w)) / np.sqrt(4 * w)).astype(dtype)
    return p


def _stack_fwd(params, prefix, x, config: TrbConfig):
    """x: (1, S, w). Full bidirectional attention, no masking."""
    H = config.n_heads
    w = config.embed_dim
    hd = w // H
    S = x.shape[1]
    rot = min(32, hd)
    rot -= rot % 2
    cos, sin = nn.rope_tables(S, rot, config.rope_base, x.dtype)
    valid = np.ones((1, S), dtype=bool)
    scale = 1.0 / np.sqrt(hd)
    caches = []
    for k in range(config.n_layers):
        pre = f"{prefix}.layer{k}."
        a, cn = nn.rmsnorm_fwd(x, params[pre + "attn_norm.g"])
        q, cq = nn.linear_fwd(a, params[pre + "wq"])
        kk, ck = nn.linear_fwd(a, params[pre + "wk"])
        v, cv = nn.linear_fwd(a, params[pre + "wv"])
        qh, kh, vh = nn.split_heads(q, H), nn.split_heads(kk, H), nn.split_heads(v, H)
        qr, cqr = nn.rope_fwd(qh, cos, sin)
        kr, ckr = nn.rope_fwd(kh, cos, sin)
        o, ca = nn.attention_fwd(qr, kr, vh, valid, scale)
        om = nn.merge_heads(o)
        ao, co = nn.linear_fwd(om, params[pre + "wo"])
        x = x + ao
        b, cn2 = nn.rmsnorm_fwd(x, params[pre + "ffn_norm.g"])
        f, cff = nn.swiglu_fwd(b, params[pre + "ffn.wa"], params[pre + "ffn.wg"], params[pre + "ffn.wo"])
        x = x + f
        caches.append((cn, cq, ck, cv, cqr, ckr, ca, co, cn2, cff, H))
    return x, caches


def _stack_bwd(dx, caches, params, prefix, config, grads):
    for k in range(config.n_layers - 1, -1, -1):
        pre = f"{prefix}.layer{k}."
        cn, cq, ck, cv, cqr, ckr, ca, co, cn2, cff, H = caches[k]
        db, dwa, dwg, dwo = nn.swiglu_bwd(dx, cff)
        from .dit import _acc

        _acc(grads, pre + "ffn.wa", dwa)
        _acc(grads, pre + "ffn.wg", dwg)
        _acc(grads, pre + "ffn.wo", dwo)
        dxn, dg2 = nn.rmsnorm_bwd(db, cn2)
        _acc(grads, pre + "ffn_norm.g", dg2)
        dx = dx + dxn
        dom, dwo2, _ = nn.linear_bwd(dx, co)
        _acc(grads, pre + "wo", dwo2)
        B, S, w = dom.shape
        do = np.ascontiguousarray(dom.reshape(B, S, H, w // H).transpose(0, 2, 1, 3))
        dqr, dkr, dv = nn.attention_bwd(do, ca)
        dqh = nn.rope_bwd(dqr, cqr)
        dkh = nn.rope_bwd(dkr, ckr)
        da_q, dwq, _ = nn.linear_bwd(nn.merge_heads(dqh), cq)
        da_k, dwk, _ = nn.linear_bwd(nn.merge_heads(dkh), ck)
        da_v, dwv, _ = nn.linear_bwd(nn.merge_heads(dv), cv)
        _acc(grads, pre + "wq", dwq)
        _acc(grads, pre + "wk", dwk)
        _acc(grads, pre + "wv", dwv)
        da = da_q + da_k + da_v
        dxn1, dg1 = nn.rmsnorm_bwd(da, cn)
        _acc(grads, pre + "attn_norm.g", dg1)
        dx = dx + dxn1
    return dx


# ---------------------------------------------------------------------------
# resampling by query interleaving
# ---------------------------------------------------------------------------


def trb_downsample(params, prefix, x: np.ndarray, factor: int, config: TrbConfig):
    """x: (S, w) -> (S/factor, w); pads S to a multiple of factor.

    One learnable query (params[f"{prefix}.query"]) is appended per
    factor-segment; only query positions survive the stack.
    """
    if factor <= 0:
        raise ValueError("trb_downsample: factor must be positive")
    S, w = x.shape
    n_seg = int(np.ceil(S / factor))
    xp = np.zeros((n_seg * factor, w), dtype=x.dtype)
    xp[:S] = x
    total = n_seg * (factor + 1)
    idx = np.arange(total)
    is_query = (idx + 1) % (factor + 1) == 0
    seq = np.empty((total, w), dtype=x.dtype)
    seq[~is_query] = xp
    seq[is_query] = params[f"{prefix}.query"]
    out, caches = _stack_fwd(params, prefix, seq[None], config)
    y = out[0][is_query]
    return y, (caches, is_query, S, n_seg)


def trb_downsample_bwd(dy, cache, params, prefix, config, grads):
    caches, is_query, S, n_seg = cache
    total = is_query.shape[0]
    dseq = np.zeros((1, total, dy.shape[1]), dtype=dy.dtype)
    dseq[0][is_query] = dy
    dseq = _stack_bwd(dseq, caches, params, prefix, config, grads)
    from .dit import _acc

    _acc(grads, f"{prefix}.query", dseq[0][is_query].sum(axis=0))
    return dseq[0][~is_query][:S]


def trb_upsample(params, prefix, x: np.ndarray, factor: int, config: TrbConfig):
    """x: (S, w) -> (S*factor, w) using `factor` learnable queries per input."""
    if factor <= 0:
        raise ValueError("trb_upsample: factor must be positive")
    S, w = x.shape
    total = S * (factor + 1)
    idx = np.arange(total)
    is_query = idx % (factor + 1) != 0
    seq = np.empty((total, w), dtype=x.dtype)
    seq[~is_query] = x
    queries = params[f"{prefix}.queries"]  # (factor, w)
    seq[is_query] = np.tile(queries, (S, 1))
    out, caches = _stack_fwd(params, prefix, seq[None], config)
    y = out[0][is_query]
    return y, (caches, is_query, S)


def trb_upsample_bwd(dy, cache, params, prefix, config, grads):
    caches, is_query, S = cache
    total = is_query.shape[0]
    dseq = np.zeros((1, total, dy.shape[1]), dtype=dy.dtype)
    dseq[0][is_query] = dy
    dseq = _stack_bwd(dseq, caches, params, prefix, config, grads)
    from .dit import _acc

    factor = int(is_query.sum()) // S
    dq = dseq[0][is_query].reshape(S, factor, -1).sum(axis=0)
    _acc(grads, f"{prefix}.queries", dq)
    return dseq[0][~is_query]


# ---------------------------------------------------------------------------
# soft-normalisation bottleneck
# ---------------------------------------------------------------------------


@dataclass
class SoftNormState:
    scale: np.ndarray  # (C,)
    bias: np.ndarray  # (C,)
    run_std: np.ndarray  # (C,)
    momentum: float = 0.05
    eps: float = 1e-6

    @classmethod
    def init(cls, channels: int, dtype=np.float32):
        return cls(
            scale=np.ones(channels, dtype=dtype),
            bias=np.zeros(channels, dtype=dtype),
            run_std=np.ones(channels, dtype=dtype),
        )


def soft_norm(x: np.ndarray, state: SoftNormState, training: bool = False) -> np.ndarray:
    """y = (x*a + b) / sigma_run per channel; x is (L, C).

    Training mode folds the batch std of (x*a + b) into the running estimate;
    frozen state gives a deterministic encoding.
    """
    z = x * state.scale[None, :] + state.bias[None, :]
    if training and x.shape[0] > 1:
        batch_std = z.std(axis=0)
        state.run_std[:] = (1.0 - state.momentum) * state.run_std + state.momentum * batch_std
    denom = np.maximum(state.run_std, state.eps)
    return z / denom[None, :]


def soft_norm_inverse(y: np.ndarray, state: SoftNormState) -> np.ndarray:
    denom = np.maximum(state.run_std, state.eps)
    scale = np.where(np.abs(state.scale) < state.eps, state.eps, state.scale)
    return (y * denom[None, :] - state.bias[None, :]) / scale[None, :]


# ---------------------------------------------------------------------------
# codec assembly
# ---------------------------------------------------------------------------


def init_codec(config: TrbConfig, rng, dtype=np.float32) -> dict:
    w = config.embed_dim
    width = config.audio_channels * config.patch_size
    p = {}
    p["enc_proj.w"] = (rng.standard_normal((width, w)) / np.sqrt(width)).astype(dtype)
    p["enc_proj.b"] = np.zeros(w, dtype=dtype)
    p["enc.query"] = (0.02 * rng.standard_normal(w)).astype(dtype)
    p.update(init_stack("enc", config, rng, dtype))
    p["lat_proj.w"] = (rng.standard_normal((w, config.latent_dim)) / np.sqrt(w)).astype(dtype)
    p["lat_proj.b"] = np.zeros(config.latent_dim, dtype=dtype)
    p["dec_proj.w"] = (rng.standard_normal((config.latent_dim, w)) / np.sqrt(config.latent_dim)).astype(dtype)
    p["dec_proj.b"] = np.zeros(w, dtype=dtype)
    p["dec.queries"] = (0.02 * rng.standard_normal((config.resample_factor, w))).astype(dtype)
    p.update(init_stack("dec", config, rng, dtype))
    p["out_proj.w"] = (rng.standard_normal((w, width)) / np.sqrt(w)).astype(dtype)
    p["out_proj.b"] = np.zeros(width, dtype=dtype)
    p["softnorm.scale"] = np.ones(config.latent_dim, dtype=dtype)
    p["softnorm.bias"] = np.zeros(config.latent_dim, dtype=dtype)
    p["softnorm.run_std"] = np.ones(config.latent_dim, dtype=dtype)
    return p


def _softnorm_state(params) -> SoftNormState:
    return SoftNormState(
        scale=params["softnorm.scale"], bias=params["softnorm.bias"], run_std=params["softnorm.run_std"]
    )


def encode(params, config: TrbConfig, signal: np.ndarray, training: bool = False):
    """(audio_channels, samples) -> latent (latent_dim, L), with cache."""
    embs = patch(signal, config.patch_size)
    h, c_proj = nn.linear_fwd(embs, params["enc_proj.w"], params["enc_proj.b"])
    down, c_down = trb_downsample(params, "enc", h, config.resample_factor, config)
    lat, c_lat = nn.linear_fwd(down, params["lat_proj.w"], params["lat_proj.b"])
    state = _softnorm_state(params)
    y = soft_norm(lat, state, training=training)
    cache = (embs.shape, c_proj, c_down, c_lat, state)
    return np.ascontiguousarray(y.T), cache


def decode(params, config: TrbConfig, latent: np.ndarray, n_samples: int | None = None):
    """latent (latent_dim, L) -> (audio_channels, samples), with cache."""
    y = np.ascontiguousarray(latent.T)
    state = _softnorm_state(params)
    lat = soft_norm_inverse(y, state)
    h, c_proj = nn.linear_fwd(lat, params["dec_proj.w"], params["dec_proj.b"])
    up, c_up = trb_upsample(params, "dec", h, config.resample_factor, config)
    embs, c_out = nn.linear_fwd(up, params["out_proj.w"], params["out_proj.b"])
    signal = unpatch(embs, config.audio_channels)
    if n_samples is not None:
        signal = signal[:, :n_samples]
    cache = (c_proj, c_up, c_out, state, y.shape)
    return signal, cache


def reconstruction_step(params, config: TrbConfig, signal: np.ndarray, opt) -> float:
    """One MSE reconstruction step through encode -> decode (toy training)."""
    from .dit import _acc

    latent, ec = encode(params, config, signal, training=True)
    recon, dc = decode(params, config, latent)
    target = np.zeros_like(recon)
    target[:, : signal.shape[1]] = signal
    diff = recon - target
    loss = float((diff**2).mean())
    grads: dict = {}

    d_sig = (2.0 / diff.size) * diff
    d_embs = patch(d_sig, config.patch_size)  # unpatch adjoint is patch
    c_proj_d, c_up, c_out, state, yshape = dc
    d_up, dwo, dbo = nn.linear_bwd(d_embs, c_out)
    _acc(grads, "out_proj.w", dwo)
    _acc(grads, "out_proj.b", dbo)
    d_h = trb_upsample_bwd(d_up, c_up, params, "dec", config, grads)
    d_lat, dwd, dbd = nn.linear_bwd(d_h, c_proj_d)
    _acc(grads, "dec_proj.w", dwd)
    _acc(grads, "dec_proj.b", dbd)
    # The bottleneck roundtrip soft_norm_inverse(soft_norm(z)) is the identity
    # in z for any scale/bias/std, so the affine parameters receive no
    # gradient from pure reconstruction and d flows straight through.
    _, c_proj_e, c_down, c_lat, _ = ec
    d_latpre = d_lat
    d_down, dwl, dbl = nn.linear_bwd(d_latpre, c_lat)
    _acc(grads, "lat_proj.w", dwl)
    _acc(grads, "lat_proj.b", dbl)
    d_he = trb_downsample_bwd(d_down, c_down, params, "enc", config, grads)
    _, dwe, dbe = nn.linear_bwd(d_he, c_proj_e)
    _acc(grads, "enc_proj.w", dwe)
    _acc(grads, "enc_proj.b", dbe)
    grads.pop("softnorm.run_std", None)
    opt.step(params, grads)
    return loss
