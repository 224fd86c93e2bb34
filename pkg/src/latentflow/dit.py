"""Velocity-field transformer over variable-length latent sequences.

Architecture: residual 1x1 in-convolution, linear lift to the embed width,
learned memory embeddings prepended as a global attend-to buffer, a stack of
transformer blocks (masked self-attention with optional differential maps,
cross-attention over a token/duration context, per-frame additive inpainting
conditioning, SwiGLU feed-forward, all modulated by shared-plus-per-block
adaptive scales/shifts/gates), then projection back to latent channels and a
residual 1x1 out-convolution.

Forward passes build a cache; ``dit_backward`` replays it in reverse and
returns parameter gradients plus the gradient w.r.t. the input latents.
Everything is plain numpy so float32 and float64 both work (float64 is what
the finite-difference gradient checks use).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .core import (
    DEFAULT_DOWNSAMPLE_RATIO,
    DEFAULT_SAMPLE_RATE,
    LatentSequence,
    allocate_generation_length,
)

ADALN_SIGNALS = ("gamma_s", "beta_s", "gate_s", "gamma_f", "beta_f", "gate_f")


@dataclass
class ModelConfig:
    latent_channels: int = 8
    embed_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    memory_count: int = 64
    rope_rotate_dims: Optional[int] = None  # default: min(32, head_dim)
    differential_attention: bool = False
    fourier_dim: int = 256
    text_ctx_len: int = 16
    text_dim: int = 32
    vocab_size: int = 32
    max_seconds: float = 120.0
    min_seconds: float = 1.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    downsample_ratio: int = DEFAULT_DOWNSAMPLE_RATIO
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("ModelConfig: embed_dim must be divisible by n_heads")
        if self.rope_rotate_dims is None:
            self.rope_rotate_dims = min(32, self.head_dim)
        if self.rope_rotate_dims % 2 != 0 or self.rope_rotate_dims > self.head_dim:
            raise ValueError("ModelConfig: rope_rotate_dims must be even and <= head_dim")
        if self.memory_count < 0:
            raise ValueError("ModelConfig: memory_count must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.downsample_ratio

    @property
    def max_frames(self) -> int:
        """Longest sequence the model is configured for (incl. silence pad)."""
        return allocate_generation_length(
            self.max_seconds, f_s=self.sample_rate, r=self.downsample_ratio
        ).L

    @property
    def min_frames(self) -> int:
        """Shortest trainable clip, without silence extension."""
        return allocate_generation_length(
            self.min_seconds, 0.0, self.sample_rate, self.downsample_ratio
        ).L

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "embed_dim": self.embed_dim,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "memory_count": self.memory_count,
            "rope_rotate_dims": self.rope_rotate_dims,
            "differential_attention": self.differential_attention,
            "fourier_dim": self.fourier_dim,
            "text_ctx_len": self.text_ctx_len,
            "text_dim": self.text_dim,
            "vocab_size": self.vocab_size,
            "max_seconds": self.max_seconds,
            "min_seconds": self.min_seconds,
            "sample_rate": self.sample_rate,
            "downsample_ratio": self.downsample_ratio,
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class InpaintSpec:
    """Binary keep/generate mask (1=keep) plus the masked reference latent."""

    keep_mask: np.ndarray  # (L,) bool
    reference: LatentSequence

    def __post_init__(self):
        self.keep_mask = np.asarray(self.keep_mask, dtype=bool)
        if self.keep_mask.ndim != 1:
            raise ValueError("InpaintSpec: keep_mask must be 1-D")
        if self.keep_mask.shape[0] != self.reference.length:
            raise ValueError("InpaintSpec: keep_mask length must equal reference length")

    def conditioning_tensor(self) -> np.ndarray:
        """Channel-concat of the mask and the masked reference, (C+1, L)."""
        m = self.keep_mask.astype(self.reference.frames.dtype)
        return np.concatenate([m[None, :], self.reference.frames * m[None, :]], axis=0)


@dataclass
class ConditioningBundle:
    timestep: float
    duration_seconds: float
    text_tokens: list[int] = field(default_factory=list)
    inpaint: Optional[InpaintSpec] = None
    cfg_drop: bool = False


@dataclass
class CondBatch:
    """Array view of a batch of conditioning bundles."""

    t: np.ndarray  # (B,)
    duration: np.ndarray  # (B,) seconds
    tokens: np.ndarray  # (B, ctx_len) int, -1 = padding slot
    inpaint_cond: np.ndarray  # (B, C+1, L)
    cfg_drop: np.ndarray  # (B,) bool


def make_cond_batch(bundles: list[ConditioningBundle], config: ModelConfig, L: int) -> CondBatch:
    B = len(bundles)
    C = config.latent_channels
    t = np.array([b.timestep for b in bundles], dtype=np.float64)
    dur = np.array([b.duration_seconds for b in bundles], dtype=np.float64)
    tokens = np.full((B, config.text_ctx_len), -1, dtype=np.int64)
    for i, b in enumerate(bundles):
        ids = list(b.text_tokens)[: config.text_ctx_len]
        for tok in ids:
            if not 0 <= tok < config.vocab_size:
                raise ValueError(f"make_cond_batch: token id {tok} outside vocabulary")
        tokens[i, : len(ids)] = ids
    inp = np.zeros((B, C + 1, L), dtype=np.float64)
    for i, b in enumerate(bundles):
        if b.inpaint is not None:
            cond = b.inpaint.conditioning_tensor()
            if cond.shape[1] > L:
                raise ValueError("make_cond_batch: inpaint spec longer than sequence")
            inp[i, :, : cond.shape[1]] = cond
    drop = np.array([b.cfg_drop for b in bundles], dtype=bool)
    return CondBatch(t=t, duration=dur, tokens=tokens, inpaint_cond=inp, cfg_drop=drop)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _winit(rng, fan_in, shape, dtype):
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    C, d = config.latent_channels, config.embed_dim
    td, F = config.text_dim, config.fourier_dim
    hd = config.head_dim
    p = {}
    p["conv_in.w"] = (0.02 * rng.standard_normal((C, C))).astype(dtype)
    p["conv_in.b"] = np.zeros(C, dtype=dtype)
    p["proj_in.w"] = _winit(rng, C, (C, d), dtype)
    p["proj_in.b"] = np.zeros(d, dtype=dtype)
    p["memory"] = (0.02 * rng.standard_normal((config.memory_count, d))).astype(dtype)
    p["silence_latent"] = np.zeros(C, dtype=dtype)
    p["text_embed"] = (0.02 * rng.standard_normal((config.vocab_size, td))).astype(dtype)
    p["text_pad"] = (0.02 * rng.standard_normal(td)).astype(dtype)
    for name, din, dhid, dout in (
        ("ctx_dur", F, td, td),
        ("adaln_t", F, d, d),
        ("adaln_dur", F, d, d),
    ):
        p[f"{name}.w1"] = _winit(rng, din, (din, dhid), dtype)
        p[f"{name}.b1"] = np.zeros(dhid, dtype=dtype)
        p[f"{name}.w2"] = _winit(rng, dhid, (dhid, dout), dtype)
        p[f"{name}.b2"] = np.zeros(dout, dtype=dtype)
    p["adaln_head.w1"] = _winit(rng, d, (d, d), dtype)
    p["adaln_head.b1"] = np.zeros(d, dtype=dtype)
    p["adaln_head.w2"] = _winit(rng, d, (d, 6 * d), dtype)
    p["adaln_head.b2"] = np.zeros(6 * d, dtype=dtype)
    for k in range(config.n_blocks):
        pre = f"block{k}."
        p[pre + "attn_norm.g"] = np.ones(d, dtype=dtype)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{w}"] = _winit(rng, d, (d, d), dtype)
        p[pre + "attn.qnorm.g"] = np.ones(hd, dtype=dtype)
        p[pre + "attn.knorm.g"] = np.ones(hd, dtype=dtype)
        p[pre + "adaln_bias"] = np.zeros((6, d), dtype=dtype)
        p[pre + "xattn_norm.g"] = np.ones(d, dtype=dtype)
        p[pre + "xattn.wq"] = _winit(rng, d, (d, d), dtype)
        p[pre + "xattn.wk"] = _winit(rng, td, (td, d), dtype)
        p[pre + "xattn.wv"] = _winit(rng, td, (td, d), dtype)
        p[pre + "xattn.wo"] = _winit(rng, d, (d, d), dtype)
        p[pre + "xattn.qnorm.g"] = np.ones(hd, dtype=dtype)
        p[pre + "xattn.knorm.g"] = np.ones(hd, dtype=dtype)
        if config.differential_attention:
            # second map starts as a small perturbation of the first so the
            # subtracted output is near zero and training breaks the symmetry
            for base, noise in (("attn.wq", "attn.wq2"), ("attn.wk", "attn.wk2")):
                p[pre + noise] = p[pre + base] + (1e-3 * rng.standard_normal((d, d))).astype(dtype)
            p[pre + "xattn.wq2"] = p[pre + "xattn.wq"] + (
                1e-3 * rng.standard_normal((d, d))
            ).astype(dtype)
            p[pre + "xattn.wk2"] = p[pre + "xattn.wk"] + (
                1e-3 * rng.standard_normal((td, d))
            ).astype(dtype)
        p[pre + "inpaint.w1"] = _winit(rng, C + 1, (C + 1, d), dtype)
        p[pre + "inpaint.b1"] = np.zeros(d, dtype=dtype)
        p[pre + "inpaint.w2"] = np.zeros((d, d), dtype=dtype)  # zero-init: no-op at start
        p[pre + "inpaint.b2"] = np.zeros(d, dtype=dtype)
        p[pre + "ffn_norm.g"] = np.ones(d, dtype=dtype)
        p[pre + "ffn.wa"] = _winit(rng, d, (d, 4 * d), dtype)
        p[pre + "ffn.wg"] = _winit(rng, d, (d, 4 * d), dtype)
        p[pre + "ffn.wo"] = _winit(rng, 4 * d, (4 * d, d), dtype)
    # zero-init output path: the untrained model predicts ~zero velocity
    p["proj_out.w"] = np.zeros((d, C), dtype=dtype)
    p["proj_out.b"] = np.zeros(C, dtype=dtype)
    p["conv_out.w"] = np.zeros((C, C), dtype=dtype)
    p["conv_out.b"] = np.zeros(C, dtype=dtype)
    return p


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _acc(grads: dict, name: str, val: np.ndarray) -> None:
    if name in grads:
        grads[name] += val
    else:
        grads[name] = val


# ---------------------------------------------------------------------------
# sub-layers
# ---------------------------------------------------------------------------


def _mlp2_fwd(params, pfx, x):
    h_pre, c1 = nn.linear_fwd(x, params[pfx + ".w1"], params[pfx + ".b1"])
    h, cs = nn.silu_fwd(h_pre)
    y, c2 = nn.linear_fwd(h, params[pfx + ".w2"], params[pfx + ".b2"])
    return y, (c1, cs, c2)


def _mlp2_bwd(dy, cache, grads, pfx):
    c1, cs, c2 = cache
    dh, dw2, db2 = nn.linear_bwd(dy, c2)
    _acc(grads, pfx + ".w2", dw2)
    _acc(grads, pfx + ".b2", db2)
    dh_pre = nn.silu_bwd(dh, cs)
    dx, dw1, db1 = nn.linear_bwd(dh_pre, c1)
    _acc(grads, pfx + ".w1", dw1)
    _acc(grads, pfx + ".b1", db1)
    return dx


def _attn_fwd(params, pfx, xq, kv, key_valid, rope_cs, config):
    """Shared self/cross attention. rope_cs is (cos, sin) or None (no RoPE)."""
    H = config.n_heads
    scale = 1.0 / np.sqrt(config.head_dim)
    diff = params.get(pfx + ".wq2") is not None

    q, cq = nn.linear_fwd(xq, params[pfx + ".wq"])
    k, ck = nn.linear_fwd(kv, params[pfx + ".wk"])
    v, cv = nn.linear_fwd(kv, params[pfx + ".wv"])
    qh, kh, vh = nn.split_heads(q, H), nn.split_heads(k, H), nn.split_heads(v, H)
    qn, cqn = nn.rmsnorm_fwd(qh, params[pfx + ".qnorm.g"])
    kn, ckn = nn.rmsnorm_fwd(kh, params[pfx + ".knorm.g"])
    if rope_cs is not None:
        qr, cqr = nn.rope_fwd(qn, *rope_cs)
        kr, ckr = nn.rope_fwd(kn, *rope_cs)
    else:
        qr, kr, cqr, ckr = qn, kn, None, None
    o, ca = nn.attention_fwd(qr, kr, vh, key_valid, scale)

    diff_cache = None
    if diff:
        q2, cq2 = nn.linear_fwd(xq, params[pfx + ".wq2"])
        k2, ck2 = nn.linear_fwd(kv, params[pfx + ".wk2"])
        q2h, k2h = nn.split_heads(q2, H), nn.split_heads(k2, H)
        q2n, cq2n = nn.rmsnorm_fwd(q2h, params[pfx + ".qnorm.g"])
        k2n, ck2n = nn.rmsnorm_fwd(k2h, params[pfx + ".knorm.g"])
        if rope_cs is not None:
            q2r, cq2r = nn.rope_fwd(q2n, *rope_cs)
            k2r, ck2r = nn.rope_fwd(k2n, *rope_cs)
        else:
            q2r, k2r, cq2r, ck2r = q2n, k2n, None, None
        o2, ca2 = nn.attention_fwd(q2r, k2r, vh, key_valid, scale)
        o = o - o2
        diff_cache = (cq2, ck2, cq2n, ck2n, cq2r, ck2r, ca2)

    om = nn.merge_heads(o)
    out, co = nn.linear_fwd(om, params[pfx + ".wo"])
    cache = (cq, ck, cv, cqn, ckn, cqr, ckr, ca, diff_cache, co, H)
    return out, cache


def _attn_bwd(dout, cache, grads, pfx):
    """Returns (d_xq, d_kv)."""
    cq, ck, cv, cqn, ckn, cqr, ckr, ca, diff_cache, co, H = cache
    dom, dwo, _ = nn.linear_bwd(dout, co)
    _acc(grads, pfx + ".wo", dwo)
    B, L, d = dom.shape
    do = np.ascontiguousarray(dom.reshape(B, L, H, d // H).transpose(0, 2, 1, 3))

    dqr, dkr, dv = nn.attention_bwd(do, ca)
    if diff_cache is not None:
        cq2, ck2, cq2n, ck2n, cq2r, ck2r, ca2 = diff_cache
        dq2r, dk2r, dv2 = nn.attention_bwd(-do, ca2)
        dv = dv + dv2
        dq2n = nn.rope_bwd(dq2r, cq2r) if cq2r is not None else dq2r
        dk2n = nn.rope_bwd(dk2r, ck2r) if ck2r is not None else dk2r
        dq2h, dgq2 = nn.rmsnorm_bwd(dq2n, cq2n)
        dk2h, dgk2 = nn.rmsnorm_bwd(dk2n, ck2n)
        _acc(grads, pfx + ".qnorm.g", dgq2)
        _acc(grads, pfx + ".knorm.g", dgk2)
        dxq2, dwq2, _ = nn.linear_bwd(nn.merge_heads(dq2h), cq2)
        dkv2, dwk2, _ = nn.linear_bwd(nn.merge_heads(dk2h), ck2)
        _acc(grads, pfx + ".wq2", dwq2)
        _acc(grads, pfx + ".wk2", dwk2)
    else:
        dxq2 = dkv2 = None

    dqn = nn.rope_bwd(dqr, cqr) if cqr is not None else dqr
    dkn = nn.rope_bwd(dkr, ckr) if ckr is not None else dkr
    dqh, dgq = nn.rmsnorm_bwd(dqn, cqn)
    dkh, dgk = nn.rmsnorm_bwd(dkn, ckn)
    _acc(grads, pfx + ".qnorm.g", dgq)
    _acc(grads, pfx + ".knorm.g", dgk)
    dxq, dwq, _ = nn.linear_bwd(nn.merge_heads(dqh), cq)
    dkv_k, dwk, _ = nn.linear_bwd(nn.merge_heads(dkh), ck)
    dkv_v, dwv, _ = nn.linear_bwd(nn.merge_heads(dv), cv)
    _acc(grads, pfx + ".wq", dwq)
    _acc(grads, pfx + ".wk", dwk)
    _acc(grads, pfx + ".wv", dwv)
    dkv = dkv_k + dkv_v
    if dxq2 is not None:
        dxq = dxq + dxq2
        dkv = dkv + dkv2
    return dxq, dkv


def _block_fwd(params, k, h, key_valid, ctx, ctx_valid, inp_x, shared, rope_cs, config):
    pre = f"block{k}."
    d = config.embed_dim
    M = config.memory_count
    bias = params[pre + "adaln_bias"]
    sig = [shared[:, i * d : (i + 1) * d] + bias[i][None, :] for i in range(6)]
    g_s, b_s, gate_s_raw, g_f, b_f, gate_f_raw = sig

    a, cn1 = nn.rmsnorm_fwd(h, params[pre + "attn_norm.g"])
    a2 = a * (1.0 + g_s[:, None, :]) + b_s[:, None, :]
    sa, csa = _attn_fwd(params, pre + "attn", a2, a2, key_valid, rope_cs, config)
    gate_s = nn.sigmoid(1.0 - gate_s_raw)
    h1 = h + sa * gate_s[:, None, :]

    b, cn2 = nn.rmsnorm_fwd(h1, params[pre + "xattn_norm.g"])
    ca_out, cca = _attn_fwd(params, pre + "xattn", b, ctx, ctx_valid, None, config)
    h2 = h1 + ca_out

    add, cinp = _mlp2_fwd(params, pre + "inpaint", inp_x)
    h3 = h2.copy()
    h3[:, M:, :] += add

    c, cn3 = nn.rmsnorm_fwd(h3, params[pre + "ffn_norm.g"])
    c2 = c * (1.0 + g_f[:, None, :]) + b_f[:, None, :]
    f, cff = nn.swiglu_fwd(c2, params[pre + "ffn.wa"], params[pre + "ffn.wg"], params[pre + "ffn.wo"])
    gate_f = nn.sigmoid(1.0 - gate_f_raw)
    h4 = h3 + f * gate_f[:, None, :]

    cache = (cn1, a, g_s, csa, sa, gate_s, gate_s_raw, cn2, cca, cinp, cn3, c, g_f, cff, f, gate_f, gate_f_raw)
    return h4, cache


def _block_bwd(dh4, cache, grads, k, config):
    """Returns (dh, d_ctx, d_shared (B,6d))."""
    (cn1, a, g_s, csa, sa, gate_s, gate_s_raw, cn2, cca, cinp, cn3, c, g_f, cff, f, gate_f, gate_f_raw) = cache
    pre = f"block{k}."
    M = config.memory_count

    # feed-forward branch
    df = dh4 * gate_f[:, None, :]
    d_gate_f = (dh4 * f).sum(axis=1)
    d_gfraw = -d_gate_f * gate_f * (1.0 - gate_f)
    dc2, dwa, dwg, dwo = nn.swiglu_bwd(df, cff)
    _acc(grads, pre + "ffn.wa", dwa)
    _acc(grads, pre + "ffn.wg", dwg)
    _acc(grads, pre + "ffn.wo", dwo)
    d_gf = (dc2 * c).sum(axis=1)
    d_bf = dc2.sum(axis=1)
    dc = dc2 * (1.0 + g_f[:, None, :])
    dcn3, dg3 = nn.rmsnorm_bwd(dc, cn3)
    _acc(grads, pre + "ffn_norm.g", dg3)
    dh3 = dh4 + dcn3

    # inpainting branch (input is data; only parameter grads)
    _mlp2_bwd(dh3[:, M:, :], cinp, grads, pre + "inpaint")
    dh2 = dh3

    # cross-attention branch
    db, d_ctx = _attn_bwd(dh2, cca, grads, pre + "xattn")
    dcn2, dg2 = nn.rmsnorm_bwd(db, cn2)
    _acc(grads, pre + "xattn_norm.g", dg2)
    dh1 = dh2 + dcn2

    # self-attention branch
    dsa = dh1 * gate_s[:, None, :]
    d_gate_s = (dh1 * sa).sum(axis=1)
    d_gsraw = -d_gate_s * gate_s * (1.0 - gate_s)
    da2_q, da2_kv = _attn_bwd(dsa, csa, grads, pre + "attn")
    da2 = da2_q + da2_kv
    d_gs = (da2 * a).sum(axis=1)
    d_bs = da2.sum(axis=1)
    da = da2 * (1.0 + g_s[:, None, :])
    dcn1, dg1 = nn.rmsnorm_bwd(da, cn1)
    _acc(grads, pre + "attn_norm.g", dg1)
    dh = dh1 + dcn1

    d_shared = np.concatenate([d_gs, d_bs, d_gsraw, d_gf, d_bf, d_gfraw], axis=1)
    _acc(grads, pre + "adaln_bias", d_shared.sum(axis=0).reshape(6, -1))
    return dh, d_ctx, d_shared


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def dit_forward(params, config: ModelConfig, x, validity_mask, cond: CondBatch, tap_layer=None):
    """Run the transformer on a padded batch.

    x: (B, C, L) noised latents; validity_mask: (B, L) bool. Returns
    (velocity (B, C, L), cache), or (hidden (B, M+L, d), cache) when
    ``tap_layer`` selects an intermediate block output (used by the
    discriminator). Padded positions carry unspecified values; consumers
    must mask.
    """
    dtype = params["proj_in.w"].dtype
    B, C, L = x.shape
    if C != config.latent_channels:
        raise ValueError("dit_forward: input channel count does not match model config")
    if tap_layer is not None and not 0 <= tap_layer < config.n_blocks:
        raise ValueError("dit_forward: tap_layer must lie in [0, n_blocks)")
    M = config.memory_count
    x = x.astype(dtype, copy=False)

    # input path: residual 1x1 conv over channels, then lift to embed_dim
    xt = np.ascontiguousarray(x.transpose(0, 2, 1))  # (B, L, C)
    cv, c_ci = nn.linear_fwd(xt, params["conv_in.w"], params["conv_in.b"])
    h0 = xt + cv
    h1, c_pi = nn.linear_fwd(h0, params["proj_in.w"], params["proj_in.b"])
    mem = np.broadcast_to(params["memory"][None], (B, M, config.embed_dim))
    h = np.concatenate([mem, h1], axis=1)  # (B, M+L, d)
    key_valid = np.concatenate(
        [np.ones((B, M), dtype=bool), np.asarray(validity_mask, dtype=bool)], axis=1
    )

    # conditioning: timestep/duration -> shared modulation signals
    ff_t = nn.fourier_features(cond.t, config.fourier_dim).astype(dtype)
    ff_dur = nn.fourier_features(
        np.clip(cond.duration / config.max_seconds, 0.0, 1.0), config.fourier_dim
    ).astype(dtype)
    e_t, c_et = _mlp2_fwd(params, "adaln_t", ff_t)
    e_dur, c_edur = _mlp2_fwd(params, "adaln_dur", ff_dur)
    drop = cond.cfg_drop
    e_dur = e_dur.copy()
    e_dur[drop] = 0.0
    e = e_t + e_dur
    shared, c_head = _mlp2_fwd(params, "adaln_head", e)  # (B, 6d)

    # cross-attention context: token embeddings + one duration slot
    text_emb, c_emb = nn.embed_fwd(cond.tokens, params["text_embed"], params["text_pad"])
    dur_ctx, c_dctx = _mlp2_fwd(params, "ctx_dur", ff_dur)
    ctx = np.concatenate([text_emb, dur_ctx[:, None, :]], axis=1).astype(dtype)
    ctx[drop] = 0.0
    ctx_valid = np.ones((B, ctx.shape[1]), dtype=bool)  # cross-attention is never masked

    inp_x = np.ascontiguousarray(cond.inpaint_cond.transpose(0, 2, 1)).astype(dtype)  # (B, L, C+1)

    rope_cs = nn.rope_tables(M + L, config.rope_rotate_dims, config.rope_base, dtype)

    n_run = config.n_blocks if tap_layer is None else tap_layer + 1
    block_caches = []
    for k in range(n_run):
        h, bc = _block_fwd(params, k, h, key_valid, ctx, ctx_valid, inp_x, shared, rope_cs, config)
        block_caches.append(bc)

    common = {
        "c_ci": c_ci,
        "c_pi": c_pi,
        "c_et": c_et,
        "c_edur": c_edur,
        "c_head": c_head,
        "c_emb": c_emb,
        "c_dctx": c_dctx,
        "drop": drop,
        "blocks": block_caches,
        "n_run": n_run,
        "B": B,
        "L": L,
        "tap": tap_layer,
    }
    if tap_layer is not None:
        return h, common

    hf = h[:, M:, :]
    y, c_po = nn.linear_fwd(hf, params["proj_out.w"], params["proj_out.b"])
    cv2, c_co = nn.linear_fwd(y, params["conv_out.w"], params["conv_out.b"])
    out = y + cv2
    common["c_po"] = c_po
    common["c_co"] = c_co
    return np.ascontiguousarray(out.transpose(0, 2, 1)), common


def dit_backward(params, config: ModelConfig, cache, d_out):
    """Backward through a cached forward.

    d_out matches the forward output: (B, C, L) for a full pass or
    (B, M+L, d) for a tapped pass. Returns (grads dict, dx (B, C, L)).
    """
    M = config.memory_count
    grads: dict = {}

    if cache["tap"] is None:
        d_y_total = np.ascontiguousarray(d_out.transpose(0, 2, 1))
        dy_conv, dwco, dbco = nn.linear_bwd(d_y_total, cache["c_co"])
        _acc(grads, "conv_out.w", dwco)
        _acc(grads, "conv_out.b", dbco)
        dy = d_y_total + dy_conv
        dhf, dwpo, dbpo = nn.linear_bwd(dy, cache["c_po"])
        _acc(grads, "proj_out.w", dwpo)
        _acc(grads, "proj_out.b", dbpo)
        dh = np.zeros((cache["B"], M + cache["L"], config.embed_dim), dtype=dhf.dtype)
        dh[:, M:, :] = dhf
    else:
        dh = d_out

    d_ctx_total = None
    d_shared_total = None
    for k in range(cache["n_run"] - 1, -1, -1):
        dh, d_ctx, d_shared = _block_bwd(dh, cache["blocks"][k], grads, k, config)
        d_ctx_total = d_ctx if d_ctx_total is None else d_ctx_total + d_ctx
        d_shared_total = d_shared if d_shared_total is None else d_shared_total + d_shared

    drop = cache["drop"]

    # context path
    d_ctx_total = d_ctx_total.copy()
    d_ctx_total[drop] = 0.0
    ctx_len = config.text_ctx_len
    d_text = d_ctx_total[:, :ctx_len, :]
    d_dur_ctx = d_ctx_total[:, ctx_len, :]
    dtab, dpad = nn.embed_bwd(d_text, cache["c_emb"])
    _acc(grads, "text_embed", dtab)
    _acc(grads, "text_pad", dpad)
    _mlp2_bwd(d_dur_ctx, cache["c_dctx"], grads, "ctx_dur")

    # modulation path
    d_e = _mlp2_bwd(d_shared_total, cache["c_head"], grads, "adaln_head")
    _mlp2_bwd(d_e, cache["c_et"], grads, "adaln_t")
    d_e_dur = d_e.copy()
    d_e_dur[drop] = 0.0
    _mlp2_bwd(d_e_dur, cache["c_edur"], grads, "adaln_dur")

    # memory and input path
    _acc(grads, "memory", dh[:, :M, :].sum(axis=0))
    dh1 = dh[:, M:, :]
    dh0, dwpi, dbpi = nn.linear_bwd(dh1, cache["c_pi"])
    _acc(grads, "proj_in.w", dwpi)
    _acc(grads, "proj_in.b", dbpi)
    dxt_conv, dwci, dbci = nn.linear_bwd(dh0, cache["c_ci"])
    _acc(grads, "conv_in.w", dwci)
    _acc(grads, "conv_in.b", dbci)
    dxt = dh0 + dxt_conv
    dx = np.ascontiguousarray(dxt.transpose(0, 2, 1))
    return grads, dx
