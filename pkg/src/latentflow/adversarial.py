"""Adversarial post-training of the one-step generator.

The generator keeps the velocity parameterization and recovers clean
estimates via one-step Euler, x0_hat = x_t - t * v(x_t, t, c); real and
generated samples are renoised to a shared fresh noise level t_D before a
fully-conditioned discriminator scores them per frame. Losses: relativistic
softplus pair losses for both players, a prompt-shuffling contrastive loss
for the discriminator only, and a spherical-geodesic alignment loss against
the oracle embedder for the generator only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import dit, nn, schedules
from .core import LatentSequence, build_batch, silence_augment
from .flow import EmaState, ema_update, sample_inpaint_mask
from .kernels import conv1d3_bwd, conv1d3_fwd
from .nn import Adam, sigmoid, softplus
from .synth import OracleEmbedder, oracle_audio_bwd, oracle_audio_fwd

N_RES_BLOCKS = 4
GN_GROUPS = 8
LEAKY_SLOPE = 0.2


def one_step_x0(x_t: np.ndarray, t, v: np.ndarray) -> np.ndarray:
    """x0_hat = x_t - t * v; at t=0 this returns x_t exactly."""
    t = np.asarray(t)
    if t.ndim == 1:
        t = t[:, None, None]
    return x_t - t * v


def one_step_from_model(params, config, x_t, validity, cond: dit.CondBatch):
    """Run the velocity model and form the one-step clean estimate."""
    v, cache = dit.dit_forward(params, config, x_t, validity, cond)
    return one_step_x0(x_t, cond.t, v.astype(np.float64)), v, cache


def renoise_pair(x0, x0_hat, t_d, eps_prime):
    """x = (1 - t_D) * {x0 or x0_hat} + t_D * eps'; eps' is shared by the pair."""
    t_d = np.asarray(t_d)
    if t_d.ndim == 1:
        t_d = t_d[:, None, None]
    return (1.0 - t_d) * x0 + t_d * eps_prime, (1.0 - t_d) * x0_hat + t_d * eps_prime


# ---------------------------------------------------------------------------
# discriminator: tapped backbone features -> convolutional scoring head
# ---------------------------------------------------------------------------


def default_tap_layer(n_blocks: int) -> int:
    """Feature tap a bit past the middle of the stack (paper-style depth ratio)."""
    return max(0, math.ceil(0.58 * n_blocks) - 1)


@dataclass
class DiscriminatorState:
    params: dict  # backbone tensors plus head.* tensors
    tap_layer: int


def init_disc_head(config: dit.ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    d = config.embed_dim
    if d % 16 != 0:
        raise ValueError("init_disc_head: embed_dim must be divisible by 16 for GroupNorm(8)")
    h = {}

    def conv(name, cin, cout):
        h[f"head.{name}.w"] = (rng.standard_normal((cout, cin, 3)) / np.sqrt(3 * cin)).astype(dtype)
        h[f"head.{name}.b"] = np.zeros(cout, dtype=dtype)

    conv("conv_in", d, d)
    for i in range(N_RES_BLOCKS):
        conv(f"res{i}.conv1", d, d)
        h[f"head.res{i}.gn1.g"] = np.ones(d, dtype=dtype)
        h[f"head.res{i}.gn1.b"] = np.zeros(d, dtype=dtype)
        conv(f"res{i}.conv2", d, d)
        h[f"head.res{i}.gn2.g"] = np.ones(d, dtype=dtype)
        h[f"head.res{i}.gn2.b"] = np.zeros(d, dtype=dtype)
    conv("score1", d, d // 2)
    conv("score2", d // 2, 1)
    return h


def init_discriminator(
    backbone_params: dict,
    config: dit.ModelConfig,
    rng: np.random.Generator,
    tap_layer: int | None = None,
) -> DiscriminatorState:
    params = {k: v.copy() for k, v in backbone_params.items()}
    params.update(init_disc_head(config, rng, dtype=params["proj_in.w"].dtype))
    tap = default_tap_layer(config.n_blocks) if tap_layer is None else tap_layer
    if not 0 <= tap < config.n_blocks:
        raise ValueError("init_discriminator: tap_layer must lie in [0, n_blocks)")
    return DiscriminatorState(params=params, tap_layer=tap)


def _head_conv_fwd(params, name, x, valid):
    y = conv1d3_fwd(x, params[f"head.{name}.w"], params[f"head.{name}.b"])
    y *= valid[:, None, :]  # keep padding inert for the next kernel-3 conv
    return y, x


def _head_conv_bwd(dy, x_in, params, name, grads, valid):
    dy = dy * valid[:, None, :]
    dx, dw, db = conv1d3_bwd(dy, x_in, params[f"head.{name}.w"])
    dit._acc(grads, f"head.{name}.w", dw)
    dit._acc(grads, f"head.{name}.b", db)
    return dx


def disc_head_fwd(params, feats, valid):
    """feats: (B, d, L) tapped features (already zeroed at padded frames)."""
    caches = {}
    h, caches["conv_in"] = _head_conv_fwd(params, "conv_in", feats, valid)
    for i in range(N_RES_BLOCKS):
        skip = h
        c1, caches[f"res{i}.conv1_x"] = _head_conv_fwd(params, f"res{i}.conv1", h, valid)
        g1, caches[f"res{i}.gn1"] = nn.groupnorm_fwd(
            c1, params[f"head.res{i}.gn1.g"], params[f"head.res{i}.gn1.b"], valid, GN_GROUPS
        )
        a1, caches[f"res{i}.lr1"] = nn.leaky_relu_fwd(g1, LEAKY_SLOPE)
        c2, caches[f"res{i}.conv2_x"] = _head_conv_fwd(params, f"res{i}.conv2", a1, valid)
        g2, caches[f"res{i}.gn2"] = nn.groupnorm_fwd(
            c2, params[f"head.res{i}.gn2.g"], params[f"head.res{i}.gn2.b"], valid, GN_GROUPS
        )
        a2, caches[f"res{i}.lr2"] = nn.leaky_relu_fwd(g2, LEAKY_SLOPE)
        h = skip + a2
    s1, caches["score1_x"] = _head_conv_fwd(params, "score1", h, valid)
    a3, caches["score_lr"] = nn.leaky_relu_fwd(s1, LEAKY_SLOPE)
    s2, caches["score2_x"] = _head_conv_fwd(params, "score2", a3, valid)
    return s2[:, 0, :], caches


def disc_head_bwd(params, caches, d_scores, valid, grads):
    d = d_scores[:, None, :] * valid[:, None, :]
    d = _head_conv_bwd(d, caches["score2_x"], params, "score2", grads, valid)
    d = nn.leaky_relu_bwd(d, caches["score_lr"])
    d = _head_conv_bwd(d, caches["score1_x"], params, "score1", grads, valid)
    for i in range(N_RES_BLOCKS - 1, -1, -1):
        d_skip = d
        da2 = nn.leaky_relu_bwd(d, caches[f"res{i}.lr2"])
        dg2, dgam2, dbet2 = nn.groupnorm_bwd(da2, caches[f"res{i}.gn2"])
        dit._acc(grads, f"head.res{i}.gn2.g", dgam2)
        dit._acc(grads, f"head.res{i}.gn2.b", dbet2)
        dc2 = _head_conv_bwd(dg2, caches[f"res{i}.conv2_x"], params, f"res{i}.conv2", grads, valid)
        da1 = nn.leaky_relu_bwd(dc2, caches[f"res{i}.lr1"])
        dg1, dgam1, dbet1 = nn.groupnorm_bwd(da1, caches[f"res{i}.gn1"])
        dit._acc(grads, f"head.res{i}.gn1.g", dgam1)
        dit._acc(grads, f"head.res{i}.gn1.b", dbet1)
        dc1 = _head_conv_bwd(dg1, caches[f"res{i}.conv1_x"], params, f"res{i}.conv1", grads, valid)
        d = d_skip + dc1
    d = _head_conv_bwd(d, caches["conv_in"], params, "conv_in", grads, valid)
    return d


def discriminator_score(state: DiscriminatorState, config, x, validity, cond: dit.CondBatch):
    """Per-frame realness scores (B, L); padded frames score zero and are
    excluded from every downstream reduction."""
    hidden, bb_cache = dit.dit_forward(
        state.params, config, x, validity, cond, tap_layer=state.tap_layer
    )
    M = config.memory_count
    feats = np.ascontiguousarray(hidden[:, M:, :].transpose(0, 2, 1))
    valid = np.asarray(validity, dtype=bool)
    feats = feats * valid[:, None, :]
    scores, head_caches = disc_head_fwd(state.params, feats, valid)
    cache = {"bb": bb_cache, "head": head_caches, "valid": valid, "M": M, "dtype": feats.dtype}
    return scores, cache


def discriminator_backward(state: DiscriminatorState, config, cache, d_scores):
    """Returns (grads over backbone+head, d_input (B, C, L))."""
    grads: dict = {}
    valid = cache["valid"]
    d_feats = disc_head_bwd(state.params, cache["head"], d_scores.astype(cache["dtype"]), valid, grads)
    d_feats = d_feats * valid[:, None, :]
    B, d, L = d_feats.shape
    M = cache["M"]
    d_hidden = np.zeros((B, M + L, d), dtype=cache["dtype"])
    d_hidden[:, M:, :] = d_feats.transpose(0, 2, 1)
    bb_grads, dx = dit.dit_backward(state.params, config, cache["bb"], d_hidden)
    for k, v in bb_grads.items():
        dit._acc(grads, k, v)
    return grads, dx


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _frame_weights(validity: np.ndarray) -> np.ndarray:
    """Mean over valid frames, then over the batch."""
    B = validity.shape[0]
    n = validity.sum(axis=1, keepdims=True).astype(np.float64)
    n[n == 0] = 1.0
    return validity / (n * B)


def relativistic_losses(scores_real, scores_fake, validity):
    """(L_R_gen, L_R_disc): softplus of the paired score margin."""
    w = _frame_weights(np.asarray(validity, dtype=bool))
    diff = scores_real.astype(np.float64) - scores_fake.astype(np.float64)
    lg = float((w * softplus(diff)).sum())
    ld = float((w * softplus(-diff)).sum())
    return lg, ld


def contrastive_loss(state, config, x_t, validity, cond: dit.CondBatch, rng):
    """Discriminator-only prompt-contrast loss; None when B < 2."""
    B = x_t.shape[0]
    if B < 2:
        return None
    k = int(rng.integers(1, B))
    cond_shuf = replace(cond, tokens=np.roll(cond.tokens, k, axis=0))
    s_corr, _ = discriminator_score(state, config, x_t, validity, cond)
    s_shuf, _ = discriminator_score(state, config, x_t, validity, cond_shuf)
    w = _frame_weights(np.asarray(validity, dtype=bool))
    return float((w * softplus(-(s_corr - s_shuf))).sum())


def geodesic_clap_loss(e_text, e_audio) -> float:
    """2 * arcsin^2(||e_t - e_a|| / 2) on the unit sphere; range [0, pi^2/2]."""
    loss, _ = geodesic_clap_grad(e_text, e_audio)
    return loss


def geodesic_clap_grad(e_text, e_audio):
    """Returns (loss, d loss / d e_audio) with internal normalization."""
    t = np.asarray(e_text, dtype=np.float64)
    a = np.asarray(e_audio, dtype=np.float64)
    nt = np.linalg.norm(t)
    na = np.linalg.norm(a)
    u = t / (nt if nt > 0 else 1.0)
    v = a / (na if na > 0 else 1.0)
    dvec = u - v
    dist = np.linalg.norm(dvec)
    r = min(dist / 2.0, 1.0)
    loss = float(2.0 * np.arcsin(r) ** 2)
    if dist < 1e-15:
        return loss, np.zeros_like(a)
    r_safe = min(r, 1.0 - 1e-12)
    dl_dr = 4.0 * np.arcsin(r_safe) / np.sqrt(1.0 - r_safe * r_safe)
    dl_dv = dl_dr * (-dvec) / (2.0 * dist)
    d_a = (dl_dv - v * (v @ dl_dv)) / (na if na > 0 else 1.0)
    return loss, d_a


# ---------------------------------------------------------------------------
# alternating trainer
# ---------------------------------------------------------------------------


class PostTrainer:
    """One discriminator step then one generator step per iteration.

    EMA tracks the generator only. The oracle embedder supplies both sides of
    the alignment loss.
    """

    def __init__(
        self,
        gen_params: dict,
        disc: DiscriminatorState,
        config: dit.ModelConfig,
        spec: schedules.ScheduleSpec,
        dataset: list,
        rng: np.random.Generator,
        batch_size: int = 8,
        gen_lr: float = 5e-5,
        disc_lr: float = 1e-4,
        clap_weight: float = 1.0,
        silence_mean_seconds: float = 4.0,
    ):
        if not dataset:
            raise ValueError("PostTrainer: dataset must be non-empty")
        self.gen = gen_params
        self.disc = disc
        self.config = config
        self.spec = spec
        self.dataset = dataset
        self.rng = rng
        self.batch_size = batch_size
        self.clap_weight = clap_weight
        self.silence_mean_seconds = silence_mean_seconds
        self.opt_g = Adam(lr=gen_lr)
        self.opt_d = Adam(lr=disc_lr)
        self.ema = EmaState.init(gen_params)
        self.embedder = OracleEmbedder()
        self.step_count = 0
        self.skipped = 0

    def _make_batch(self):
        cfg = self.config
        idx = self.rng.integers(0, len(self.dataset), size=self.batch_size)
        seqs, tokens, durations = [], [], []
        for i in idx:
            toks, frames = self.dataset[int(i)]
            seq = LatentSequence(np.asarray(frames, dtype=np.float32), cfg.frame_rate)
            durations.append(seq.duration_seconds)
            seq = silence_augment(seq, self.rng, self.silence_mean_seconds, self.gen["silence_latent"])
            seqs.append(seq)
            tokens.append(list(toks))
        batch = build_batch(seqs)
        B, _, L = batch.data.shape
        t_raw = schedules.sample_timestep_train(self.rng, self.spec, size=B)
        mus = np.array(
            [
                schedules.mu_for_length(int(n), cfg.min_frames, cfg.max_frames, self.spec)
                for n in batch.valid_len
            ]
        )
        t = schedules.shift_timestep(t_raw, mus)
        keep_masks = [sample_inpaint_mask(self.rng, int(n)) for n in batch.valid_len]
        bundles = []
        for i in range(B):
            Lv = int(batch.valid_len[i])
            ref = LatentSequence(batch.data[i, :, :Lv], cfg.frame_rate)
            bundles.append(
                dit.ConditioningBundle(
                    timestep=float(t[i]),
                    duration_seconds=float(durations[i]),
                    text_tokens=tokens[i],
                    inpaint=dit.InpaintSpec(keep_masks[i], ref),
                    cfg_drop=False,
                )
            )
        cond = dit.make_cond_batch(bundles, cfg, L)
        vm = batch.validity_mask[:, None, :]
        eps = self.rng.standard_normal(batch.data.shape) * vm
        t_d = schedules.sample_timestep_disc(self.rng, size=B)
        eps_prime = self.rng.standard_normal(batch.data.shape) * vm
        return batch, cond, tokens, np.atleast_1d(t), t_d, eps, eps_prime

    def step(self) -> dict:
        cfg = self.config
        batch, cond, tokens, t, t_d, eps, eps_prime = self._make_batch()
        x0 = batch.data.astype(np.float64)
        valid = batch.validity_mask
        vm = valid[:, None, :]
        x_t = ((1.0 - t[:, None, None]) * x0 + t[:, None, None] * eps) * vm
        cond_d = replace(cond, t=t_d)
        w = _frame_weights(valid)
        B = x0.shape[0]

        # ---- discriminator update (generator output detached) ----
        x0_hat, _, _ = one_step_from_model(self.gen, cfg, x_t, valid, cond)
        x0_hat *= vm
        x_real, x_fake = renoise_pair(x0, x0_hat, t_d, eps_prime)
        s_real, c_real = discriminator_score(self.disc, cfg, x_real, valid, cond_d)
        s_fake, c_fake = discriminator_score(self.disc, cfg, x_fake, valid, cond_d)
        diff = (s_real - s_fake).astype(np.float64)
        l_r_d = float((w * softplus(-diff)).sum())
        d_sr = -w * sigmoid(-diff)
        d_sf = w * sigmoid(-diff)
        l_c_d = 0.0
        d_sshuf = None
        if B >= 2:
            k = int(self.rng.integers(1, B))
            cond_shuf = replace(cond_d, tokens=np.roll(cond_d.tokens, k, axis=0))
            s_shuf, c_shuf = discriminator_score(self.disc, cfg, x_real, valid, cond_shuf)
            diff_c = (s_real - s_shuf).astype(np.float64)
            l_c_d = float((w * softplus(-diff_c)).sum())
            d_sr = d_sr - w * sigmoid(-diff_c)
            d_sshuf = w * sigmoid(-diff_c)
        d_grads, _ = discriminator_backward(self.disc, cfg, c_real, d_sr)
        g2, _ = discriminator_backward(self.disc, cfg, c_fake, d_sf)
        for kk, vv in g2.items():
            dit._acc(d_grads, kk, vv)
        if d_sshuf is not None:
            g3, _ = discriminator_backward(self.disc, cfg, c_shuf, d_sshuf)
            for kk, vv in g3.items():
                dit._acc(d_grads, kk, vv)
        disc_loss = l_r_d + l_c_d
        if np.isfinite(disc_loss):
            self.opt_d.step(self.disc.params, d_grads)
        else:
            self.skipped += 1

        # ---- generator update (discriminator params frozen this half) ----
        x0_hat, _, g_cache = one_step_from_model(self.gen, cfg, x_t, valid, cond)
        x0_hat *= vm
        _, x_fake = renoise_pair(x0, x0_hat, t_d, eps_prime)
        s_real2, _ = discriminator_score(self.disc, cfg, x_real, valid, cond_d)
        s_fake2, c_fake2 = discriminator_score(self.disc, cfg, x_fake, valid, cond_d)
        diff2 = (s_real2 - s_fake2).astype(np.float64)
        l_r_g = float((w * softplus(diff2)).sum())
        _, d_xfake = discriminator_backward(self.disc, cfg, c_fake2, -w * sigmoid(diff2))
        t_db = np.asarray(t_d)[:, None, None]
        d_x0hat = (1.0 - t_db) * d_xfake.astype(np.float64)
        l_clap = 0.0
        for i in range(B):
            Lv = int(batch.valid_len[i])
            e_a, ocache = oracle_audio_fwd(x0_hat[i, :, :Lv])
            e_t = self.embedder.embed_text(tokens[i])
            li, d_ea = geodesic_clap_grad(e_t, e_a)
            l_clap += li / B
            d_x0hat[i, :, :Lv] += self.clap_weight * oracle_audio_bwd(d_ea / B, ocache)
        d_x0hat *= vm
        d_v = (-t[:, None, None] * d_x0hat).astype(self.gen["proj_in.w"].dtype)
        g_grads, _ = dit.dit_backward(self.gen, cfg, g_cache, d_v)
        gen_loss = l_r_g + self.clap_weight * l_clap
        if np.isfinite(gen_loss):
            self.opt_g.step(self.gen, g_grads)
            ema_update(self.ema, self.gen)
        else:
            self.skipped += 1

        self.step_count += 1
        return {
            "step": self.step_count,
            "loss_rel_gen": l_r_g,
            "loss_clap": l_clap,
            "loss_rel_disc": l_r_d,
            "loss_contrastive": l_c_d,
            "t_mean": float(np.mean(t)),
            "t_disc_mean": float(np.mean(t_d)),
            "skipped": self.skipped,
        }
