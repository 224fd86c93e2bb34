"""Flow-matching pre-training.

Noising follows the linear interpolant x_t = (1 - t') x0 + t' eps with the
velocity target v = eps - x0. Noise is reassigned within each minibatch by an
entropic-OT coupling, timesteps come from the truncated logit-normal shifted
per sequence length, inpainting masks are sampled per item, and conditioning
is dropped with p=0.1 for guidance training. The loss is two independently
averaged masked MSE terms (generated region, kept region).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import dit, schedules
from .core import LatentSequence, PaddedBatch, build_batch, silence_augment
from .nn import Adam

MASK_P_FULL = 0.8
MASK_P_SEGMENTS = 0.1
MAX_SEGMENTS = 10
CFG_DROP_P = 0.1


@dataclass
class EmaState:
    """Exponential moving average of parameters with power-law warmup."""

    shadow: dict
    beta: float = 0.9995
    warmup_exponent: float = 0.75
    step: int = 0

    @classmethod
    def init(cls, params: dict, beta: float = 0.9995, warmup_exponent: float = 0.75):
        return cls({k: v.copy() for k, v in params.items()}, beta, warmup_exponent, 0)


def ema_update(ema: EmaState, params: dict) -> EmaState:
    """beta_eff = min(beta, 1 - (1+step)^(-warmup_exponent)); in-place update."""
    beta_eff = min(ema.beta, 1.0 - (1.0 + ema.step) ** (-ema.warmup_exponent))
    for k, v in params.items():
        s = ema.shadow[k]
        s *= beta_eff
        s += (1.0 - beta_eff) * v
    ema.step += 1
    return ema


def sample_inpaint_mask(rng: np.random.Generator, L: int) -> np.ndarray:
    """Keep-mask (1=keep, 0=generate) of length L.

    80% full generation (all zeros), 10% random disjoint segments to inpaint
    (1..10 segments, min length 1), 10% causal prefix kept.
    """
    if L < 2:
        raise ValueError("sample_inpaint_mask: L must be >= 2")
    u = rng.random()
    if u < MASK_P_FULL:
        return np.zeros(L, dtype=bool)
    if u < MASK_P_FULL + MASK_P_SEGMENTS:
        k = int(rng.integers(1, MAX_SEGMENTS + 1))
        k = min(k, (L + 1) // 2)
        cuts = np.sort(rng.choice(L + 1, size=2 * k, replace=False))
        keep = np.ones(L, dtype=bool)
        for i in range(k):
            keep[cuts[2 * i] : cuts[2 * i + 1]] = False
        return keep
    prefix = int(rng.integers(1, L))
    keep = np.zeros(L, dtype=bool)
    keep[:prefix] = True
    return keep


# ---------------------------------------------------------------------------
# minibatch optimal-transport coupling
# ---------------------------------------------------------------------------


def _sinkhorn_plan(cost: np.ndarray, reg: float, iters: int) -> np.ndarray | None:
    """Log-domain Sinkhorn with uniform marginals; returns log plan or None."""
    B = cost.shape[0]
    logK = -cost / reg
    f = np.zeros(B)
    g = np.zeros(B)
    loga = np.full(B, -np.log(B))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(iters):
            f = reg * (loga - np.logaddexp.reduce((logK + g[None, :]) / reg, axis=1))
            g = reg * (loga - np.logaddexp.reduce((logK + f[:, None]) / reg, axis=0))
        logP = (logK + f[:, None] + g[None, :]) / reg
    if not np.all(np.isfinite(logP)):
        return None
    return logP


def ot_couple(
    x0_flat: np.ndarray,
    eps_flat: np.ndarray,
    reg_factor: float = 0.05,
    max_iters: int = 100,
) -> np.ndarray:
    """Permutation p minimizing sum_i ||x0_i - eps_{p(i)}||^2, approximately.

    Inputs are (B, n) flattened valid regions zero-padded to a common width.
    The returned pairing never costs more than the identity pairing; on
    Sinkhorn non-convergence the identity is returned with a warning.
    """
    B = x0_flat.shape[0]
    identity = np.arange(B)
    if B <= 1:
        return identity
    cost = ((x0_flat[:, None, :] - eps_flat[None, :, :]) ** 2).sum(axis=2)
    med = float(np.median(cost))
    reg = max(reg_factor * med, 1e-12)
    logP = _sinkhorn_plan(cost, reg, max_iters)
    if logP is None:
        warnings.warn("ot_couple: Sinkhorn did not converge; falling back to identity pairing")
        return identity
    # greedy row-argmax in confidence order, collisions take the next-best column
    perm = np.full(B, -1, dtype=np.int64)
    used = np.zeros(B, dtype=bool)
    for i in np.argsort(-logP.max(axis=1)):
        row = np.where(used, -np.inf, logP[i])
        j = int(np.argmax(row))
        perm[i] = j
        used[j] = True
    if cost[identity, perm].sum() > np.trace(cost):
        return identity
    return perm


def pairing_cost(x0_flat: np.ndarray, eps_flat: np.ndarray, perm: np.ndarray) -> float:
    return float(((x0_flat - eps_flat[perm]) ** 2).sum())


# ---------------------------------------------------------------------------
# the two-term masked loss
# ---------------------------------------------------------------------------


@dataclass
class FlowBatchPlan:
    x0: PaddedBatch
    eps: np.ndarray  # (B, C, L) coupled noise, zero outside validity
    coupling: np.ndarray  # permutation actually applied to raw noise
    t_raw: np.ndarray  # (B,)
    t_shifted: np.ndarray  # (B,)
    keep_masks: list  # per-item bool arrays over the valid region
    cfg_drop: np.ndarray  # (B,) bool
    durations: np.ndarray  # (B,) seconds (pre-augmentation signal length)
    tokens: list = field(default_factory=list)


def make_cond_from_plan(plan: FlowBatchPlan, config: dit.ModelConfig) -> dit.CondBatch:
    bundles = []
    for i in range(plan.x0.batch_size):
        Lv = int(plan.x0.valid_len[i])
        ref = LatentSequence(plan.x0.data[i, :, :Lv], config.frame_rate)
        spec = dit.InpaintSpec(plan.keep_masks[i], ref)
        bundles.append(
            dit.ConditioningBundle(
                timestep=float(plan.t_shifted[i]),
                duration_seconds=float(plan.durations[i]),
                text_tokens=plan.tokens[i],
                inpaint=spec,
                cfg_drop=bool(plan.cfg_drop[i]),
            )
        )
    return dit.make_cond_batch(bundles, config, plan.x0.max_len)


def two_term_loss(v_hat, target, valid, keep):
    """Independently averaged squared-error terms over the generated (m=0)
    and kept (m=1) valid regions. Returns (loss, d_v_hat, term_gen, term_ctx).
    An empty region contributes zero."""
    diff = v_hat.astype(np.float64) - target
    sq = (diff**2).sum(axis=1)  # (B, L) squared channel norms
    gen_region = valid & ~keep
    ctx_region = valid & keep
    n_gen = int(gen_region.sum())
    n_ctx = int(ctx_region.sum())
    w = np.zeros(valid.shape)
    if n_gen:
        w[gen_region] = 1.0 / n_gen
    if n_ctx:
        w[ctx_region] = 1.0 / n_ctx
    term_gen = float(sq[gen_region].sum() / n_gen) if n_gen else 0.0
    term_ctx = float(sq[ctx_region].sum() / n_ctx) if n_ctx else 0.0
    loss = term_gen + term_ctx
    d_v = 2.0 * w[:, None, :] * diff
    return loss, d_v, term_gen, term_ctx


def flow_matching_loss(params: dict, config: dit.ModelConfig, plan: FlowBatchPlan):
    """Returns (loss, grads, metrics). Both terms sum over valid frames only."""
    if np.any(plan.x0.valid_len == 0):
        raise ValueError("flow_matching_loss: batch contains an all-padded item")
    x0 = plan.x0.data
    tprime = plan.t_shifted[:, None, None]
    x_t = (1.0 - tprime) * x0 + tprime * plan.eps
    cond = make_cond_from_plan(plan, config)
    v_hat, cache = dit.dit_forward(params, config, x_t, plan.x0.validity_mask, cond)
    target = plan.eps - x0
    keep = np.zeros(plan.x0.validity_mask.shape, dtype=bool)
    for i, m in enumerate(plan.keep_masks):
        keep[i, : len(m)] = m
    loss, d_v, term_gen, term_ctx = two_term_loss(v_hat, target, plan.x0.validity_mask, keep)
    grads, _ = dit.dit_backward(params, config, cache, d_v.astype(v_hat.dtype))
    metrics = {"loss": loss, "loss_gen": term_gen, "loss_ctx": term_ctx}
    return loss, grads, metrics


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class FlowTrainer:
    """One mutable model state, seeded data/noise sampling, Adam + EMA."""

    def __init__(
        self,
        params: dict,
        config: dit.ModelConfig,
        spec: schedules.ScheduleSpec,
        dataset: list,
        rng: np.random.Generator,
        batch_size: int = 8,
        lr: float = 3e-4,
        silence_mean_seconds: float = 4.0,
        use_ot: bool = True,
        cfg_drop_p: float = CFG_DROP_P,
    ):
        if not dataset:
            raise ValueError("FlowTrainer: dataset must be non-empty")
        self.params = params
        self.config = config
        self.spec = spec
        self.dataset = dataset
        self.rng = rng
        self.batch_size = batch_size
        self.silence_mean_seconds = silence_mean_seconds
        self.use_ot = use_ot
        self.cfg_drop_p = cfg_drop_p
        self.opt = Adam(lr=lr)
        self.ema = EmaState.init(params)
        self.step_count = 0
        self.skipped = 0

    def make_plan(self) -> FlowBatchPlan:
        cfg = self.config
        idx = self.rng.integers(0, len(self.dataset), size=self.batch_size)
        seqs, tokens, durations = [], [], []
        for i in idx:
            toks, frames = self.dataset[int(i)]
            seq = LatentSequence(np.asarray(frames, dtype=np.float32), cfg.frame_rate)
            durations.append(seq.duration_seconds)
            seq = silence_augment(
                seq, self.rng, self.silence_mean_seconds, self.params["silence_latent"]
            )
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
        t_shift = schedules.shift_timestep(t_raw, mus)
        keep_masks = [sample_inpaint_mask(self.rng, int(n)) for n in batch.valid_len]
        eps = self.rng.standard_normal(batch.data.shape).astype(np.float32)
        eps *= batch.validity_mask[:, None, :]
        perm = np.arange(B)
        if self.use_ot and B > 1:
            flat_x0 = batch.data.reshape(B, -1)
            flat_eps = eps.reshape(B, -1)
            perm = ot_couple(flat_x0, flat_eps, max_iters=100)
        drop = self.rng.random(B) < self.cfg_drop_p
        return FlowBatchPlan(
            x0=batch,
            eps=eps[perm],
            coupling=perm,
            t_raw=np.atleast_1d(t_raw),
            t_shifted=np.atleast_1d(t_shift),
            keep_masks=keep_masks,
            cfg_drop=drop,
            durations=np.array(durations),
            tokens=tokens,
        )

    def step(self) -> dict:
        plan = self.make_plan()
        loss, grads, metrics = flow_matching_loss(self.params, self.config, plan)
        self.step_count += 1
        if not np.isfinite(loss):
            self.skipped += 1
            metrics.update(step=self.step_count, skipped=True)
            return metrics
        self.opt.step(self.params, grads)
        ema_update(self.ema, self.params)
        metrics.update(
            step=self.step_count,
            skipped=False,
            lr=self.opt.current_lr(),
            cfg_drop_frac=float(plan.cfg_drop.mean()),
        )
        return metrics
