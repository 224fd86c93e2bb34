"""Distillation warmup: a frozen teacher integrates its velocity ODE with
guidance; the student regresses one-step endpoint estimates onto the teacher's
endpoints from any cached intermediate state.

The teacher solver is Euler over a logSNR-uniform grid that is not shifted by
sequence length; the final step lands exactly at t=0, so a one-step run
degenerates to x_hat0 = eps - t0 * v(eps, t0).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dit, schedules
from .nn import Adam


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """v_uncond + scale * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError("cfg_velocity: velocity shapes must match")
    return v_uncond + scale * (v_cond - v_uncond)


def solver_grid(spec: schedules.ScheduleSpec, steps: int) -> np.ndarray:
    """`steps` descending evaluation timesteps, uniform in logSNR."""
    if steps < 1:
        raise ValueError("solver_grid: steps must be >= 1")
    if steps == 1:
        lams = np.array([spec.lambda_min])
    else:
        lams = np.linspace(spec.lambda_min, spec.lambda_max, steps)
    return schedules.t_from_logsnr(lams)


@dataclass
class TrajectoryCache:
    states: list  # [(x (B,C,L), t), ...] ordered by decreasing t; last is (endpoint, 0)
    endpoint: np.ndarray
    cond: dit.CondBatch
    validity_mask: np.ndarray
    age: int = 0


def guided_velocity(params, config, x, validity, cond: dit.CondBatch, t: float, cfg_scale: float):
    ct = replace(cond, t=np.full(cond.t.shape, t))
    v_c, _ = dit.dit_forward(params, config, x, validity, ct)
    if cfg_scale == 1.0:
        return v_c
    cu = replace(ct, cfg_drop=np.ones_like(cond.cfg_drop))
    v_u, _ = dit.dit_forward(params, config, x, validity, cu)
    return cfg_velocity(v_c, v_u, cfg_scale)


def euler_integrate(
    params, config, spec, eps, validity, cond, steps, cfg_scale, collect=False, velocity_fn=None
):
    """Integrate from noise at the first grid point down to t=0.

    Returns (endpoint, states) where states holds (x, t) at every grid point
    plus the endpoint at t=0 when ``collect`` is set. ``velocity_fn(x, t)``
    overrides the model evaluation (analytic test fields).
    """
    grid = solver_grid(spec, steps)
    x = eps.copy()
    states = [(x.copy(), float(grid[0]))] if collect else None
    for i in range(steps):
        t_i = float(grid[i])
        if velocity_fn is not None:
            v = velocity_fn(x, t_i)
        else:
            v = guided_velocity(params, config, x, validity, cond, t_i, cfg_scale)
        t_next = float(grid[i + 1]) if i < steps - 1 else 0.0
        x = x + (t_next - t_i) * v
        if collect:
            states.append((x.copy(), t_next))
    return x, states


def teacher_trajectory(
    teacher_params,
    config,
    eps,
    validity,
    cond: dit.CondBatch,
    steps: int = 15,
    cfg_scale: float = 5.0,
    spec: schedules.ScheduleSpec | None = None,
) -> TrajectoryCache:
    """Cache of steps+1 intermediate states plus the denoised endpoint."""
    spec = spec or schedules.ScheduleSpec()
    endpoint, states = euler_integrate(
        teacher_params, config, spec, eps, validity, cond, steps, cfg_scale, collect=True
    )
    return TrajectoryCache(states=states, endpoint=endpoint, cond=cond, validity_mask=validity)


def distill_step(student_params, config, cache: TrajectoryCache, rng, opt: Adam | None = None):
    """One MSE step of the one-step student onto the teacher endpoint.

    (x_t, t) is drawn uniformly from the cached states, independently per
    batch item. Returns (loss, grads).
    """
    if not cache.states:
        raise ValueError("distill_step: trajectory cache is empty")
    B = cache.endpoint.shape[0]
    picks = rng.integers(0, len(cache.states), size=B)
    x_t = np.stack([cache.states[p][0][i] for i, p in enumerate(picks)])
    t = np.array([cache.states[p][1] for p in picks])
    cond = replace(cache.cond, t=t)
    v_hat, fwd_cache = dit.dit_forward(
        student_params, config, x_t.astype(np.float32), cache.validity_mask, cond
    )
    pred = x_t - t[:, None, None] * v_hat.astype(np.float64)
    valid = cache.validity_mask
    n = int(valid.sum()) * cache.endpoint.shape[1]
    diff = (pred - cache.endpoint) * valid[:, None, :]
    loss = float((diff**2).sum() / n)
    d_pred = 2.0 * diff / n
    d_v = (-t[:, None, None] * d_pred).astype(v_hat.dtype)
    grads, _ = dit.dit_backward(student_params, config, fwd_cache, d_v)
    if opt is not None:
        opt.step(student_params, grads)
    return loss, grads


class DistillTrainer:
    """Runs the warmup: teacher rollouts refreshed every `refresh_every`
    student iterations; the teacher is never mutated."""

    def __init__(
        self,
        teacher_params: dict,
        student_params: dict,
        config: dit.ModelConfig,
        spec: schedules.ScheduleSpec,
        rng: np.random.Generator,
        dataset: list | None = None,
        batch_size: int = 8,
        solver_steps: int = 15,
        cfg_scale: float = 5.0,
        refresh_every: int = 4,
        lr: float = 1e-4,
    ):
        self.teacher = teacher_params
        self.student = student_params
        self.config = config
        self.spec = spec
        self.rng = rng
        self.dataset = dataset
        self.batch_size = batch_size
        self.solver_steps = solver_steps
        self.cfg_scale = cfg_scale
        self.refresh_every = refresh_every
        self.opt = Adam(lr=lr)
        self.cache: TrajectoryCache | None = None
        self.step_count = 0

    def _sample_conditioning(self):
        """Prompts/durations from the dataset when given, else from the grammar."""
        from . import synth

        cfg = self.config
        tokens, lengths, durations = [], [], []
        for _ in range(self.batch_size):
            if self.dataset is not None:
                toks, frames = self.dataset[int(self.rng.integers(0, len(self.dataset)))]
                tokens.append(list(toks))
                L = frames.shape[1]
            else:
                tone = int(self.rng.integers(0, synth.N_TONES))
                rate = int(self.rng.integers(0, synth.N_RATES))
                env = int(self.rng.integers(0, synth.N_ENVS))
                tokens.append(synth.class_tokens(tone, rate, env))
                L = int(self.rng.integers(cfg.min_frames, max(cfg.min_frames + 1, 64)))
            lengths.append(L)
            durations.append(L / cfg.frame_rate)
        return tokens, lengths, durations

    def refresh_cache(self):
        cfg = self.config
        tokens, lengths, durations = self._sample_conditioning()
        L = max(lengths)
        B = self.batch_size
        validity = np.arange(L)[None, :] < np.array(lengths)[:, None]
        eps = self.rng.standard_normal((B, cfg.latent_channels, L)).astype(np.float32)
        eps *= validity[:, None, :]
        bundles = [
            dit.ConditioningBundle(
                timestep=0.0,
                duration_seconds=durations[i],
                text_tokens=tokens[i],
                inpaint=None,
                cfg_drop=False,
            )
            for i in range(B)
        ]
        cond = dit.make_cond_batch(bundles, cfg, L)
        self.cache = teacher_trajectory(
            self.teacher, cfg, eps, validity, cond, self.solver_steps, self.cfg_scale, self.spec
        )

    def step(self) -> dict:
        if self.step_count % self.refresh_every == 0 or self.cache is None:
            self.refresh_cache()
            self.cache.age = 0
        loss, _ = distill_step(self.student, self.config, self.cache, self.rng, self.opt)
        self.cache.age += 1
        self.step_count += 1
        return {"step": self.step_count, "loss": loss}

    def endpoint_mse(self, n_batches: int = 4, rng: np.random.Generator | None = None) -> float:
        """Student's one-step endpoint error against fresh teacher rollouts."""
        rng = rng or self.rng
        saved_rng = self.rng
        self.rng = rng
        total = 0.0
        for _ in range(n_batches):
            self.refresh_cache()
            cache = self.cache
            B = cache.endpoint.shape[0]
            picks = rng.integers(0, len(cache.states), size=B)
            x_t = np.stack([cache.states[p][0][i] for i, p in enumerate(picks)])
            t = np.array([cache.states[p][1] for p in picks])
            cond = replace(cache.cond, t=t)
            v_hat, _ = dit.dit_forward(
                self.student, self.config, x_t.astype(np.float32), cache.validity_mask, cond
            )
            pred = x_t - t[:, None, None] * v_hat.astype(np.float64)
            valid = cache.validity_mask
            n = int(valid.sum()) * cache.endpoint.shape[1]
            total += float((((pred - cache.endpoint) * valid[:, None, :]) ** 2).sum() / n)
        self.rng = saved_rng
        self.cache = None
        return total / n_batches
