"""Inference samplers.

Ping-pong sampling for the post-trained one-step model: starting from pure
noise at the first grid timestep, alternate a one-step denoise to a clean
estimate with a stochastic renoise at the next (lower) grid timestep; the
final denoise is returned without renoising. The grid is logSNR-uniform and
independent of the requested duration; no guidance is applied at inference.
Inpainting overwrites kept frames with the reference after every denoise, in
addition to the conditioning pathway, so kept regions survive bit-exactly.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import dit, schedules
from .core import LatentSequence, allocate_generation_length, trim
from .distill import euler_integrate


def ping_pong_sample_batch(
    params: dict,
    config: dit.ModelConfig,
    spec: schedules.ScheduleSpec,
    prompts: list,
    durations: list,
    rng: np.random.Generator,
    n_steps: int | None = None,
    inpaints: list | None = None,
    lengths: list | None = None,
) -> list[LatentSequence]:
    """Sample a batch of variable-length sequences; returns trimmed outputs.

    ``lengths``/``inpaints`` override the allocation when a reference drives
    the sequence length (inpainting keeps the full reference length).
    """
    B = len(prompts)
    if len(durations) != B:
        raise ValueError("ping_pong_sample_batch: prompts/durations length mismatch")
    n_steps = spec.steps if n_steps is None else n_steps
    grid = schedules.inference_schedule(replace(spec, steps=n_steps))

    Ls, L_effs = [], []
    for i in range(B):
        if lengths is not None and lengths[i] is not None:
            Ls.append(int(lengths[i]))
            L_effs.append(int(lengths[i]))
        else:
            if durations[i] > config.max_seconds:
                raise ValueError(
                    f"requested duration {durations[i]}s exceeds model maximum "
                    f"{config.max_seconds}s"
                )
            alloc = allocate_generation_length(
                durations[i], f_s=config.sample_rate, r=config.downsample_ratio
            )
            Ls.append(alloc.L)
            L_effs.append(alloc.L_eff)
    L = max(Ls)
    validity = np.arange(L)[None, :] < np.array(Ls)[:, None]

    bundles = []
    keeps = np.zeros((B, L), dtype=bool)
    refs = np.zeros((B, config.latent_channels, L))
    for i in range(B):
        inp = inpaints[i] if inpaints is not None else None
        if inp is not None:
            keeps[i, : len(inp.keep_mask)] = inp.keep_mask
            refs[i, :, : inp.reference.length] = inp.reference.frames
        bundles.append(
            dit.ConditioningBundle(
                timestep=float(grid[0]),
                duration_seconds=float(durations[i]),
                text_tokens=list(prompts[i]),
                inpaint=inp,
                cfg_drop=False,
            )
        )
    cond = dit.make_cond_batch(bundles, config, L)

    x = rng.standard_normal((B, config.latent_channels, L))
    x *= validity[:, None, :]
    x0_hat = x
    for i in range(n_steps):
        t_i = float(grid[i])
        ct = replace(cond, t=np.full(B, t_i))
        v, _ = dit.dit_forward(params, config, x, validity, ct)
        x0_hat = x - t_i * v.astype(np.float64)
        if inpaints is not None:
            x0_hat = np.where(keeps[:, None, :], refs, x0_hat)
        if i < n_steps - 1:
            t_next = float(grid[i + 1])
            noise = rng.standard_normal(x.shape)
            x = (1.0 - t_next) * x0_hat + t_next * noise
            x *= validity[:, None, :]

    out = []
    for i in range(B):
        seq = LatentSequence(
            x0_hat[i, :, : Ls[i]].astype(np.float32), config.frame_rate
        )
        out.append(trim(seq, L_effs[i]))
    return out


def ping_pong_sample(
    params: dict,
    config: dit.ModelConfig,
    spec: schedules.ScheduleSpec,
    prompt_tokens,
    d_seconds: float,
    rng: np.random.Generator,
    n_steps: int | None = None,
    inpaint: dit.InpaintSpec | None = None,
) -> LatentSequence:
    """Single-sequence ping-pong sampling for a requested duration."""
    if d_seconds <= 0:
        raise ValueError("ping_pong_sample: requested duration must be > 0")
    inpaints = [inpaint] if inpaint is not None else None
    lengths = [inpaint.reference.length] if inpaint is not None else None
    return ping_pong_sample_batch(
        params,
        config,
        spec,
        [prompt_tokens],
        [d_seconds],
        rng,
        n_steps=n_steps,
        inpaints=inpaints,
        lengths=lengths,
    )[0]


def inpaint_sample(
    params: dict,
    config: dit.ModelConfig,
    spec: schedules.ScheduleSpec,
    reference: LatentSequence,
    keep_mask,
    prompt_tokens,
    rng: np.random.Generator,
    n_steps: int | None = None,
) -> LatentSequence:
    """Regenerate masked regions of a reference; kept frames are exact."""
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape[0] != reference.length:
        raise ValueError("inpaint_sample: keep_mask length must equal reference length")
    spec_inp = dit.InpaintSpec(keep_mask, reference)
    d = reference.length / config.frame_rate
    return ping_pong_sample_batch(
        params,
        config,
        spec,
        [prompt_tokens],
        [d],
        rng,
        n_steps=n_steps,
        inpaints=[spec_inp],
        lengths=[reference.length],
    )[0]


def ode_sample_batch(
    params: dict,
    config: dit.ModelConfig,
    spec: schedules.ScheduleSpec,
    prompts: list,
    durations: list,
    rng: np.random.Generator,
    n_steps: int = 50,
    cfg_scale: float = 1.0,
) -> list[LatentSequence]:
    """Euler ODE sampling for the base (flow-matching) model."""
    B = len(prompts)
    Ls, L_effs = [], []
    for d in durations:
        if d > config.max_seconds:
            raise ValueError(f"requested duration {d}s exceeds model maximum")
        alloc = allocate_generation_length(d, f_s=config.sample_rate, r=config.downsample_ratio)
        Ls.append(alloc.L)
        L_effs.append(alloc.L_eff)
    L = max(Ls)
    validity = np.arange(L)[None, :] < np.array(Ls)[:, None]
    bundles = [
        dit.ConditioningBundle(0.0, float(durations[i]), list(prompts[i]))
        for i in range(B)
    ]
    cond = dit.make_cond_batch(bundles, config, L)
    eps = rng.standard_normal((B, config.latent_channels, L))
    eps *= validity[:, None, :]
    endpoint, _ = euler_integrate(
        params, config, spec, eps, validity, cond, n_steps, cfg_scale
    )
    return [
        trim(LatentSequence(endpoint[i, :, : Ls[i]].astype(np.float32), config.frame_rate), L_effs[i])
        for i in range(B)
    ]
