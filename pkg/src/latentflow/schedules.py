"""Timestep distributions and mappings.

Covers the length-dependent logistic timestep shift, truncated logit-normal
training draws, the plain logit-normal discriminator draws, and the
logSNR-uniform inference grid. For linear noising x_t = (1-t) x0 + t eps the
logSNR is lambda(t) = log((1-t)/t) with inverse t = sigmoid(-lambda).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScheduleSpec:
    mu_min: float = 0.5
    mu_max: float = 1.15
    truncation: float = 0.075
    lambda_min: float = -6.2
    lambda_max: float = 2.0
    steps: int = 8

    def __post_init__(self):
        if not 0.0 < self.truncation < 1.0:
            raise ValueError("ScheduleSpec: truncation must lie in (0, 1)")
        if self.lambda_min >= self.lambda_max:
            raise ValueError("ScheduleSpec: lambda_min must be < lambda_max")
        if self.steps < 1:
            raise ValueError("ScheduleSpec: steps must be >= 1")
        if self.mu_min > self.mu_max:
            raise ValueError("ScheduleSpec: mu_min must be <= mu_max")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logsnr(t):
    """lambda(t) = log((1-t)/t)."""
    t = np.asarray(t, dtype=np.float64)
    return np.log((1.0 - t) / t)


def t_from_logsnr(lam):
    """Inverse of logsnr: t = sigmoid(-lambda)."""
    return sigmoid(-np.asarray(lam, dtype=np.float64))


def shift_timestep(t, mu):
    """t' = 1 - e^{-mu} / (e^{-mu} + t/(1-t)); endpoints 0 and 1 are fixed."""
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = t.copy()
    interior = (t > 0.0) & (t < 1.0)
    ti = t[interior]
    emu = np.exp(-mu) if np.isscalar(mu) else np.exp(-np.asarray(mu, dtype=np.float64))
    if not np.isscalar(mu) and np.asarray(mu).shape == t.shape:
        emu = np.asarray(emu)[interior]
    out[interior] = 1.0 - emu / (emu + ti / (1.0 - ti))
    return float(out[0]) if scalar else out


def mu_for_length(L, L_min, L_max, spec: ScheduleSpec) -> float:
    """Linear interpolation of mu in frame count; clamped outside [L_min, L_max]."""
    if L_max <= L_min:
        return spec.mu_max
    frac = (np.clip(L, L_min, L_max) - L_min) / (L_max - L_min)
    return float(spec.mu_min + (spec.mu_max - spec.mu_min) * frac)


def sample_timestep_train(rng: np.random.Generator, spec: ScheduleSpec, size=None):
    """Truncated logit-normal: t = sigmoid(z), reject t < t_c, rescale to [0,1].

    Rejection (not clamping) keeps the distribution atom-free at 0.
    """
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        draw = sigmoid(rng.standard_normal(max(n - filled, 16)))
        keep = draw[draw >= spec.truncation]
        take = min(len(keep), n - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    out = (out - spec.truncation) / (1.0 - spec.truncation)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def sample_timestep_disc(rng: np.random.Generator, size=None):
    """Plain logit-normal draw, t_D = sigmoid(z) with z ~ N(0,1)."""
    z = rng.standard_normal(size if size is not None else ())
    t = sigmoid(z)
    return float(t) if size is None else t


def inference_schedule(spec: ScheduleSpec) -> np.ndarray:
    """N+1 timesteps, strictly decreasing, uniform in logSNR.

    lambda_i = lambda_min + i * (lambda_max - lambda_min) / N; t_i = sigmoid(-lambda_i).
    The grid is deliberately independent of the requested duration.
    """
    lams = np.linspace(spec.lambda_min, spec.lambda_max, spec.steps + 1)
    return t_from_logsnr(lams)
