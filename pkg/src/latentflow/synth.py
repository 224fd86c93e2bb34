"""Synthetic descriptor grammar, latent rendering, and the analytic oracle
embedder.

The grammar is 8 tone classes x 3 rate classes x 2 envelope classes. A record
is rendered as sinusoidal frames whose frequency encodes (tone, rate) and
whose amplitude profile encodes the envelope, plus a little noise. The oracle
embedder maps prompts and latents into one shared 16-dim unit sphere: the
text side one-hot encodes the classes, the audio side estimates them from
fixed spectral statistics. It is deterministic, training-free, and has an
analytic gradient (``oracle_audio_bwd``), which the post-training alignment
loss relies on.
"""

from __future__ import annotations

import numpy as np

TONE_WORDS = [f"tone{i}" for i in range(8)]
RATE_WORDS = ["slow", "medium", "fast"]
ENV_WORDS = ["sustain", "decay"]
VOCAB = TONE_WORDS + RATE_WORDS + ENV_WORDS

N_TONES = len(TONE_WORDS)
N_RATES = len(RATE_WORDS)
N_ENVS = len(ENV_WORDS)
EMBED_DIM = 16  # 8 tone + 3 rate + 2 envelope features, zero-padded

_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

# 24 distinct per-frame angular frequencies in (0, pi)
_FREQS = np.pi * (3 * np.arange(N_TONES)[:, None] + np.arange(N_RATES)[None, :] + 1) / 25.0


def encode_prompt(text: str) -> list[int]:
    ids = []
    for w in text.split():
        if w not in _WORD_TO_ID:
            raise ValueError(f"encode_prompt: unknown token {w!r} (vocabulary: {' '.join(VOCAB)})")
        ids.append(_WORD_TO_ID[w])
    return ids


def decode_prompt(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


def class_tokens(tone: int, rate: int, env: int) -> list[int]:
    return [tone, N_TONES + rate, N_TONES + N_RATES + env]


def _envelope(env: int, L: int) -> np.ndarray:
    n = np.arange(L)
    if env == 0:  # sustain
        return np.ones(L)
    return np.exp(-2.5 * n / L)  # decay


def render_latent(tone, rate, env, L, channels, rng, noise=0.05):
    """Frames (channels, L): phase-offset sinusoids under the class envelope."""
    n = np.arange(L)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    ch_phase = 2.0 * np.pi * np.arange(channels) / channels
    x = _envelope(env, L)[None, :] * np.sin(
        _FREQS[tone, rate] * n[None, :] + phase0 + ch_phase[:, None]
    )
    return (x + noise * rng.standard_normal((channels, L))).astype(np.float32)


# ---------------------------------------------------------------------------
# oracle embedder
# ---------------------------------------------------------------------------


def oracle_text_embed(tokens) -> np.ndarray:
    """Unit vector: one-hot tone and rate blocks plus an envelope preference."""
    f = np.zeros(EMBED_DIM)
    tone = [t for t in tokens if 0 <= t < N_TONES]
    rate = [t - N_TONES for t in tokens if N_TONES <= t < N_TONES + N_RATES]
    env = [t - N_TONES - N_RATES for t in tokens if N_TONES + N_RATES <= t < len(VOCAB)]
    if tone:
        f[tone[0]] = 1.0
    else:
        f[:N_TONES] = 1.0 / N_TONES
    if rate:
        f[N_TONES + rate[0]] = 1.0
    else:
        f[N_TONES : N_TONES + N_RATES] = 1.0 / N_RATES
    # decay concentrates energy early; sustain spreads it evenly
    if env:
        f[N_TONES + N_RATES : N_TONES + N_RATES + 2] = (1.0, 0.0) if env[0] == 1 else (0.0, 1.0)
    else:
        f[N_TONES + N_RATES : N_TONES + N_RATES + 2] = 0.5
    return f / np.linalg.norm(f)


def _proj_tables(L: int):
    n = np.arange(L)
    ang = _FREQS.reshape(-1)[:, None] * n[None, :]  # (24, L)
    return np.cos(ang), np.sin(ang)


def oracle_audio_fwd(x: np.ndarray):
    """Embed a latent (C, L) onto the shared sphere; returns (e, cache)."""
    x = np.asarray(x, dtype=np.float64)
    C, L = x.shape
    cos, sin = _proj_tables(L)
    P = x @ cos.T  # (C, 24)
    S = x @ sin.T
    E = ((P * P + S * S).sum(axis=0) / (C * L * L)).reshape(N_TONES, N_RATES)
    total = E.sum()
    total = total if total > 0 else 1.0
    tone_f = E.sum(axis=1) / total
    rate_f = E.sum(axis=0) / total
    half = L // 2 if L >= 2 else 1
    A = (x[:, :half] ** 2).sum()
    Bv = (x[:, half:] ** 2).sum()
    denom = A + Bv if (A + Bv) > 0 else 1.0
    g = A / denom
    f = np.zeros(EMBED_DIM)
    f[:N_TONES] = tone_f
    f[N_TONES : N_TONES + N_RATES] = rate_f
    f[N_TONES + N_RATES] = g
    f[N_TONES + N_RATES + 1] = 1.0 - g
    norm = np.linalg.norm(f)
    norm = norm if norm > 0 else 1.0
    e = f / norm
    cache = (x, cos, sin, P, S, E, total, f, norm, half, A, Bv)
    return e, cache


def oracle_audio_bwd(de: np.ndarray, cache) -> np.ndarray:
    """Gradient of the embedding w.r.t. the input latent."""
    x, cos, sin, P, S, E, total, f, norm, half, A, Bv = cache
    C, L = x.shape
    # through the final normalization
    df = (de - f * (f @ de) / (norm * norm)) / norm
    d_tone = df[:N_TONES]
    d_rate = df[N_TONES : N_TONES + N_RATES]
    dg = df[N_TONES + N_RATES] - df[N_TONES + N_RATES + 1]
    # block ratios back to raw energies
    tone_sum = E.sum(axis=1)
    rate_sum = E.sum(axis=0)
    dE = np.zeros_like(E)
    dE += d_tone[:, None] / total
    dE += d_rate[None, :] / total
    correction = (d_tone @ tone_sum + d_rate @ rate_sum) / (total * total)
    dE -= correction
    # energies back to the projections
    dE_flat = dE.reshape(-1) / (C * L * L)
    dx = 2.0 * ((P * dE_flat[None, :]) @ cos + (S * dE_flat[None, :]) @ sin)
    # early/late energy split
    denom = A + Bv if (A + Bv) > 0 else 1.0
    dA = dg * Bv / (denom * denom)
    dB = -dg * A / (denom * denom)
    dx[:, :half] += 2.0 * dA * x[:, :half]
    dx[:, half:] += 2.0 * dB * x[:, half:]
    return dx


class OracleEmbedder:
    """Deterministic text/latent encoders into one unit-sphere space."""

    dim = EMBED_DIM

    def embed_text(self, tokens) -> np.ndarray:
        return oracle_text_embed(tokens)

    def embed_audio(self, frames: np.ndarray) -> np.ndarray:
        e, _ = oracle_audio_fwd(frames)
        return e

    def embed_audio_with_grad(self, frames: np.ndarray):
        return oracle_audio_fwd(frames)
