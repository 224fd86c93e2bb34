"""Desk-scale metrics and the procedural dataset generator.

The distribution metric is the Gaussian 2-Wasserstein (Frechet) distance
between embedding sets, ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}),
with a symmetric PSD square root. Alignment is the cosine between oracle text
and audio embeddings.
"""

from __future__ import annotations

import numpy as np

from . import synth
from .core import write_dataset


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def sqrtm_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """S with S @ S = a @ b for SPD a, b (similarity-transformed PSD root)."""
    sa = _psd_sqrt(a)
    inner = _psd_sqrt(sa @ b @ sa)
    sa_inv = np.linalg.pinv(sa)
    return sa @ inner @ sa_inv


def frechet_distance(embs_a: np.ndarray, embs_b: np.ndarray, eps: float = 1e-6) -> float:
    """Gaussian Frechet distance between two embedding sets (rows = samples)."""
    a = np.asarray(embs_a, dtype=np.float64)
    b = np.asarray(embs_b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("frechet_distance: need at least 2 vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    # regularize near-singular covariances
    if np.linalg.eigvalsh(cov_a).min() < eps:
        cov_a = cov_a + eps * np.eye(cov_a.shape[0])
    if np.linalg.eigvalsh(cov_b).min() < eps:
        cov_b = cov_b + eps * np.eye(cov_b.shape[0])
    sa = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sa @ cov_b @ sa)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(fd, 0.0)


def alignment_score(e_text: np.ndarray, e_audio: np.ndarray) -> float:
    """Cosine similarity of normalized embeddings, in [-1, 1]."""
    t = np.asarray(e_text, dtype=np.float64)
    a = np.asarray(e_audio, dtype=np.float64)
    t = t / max(np.linalg.norm(t), 1e-12)
    a = a / max(np.linalg.norm(a), 1e-12)
    return float(t @ a)


def generate_records(
    rng: np.random.Generator,
    size: int,
    channels: int = 8,
    min_frames: int = 16,
    max_frames: int = 256,
    noise: float = 0.05,
) -> list:
    """Synthetic (prompt tokens, latent) records from the descriptor grammar."""
    records = []
    for _ in range(size):
        tone = int(rng.integers(0, synth.N_TONES))
        rate = int(rng.integers(0, synth.N_RATES))
        env = int(rng.integers(0, synth.N_ENVS))
        L = int(rng.integers(min_frames, max_frames + 1))
        frames = synth.render_latent(tone, rate, env, L, channels, rng, noise)
        records.append((synth.class_tokens(tone, rate, env), frames))
    return records


def generate_dataset(path, rng: np.random.Generator, size: int, **kwargs) -> list:
    """Write a dataset file; returns the records for convenience."""
    records = generate_records(rng, size, **kwargs)
    write_dataset(path, records)
    return records


def embed_records(records, embedder: synth.OracleEmbedder | None = None) -> np.ndarray:
    embedder = embedder or synth.OracleEmbedder()
    return np.stack([embedder.embed_audio(frames) for _, frames in records])


def embed_sequences(seqs, embedder: synth.OracleEmbedder | None = None) -> np.ndarray:
    embedder = embedder or synth.OracleEmbedder()
    return np.stack([embedder.embed_audio(s.frames) for s in seqs])


def mean_alignment(token_lists, seqs, embedder: synth.OracleEmbedder | None = None) -> float:
    embedder = embedder or synth.OracleEmbedder()
    scores = [
        alignment_score(embedder.embed_text(toks), embedder.embed_audio(s.frames))
        for toks, s in zip(token_lists, seqs)
    ]
    return float(np.mean(scores))
