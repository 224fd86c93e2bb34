"""Latent-sequence data model: variable-length sequences, padded batches,
generation-length allocation, silence augmentation, and the dataset file
format.

A latent sequence is a C x L array of float frames at a fixed frame rate
(default 44100/4096 = 10.7666 Hz). All objects here are value objects:
construct, then treat as immutable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE = 44100
DEFAULT_DOWNSAMPLE_RATIO = 4096
DEFAULT_FRAME_RATE = DEFAULT_SAMPLE_RATE / DEFAULT_DOWNSAMPLE_RATIO
DEFAULT_SILENCE_SECONDS = 6.0

DATASET_MAGIC = b"VFL1"


@dataclass
class LatentSequence:
    """A variable-length sequence of fixed-width latent frames, shape C x L."""

    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError("LatentSequence: frames must be a C x L matrix")
        if self.frames.shape[1] < 1:
            raise ValueError("LatentSequence: frame count L must be >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("LatentSequence: all values must be finite")

    @property
    def channels(self) -> int:
        return self.frames.shape[0]

    @property
    def length(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.length / self.frame_rate_hz


@dataclass
class PaddedBatch:
    """Right-padded stack of latent sequences with per-item valid lengths."""

    data: np.ndarray  # (B, C, L_max)
    valid_len: np.ndarray  # (B,) ints
    validity_mask: np.ndarray  # (B, L_max) bool

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def max_len(self) -> int:
        return self.data.shape[2]


@dataclass
class GenerationLength:
    """Frame allocation for a requested duration plus trailing silence."""

    requested_seconds: float
    silence_seconds: float = DEFAULT_SILENCE_SECONDS
    sample_rate: int = DEFAULT_SAMPLE_RATE
    downsample_ratio: int = DEFAULT_DOWNSAMPLE_RATIO
    L: int = field(init=False)
    L_eff: int = field(init=False)

    def __post_init__(self):
        d, ds = self.requested_seconds, self.silence_seconds
        fs, r = self.sample_rate, self.downsample_ratio
        self.L = int(np.ceil((d + ds) * fs / r))
        self.L_eff = int(np.ceil(d * fs / r))


def allocate_generation_length(
    d: float,
    d_silence: float = DEFAULT_SILENCE_SECONDS,
    f_s: int = DEFAULT_SAMPLE_RATE,
    r: int = DEFAULT_DOWNSAMPLE_RATIO,
) -> GenerationLength:
    """L = ceil((d + d_silence) * f_s / r); L_eff = ceil(d * f_s / r).

    The trailing L - L_eff frames are the silence-padding region.
    """
    if d <= 0:
        raise ValueError("allocate_generation_length: requested duration d must be > 0")
    if f_s <= 0 or r <= 0:
        raise ValueError("allocate_generation_length: f_s and r must be > 0")
    if d_silence < 0:
        raise ValueError("allocate_generation_length: d_silence must be >= 0")
    return GenerationLength(d, d_silence, f_s, r)


def build_batch(items: list[LatentSequence]) -> PaddedBatch:
    """Right-pad to the longest item; the padded region is zero-filled."""
    if not items:
        raise ValueError("build_batch: item list must be non-empty")
    C = items[0].channels
    for it in items:
        if it.channels != C:
            raise ValueError("build_batch: mixed channel counts are not allowed")
    lengths = np.array([it.length for it in items], dtype=np.int64)
    L_max = int(lengths.max())
    B = len(items)
    data = np.zeros((B, C, L_max), dtype=items[0].frames.dtype)
    for i, it in enumerate(items):
        data[i, :, : it.length] = it.frames
    mask = np.arange(L_max)[None, :] < lengths[:, None]
    return PaddedBatch(data=data, valid_len=lengths, validity_mask=mask)


def silence_augment(
    seq: LatentSequence,
    rng: np.random.Generator,
    mean_seconds: float,
    silence_frame: np.ndarray | None = None,
) -> LatentSequence:
    """Append k frames of the silence latent, k = round(Exp(mean) * frame_rate).

    The silence latent is a constant per-channel vector (default all-zeros;
    models store their own so it can be replaced).
    """
    if mean_seconds < 0:
        raise ValueError("silence_augment: mean_seconds must be >= 0")
    if mean_seconds == 0:
        return seq
    k = int(round(rng.exponential(mean_seconds) * seq.frame_rate_hz))
    if k == 0:
        return seq
    if silence_frame is None:
        silence_frame = np.zeros(seq.channels, dtype=seq.frames.dtype)
    tail = np.broadcast_to(np.asarray(silence_frame)[:, None], (seq.channels, k))
    frames = np.concatenate([seq.frames, tail.astype(seq.frames.dtype)], axis=1)
    return LatentSequence(frames, seq.frame_rate_hz)


def trim(seq: LatentSequence, L_eff: int) -> LatentSequence:
    """Keep the first L_eff frames, order preserved."""
    if L_eff < 1:
        raise ValueError("trim: L_eff must be >= 1")
    if L_eff > seq.length:
        raise ValueError("trim: L_eff exceeds sequence length")
    return LatentSequence(seq.frames[:, :L_eff].copy(), seq.frame_rate_hz)


# ---------------------------------------------------------------------------
# Dataset file format (binary, little-endian):
#   magic "VFL1", u32 record count; per record: u32 prompt-token count,
#   that many u32 token ids, u32 L, u32 C, then C*L float32 frames in
#   channel-major order.
# ---------------------------------------------------------------------------


def write_dataset(path, records: list[tuple[list[int], np.ndarray]]) -> None:
    """records: list of (prompt token ids, frames C x L)."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(records)))
        for tokens, frames in records:
            frames = np.asarray(frames, dtype="<f4")
            C, L = frames.shape
            f.write(struct.pack("<I", len(tokens)))
            if tokens:
                f.write(np.asarray(tokens, dtype="<u4").tobytes())
            f.write(struct.pack("<II", L, C))
            f.write(frames.tobytes())


def read_dataset(path) -> list[tuple[list[int], np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"read_dataset: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (count,) = struct.unpack("<I", f.read(4))
        records = []
        for _ in range(count):
            (ntok,) = struct.unpack("<I", f.read(4))
            tokens = list(np.frombuffer(f.read(4 * ntok), dtype="<u4").astype(int)) if ntok else []
            L, C = struct.unpack("<II", f.read(8))
            frames = np.frombuffer(f.read(4 * C * L), dtype="<f4").reshape(C, L).copy()
            records.append((tokens, frames))
        return records
