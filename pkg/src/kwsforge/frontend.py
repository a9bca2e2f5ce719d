"""Log-mel filterbank frontend producing stacked 120-dim feature vectors.

Pipeline: 25 ms Hann windows every 10 ms, 512-point power spectrum,
40 triangular mel filters over 125-7500 Hz, natural log with a 1e-12
floor, then three consecutive frames stacked with a stride of two so the
model sees one 120-dim vector every 20 ms.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
import scipy.fft
import scipy.signal

from . import _kernels
from .audio import POSITIVE, SAMPLE_RATE, AudioClip
from .errors import EmptyInput, InvalidAlignment, UnsupportedRate

WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 40
F_MIN_HZ = 125.0
F_MAX_HZ = 7500.0
LOG_FLOOR = 1e-12
STACK = 3
STRIDE = 2
FEATURE_DIM = N_MELS * STACK
FRAME_PERIOD_MS = 20
SAMPLES_PER_OUTPUT = HOP_LENGTH * STRIDE

BACKGROUND = 0
KEYWORD = 1
# decoder frames labelled "keyword": omega_end .. omega_end + DECODER_POST_FRAMES
DECODER_POST_FRAMES = 4


@dataclasses.dataclass
class FeatureSequence:
    vectors: np.ndarray
    source_frames: int
    frame_period_ms: int = FRAME_PERIOD_MS

    def __len__(self):
        return self.vectors.shape[0]


@dataclasses.dataclass
class FrameLabels:
    """Per-frame targets in the 20 ms feature domain.

    ``units`` are encoder targets (phoneme-like unit ids, 0 = background),
    ``keyword`` are decoder targets (0 background / 1 keyword).
    """

    units: np.ndarray
    keyword: np.ndarray
    omega_end: Optional[int]
    label: str
    keyword_unit: Optional[int] = None  # last keyword unit, pooled by the encoder max-pool term


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies() -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN_HZ), hz_to_mel(F_MAX_HZ), N_MELS + 2))
    return edges[1:-1]


@lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """(N_MELS, N_FFT//2+1) matrix of unit-peak triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN_HZ), hz_to_mel(F_MAX_HZ), N_MELS + 2))
    freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    w = scipy.signal.get_window("hann", WIN_LENGTH)
    w.setflags(write=False)
    return w


def num_source_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def num_output_frames(source_frames: int) -> int:
    if source_frames < STACK:
        return 0
    return (source_frames - STACK) // STRIDE + 1


def log_mel_frames(samples: np.ndarray) -> np.ndarray:
    """Unstacked (source_frames, 40) log filterbank energies of one signal."""
    samples = np.asarray(samples, dtype=np.float64)
    n = num_source_frames(samples.shape[-1])
    if n == 0:
        raise EmptyInput(f"{samples.shape[-1]} samples is shorter than one {WIN_LENGTH}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(samples, WIN_LENGTH)[::HOP_LENGTH][:n]
    power = _kernels.power_spectrum(scipy.fft.rfft(frames * _window(), n=N_FFT, axis=-1))
    energies = power @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR))


def stack_frames(frames: np.ndarray) -> np.ndarray:
    t = num_output_frames(frames.shape[0])
    if t == 0:
        return np.zeros((0, FEATURE_DIM), dtype=frames.dtype)
    idx = STRIDE * np.arange(t)[:, None] + np.arange(STACK)[None, :]
    return frames[idx].reshape(t, FEATURE_DIM)


def _check_clip(clip: AudioClip) -> None:
    if clip.sample_rate_hz != SAMPLE_RATE:
        raise UnsupportedRate(f"{clip.sample_rate_hz} Hz input; resample to {SAMPLE_RATE} Hz first")
    if len(clip) < WIN_LENGTH:
        raise EmptyInput(f"clip of {len(clip)} samples is shorter than one window")


def compute_features(clip: AudioClip) -> FeatureSequence:
    _check_clip(clip)
    frames = log_mel_frames(clip.samples)
    return FeatureSequence(stack_frames(frames), source_frames=frames.shape[0])


def compute_features_batch(signals: Sequence[np.ndarray], dtype=np.float64) -> List[np.ndarray]:
    """Stacked features for many 16 kHz signals with a single FFT call.

    Equivalent to ``compute_features`` per signal; used by the trainer where
    per-clip Python overhead dominates. ``dtype=np.float32`` roughly halves
    the cost at single-precision accuracy.
    """
    counts = [num_source_frames(len(s)) for s in signals]
    if any(c == 0 for c in counts):
        raise EmptyInput("a signal in the batch is shorter than one window")
    frames = np.concatenate(
        [np.lib.stride_tricks.sliding_window_view(np.asarray(s, dtype=dtype), WIN_LENGTH)[::HOP_LENGTH][:c]
         for s, c in zip(signals, counts)]
    )
    frames *= _window().astype(dtype)
    power = _kernels.power_spectrum(scipy.fft.rfft(frames, n=N_FFT, axis=-1))
    logmel = np.log(np.maximum(power @ mel_filterbank().T.astype(dtype), LOG_FLOOR))
    out, start = [], 0
    for c in counts:
        out.append(stack_frames(logmel[start:start + c]))
        start += c
    return out


def sample_to_frame(sample: int) -> int:
    return int(sample) // SAMPLES_PER_OUTPUT


def feature_frame_labels(clip: AudioClip, n_frames: int) -> FrameLabels:
    """Map sample-domain alignment metadata onto the 20 ms feature grid.

    Encoder targets carry unit ids only inside the keyword span of a
    positive clip; everything else (including all of a negative clip) is
    background.
    """
    n = len(clip)
    units = np.full(n_frames, BACKGROUND, dtype=np.int64)
    keyword = np.full(n_frames, BACKGROUND, dtype=np.int64)
    for unit, start, end in clip.unit_alignment or ():
        if end > n or start < 0 or end < start:
            raise InvalidAlignment(f"segment ({unit}, {start}, {end}) outside clip of {n} samples")
    if clip.label != POSITIVE or clip.keyword_end_sample is None or n_frames == 0:
        return FrameLabels(units, keyword, None, clip.label)
    if clip.keyword_end_sample > n:
        raise InvalidAlignment(f"keyword end {clip.keyword_end_sample} past clip of {n} samples")
    kw_start = clip.keyword_start_sample or 0
    kw_end = clip.keyword_end_sample
    keyword_unit = None
    for unit, start, end in clip.unit_alignment or ():
        if start >= kw_start and end <= kw_end and end > start:
            keyword_unit = int(unit)
            first = min(sample_to_frame(start), n_frames - 1)
            last = min(sample_to_frame(end - 1), n_frames - 1)
            units[first:last + 1] = unit
    # a keyword ending inside the trailing partial frame is clamped to the last frame
    omega_end = min(sample_to_frame(kw_end), n_frames - 1)
    keyword[omega_end:omega_end + DECODER_POST_FRAMES + 1] = KEYWORD
    return FrameLabels(units, keyword, omega_end, clip.label, keyword_unit)


def features_to_csv(feats: FeatureSequence, path) -> None:
    np.savetxt(path, feats.vectors, delimiter=",", fmt="%.6f")
