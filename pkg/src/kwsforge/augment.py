"""Multistyle augmentation: additive noise at a target SNR and synthetic reverb."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from .audio import SAMPLE_RATE, AudioClip, read_wav
from .errors import DegenerateRir, PolicyUnsatisfiable, ZeroNoise, ZeroSignal

CLIP_GUARD_PEAK = 0.99


@dataclasses.dataclass
class AugmentPolicy:
    snr_db_range: Tuple[float, float] = (5.0, 25.0)
    reverb_probability: float = 0.5
    rir_decay_ms_range: Tuple[float, float] = (50.0, 300.0)
    noise_corpus: Sequence[np.ndarray] = ()

    def __post_init__(self):
        lo, hi = self.snr_db_range
        if not lo <= hi:
            raise ValueError(f"empty SNR range {self.snr_db_range}")
        if not 0.0 <= self.reverb_probability <= 1.0:
            raise ValueError(f"reverb_probability {self.reverb_probability} outside [0, 1]")
        dlo, dhi = self.rir_decay_ms_range
        if not 0 < dlo <= dhi:
            raise ValueError(f"bad RIR decay range {self.rir_decay_ms_range}")


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_noise(noise: np.ndarray, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Crop or tile ``noise`` to exactly ``n`` samples, starting at a random offset."""
    offset = int(rng.integers(len(noise))) if rng is not None else 0
    reps = -(-(offset + n) // len(noise))
    return np.tile(noise, reps)[offset:offset + n]


def noise_gain(clip_samples: np.ndarray, noise_samples: np.ndarray, snr_db: float) -> float:
    p_clip = _power(clip_samples)
    p_noise = _power(noise_samples)
    if p_noise == 0.0:
        raise ZeroNoise("noise has zero power; SNR is undefined")
    if p_clip == 0.0:
        raise ZeroSignal("clip has zero power; SNR is undefined")
    return float(np.sqrt(p_clip / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise(clip: AudioClip, noise: AudioClip, snr_db: float,
              rng: Optional[np.random.Generator] = None) -> AudioClip:
    """Add ``noise`` scaled so that clip power / noise power equals ``snr_db``.

    Noise shorter than the clip is tiled; the start offset comes from ``rng``
    when given. If the mixture peaks above 1 it is rescaled to peak 0.99.
    """
    noise_samples = noise.samples if isinstance(noise, AudioClip) else np.asarray(noise, dtype=np.float64)
    if noise_samples.size == 0 or not np.any(noise_samples):
        raise ZeroNoise("noise has zero power; SNR is undefined")
    fitted = fit_noise(noise_samples, len(clip), rng)
    if not np.any(fitted):
        raise ZeroNoise("selected noise segment has zero power")
    g = noise_gain(clip.samples, fitted, snr_db)
    mixed = clip.samples + g * fitted
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        mixed = mixed * (CLIP_GUARD_PEAK / peak)
    return clip.replace(samples=mixed)


def apply_reverb(clip: AudioClip, rir: Sequence[float]) -> AudioClip:
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0 or not np.all(np.isfinite(rir)):
        raise DegenerateRir("impulse response must be non-empty and finite")
    if not np.any(rir):
        raise DegenerateRir("impulse response is all zeros")
    out = scipy.signal.fftconvolve(clip.samples, rir)[: len(clip)] if rir.size > 1 else clip.samples * rir[0]
    peak = np.max(np.abs(out)) if out.size else 0.0
    if peak > 1.0:
        out = out * (CLIP_GUARD_PEAK / peak)
    return clip.replace(samples=out)


def synthetic_rir(decay_ms: float, rng: np.random.Generator, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Delta at index 0 followed by a Gaussian tail decaying 60 dB over ``decay_ms``."""
    n = max(2, int(sample_rate_hz * decay_ms / 1000.0))
    t = np.arange(n)
    envelope = 10.0 ** (-3.0 * t / n)  # -60 dB at the end of the tail
    rir = rng.standard_normal(n) * envelope * 0.3
    rir[0] = 1.0
    return rir


def random_augment(clip: AudioClip, policy: AugmentPolicy, rng: np.random.Generator) -> AudioClip:
    """Reverb with ``policy.reverb_probability``, then noise at a uniform SNR.

    The same draws are consumed regardless of outcome so that the random
    stream stays aligned across clips.
    """
    do_reverb = rng.random() < policy.reverb_probability
    decay_ms = rng.uniform(*policy.rir_decay_ms_range)
    rir_seed = int(rng.integers(2**63))
    snr_db = rng.uniform(*policy.snr_db_range)
    noise_idx = int(rng.integers(max(1, len(policy.noise_corpus))))
    noise_seed = int(rng.integers(2**63))

    out = clip
    if do_reverb:
        out = apply_reverb(out, synthetic_rir(decay_ms, np.random.default_rng(rir_seed)))
    if not policy.noise_corpus:
        if policy.snr_db_range[0] < 120.0:
            raise PolicyUnsatisfiable("noise corpus is empty but the SNR range requires noise")
        return out
    if not np.any(out.samples):
        return out
    return mix_noise(out, policy.noise_corpus[noise_idx], snr_db, np.random.default_rng(noise_seed))


def builtin_noise_corpus(seed: int = 0, n_clips: int = 8, seconds: float = 4.0) -> List[np.ndarray]:
    """Procedural colored noise (white, pink, brown, band-limited hum).

    Stand-in for a recorded noise corpus when none is configured.
    """
    rng = np.random.default_rng(seed)
    n = int(seconds * SAMPLE_RATE)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    freqs[0] = freqs[1]
    corpus = []
    for i in range(n_clips):
        kind = i % 4
        spectrum = np.fft.rfft(rng.standard_normal(n))
        if kind == 1:
            spectrum /= np.sqrt(freqs)
        elif kind == 2:
            spectrum /= freqs
        elif kind == 3:
            center = rng.uniform(100.0, 3000.0)
            spectrum *= np.exp(-0.5 * ((freqs - center) / (0.3 * center)) ** 2)
        x = np.fft.irfft(spectrum, n)
        corpus.append(0.3 * x / np.max(np.abs(x)))
    return corpus


def load_noise_dir(path) -> List[np.ndarray]:
    return [read_wav(p).samples for p in sorted(Path(path).glob("*.wav"))]
