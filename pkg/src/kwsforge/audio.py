"""AudioClip container and 16-bit PCM WAV I/O."""

from __future__ import annotations

import dataclasses
import wave
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidAlignment, UnsupportedRate

SAMPLE_RATE = 16000
POSITIVE = "positive"
NEGATIVE = "negative"

Segment = Tuple[int, int, int]  # (unit_id, start_sample, end_sample)


@dataclasses.dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    speaker_id: str = ""
    label: str = NEGATIVE
    keyword_end_sample: Optional[int] = None
    keyword_start_sample: Optional[int] = None
    unit_alignment: Optional[Sequence[Segment]] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono audio only")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def replace(self, **changes) -> "AudioClip":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        """Check the clip invariants, raising on the first violation."""
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples outside [-1, 1]")
        n = len(self)
        if self.keyword_end_sample is not None and not 0 <= self.keyword_end_sample <= n:
            raise InvalidAlignment(f"keyword_end_sample {self.keyword_end_sample} outside clip of {n}")
        prev_end = 0
        for unit, start, end in self.unit_alignment or ():
            if start < prev_end or end < start:
                raise InvalidAlignment(f"segment ({unit}, {start}, {end}) overlaps or is unordered")
            if end > n:
                raise InvalidAlignment(f"segment ({unit}, {start}, {end}) ends past clip length {n}")
            prev_end = end


def read_wav(path, **meta) -> AudioClip:
    """Read a mono 16-bit PCM WAV. Extra keyword args become clip metadata."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    if rate != SAMPLE_RATE:
        raise UnsupportedRate(f"{path}: {rate} Hz (only {SAMPLE_RATE} Hz is supported)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate, **meta)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")


def write_wav(path, clip_or_samples, sample_rate_hz: int = SAMPLE_RATE) -> None:
    if isinstance(clip_or_samples, AudioClip):
        samples, sample_rate_hz = clip_or_samples.samples, clip_or_samples.sample_rate_hz
    else:
        samples = clip_or_samples
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate_hz)
        w.writeframes(to_pcm16(samples).tobytes())
