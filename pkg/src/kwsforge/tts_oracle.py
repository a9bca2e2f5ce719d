"""Deterministic procedural speech synthesizer with exact unit alignments.

Each word is split into letter pairs; each pair hashes to a phoneme-like
unit id in ``[1, n_units)`` (0 is reserved for background/silence). A unit
renders as a harmonic tone at the speaker's pitch whose spectrum is shaped by
two formant resonances specific to the unit. Prosody symbols act per word:

    (w)  duration x1.5
    w:   150 ms pause after w
    w?   pitch ramps up 20% over the final third of w
    w!   +6 dB

Two rendering modes exist. ``TTS_MODE`` is the clean synthetic voice;
``REAL_MODE`` stands in for recorded speech with wider duration/pitch
jitter, a breath-noise floor and speaker-specific per-unit formant shifts
("accent") that the TTS mode never produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio import NEGATIVE, POSITIVE, SAMPLE_RATE, AudioClip, read_wav, write_wav
from .errors import EmptyPrompt
from .textgen import PromptSpec, normalize

DEFAULT_N_UNITS = 16
WORD_GAP_MS = 30.0
PAUSE_MS = 150.0
SLOW_FACTOR = 1.5
LOUD_GAIN = 10.0 ** (6.0 / 20.0)
RISE_FACTOR = 1.2
RISE_FRACTION = 1.0 / 3.0
UNIT_MIN_MS = 60.0
UNIT_MAX_MS = 120.0
SPEECH_RMS = 0.08
EDGE_MS = 6.0

PITCH_RANGE = (90.0, 280.0)
FORMANT_SCALE_RANGE = (0.8, 1.25)
RATE_RANGE = (0.8, 1.25)


@dataclasses.dataclass(frozen=True)
class OracleMode:
    name: str
    duration_jitter: float
    pitch_jitter: float
    breath_noise_rms: float = 0.0
    accent: float = 0.0


TTS_MODE = OracleMode("tts", duration_jitter=0.10, pitch_jitter=0.03)
REAL_MODE = OracleMode("real", duration_jitter=0.25, pitch_jitter=0.08, breath_noise_rms=0.002, accent=0.15)
MODES = {m.name: m for m in (TTS_MODE, REAL_MODE)}


@dataclasses.dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    base_pitch_hz: float
    formant_scale: float
    speaking_rate: float


@dataclasses.dataclass
class SynthResult:
    clip: AudioClip
    prompt: PromptSpec


def _hash_uniforms(*parts: str, n: int = 1) -> np.ndarray:
    """``n`` independent U[0, 1) draws derived from a stable hash of ``parts``."""
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8 * n).digest()
    ints = np.frombuffer(digest, dtype="<u8")
    return (ints >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _stable_int(*parts: str) -> int:
    return int.from_bytes(hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8).digest(), "little")


def speaker_params(speaker_id: str) -> SpeakerProfile:
    if not speaker_id:
        raise ValueError("speaker_id must be non-empty")
    u = _hash_uniforms("speaker", speaker_id, n=3)
    lerp = lambda rng, x: rng[0] + (rng[1] - rng[0]) * x  # noqa: E731
    return SpeakerProfile(speaker_id, lerp(PITCH_RANGE, u[0]), lerp(FORMANT_SCALE_RANGE, u[1]),
                          lerp(RATE_RANGE, u[2]))


def word_units(word: str, n_units: int = DEFAULT_N_UNITS) -> List[int]:
    """Unit ids of a normalized word: one unit per letter pair."""
    chunks = [word[i:i + 2] for i in range(0, len(word), 2)]
    return [1 + _stable_int("unit", c) % (n_units - 1) for c in chunks]


def unit_formants(unit: int) -> Tuple[float, float]:
    """Canonical (F1, F2) of a unit, spread over the vowel plane by a low-discrepancy walk."""
    g1, g2 = 0.6180339887, 0.7548776662
    f1 = 280.0 + 580.0 * ((unit * g1) % 1.0)
    f2 = 950.0 + 1600.0 * ((unit * g2 + 0.3) % 1.0)
    return f1, f2


def unit_base_ms(unit: int) -> float:
    return UNIT_MIN_MS + (UNIT_MAX_MS - UNIT_MIN_MS) * _hash_uniforms("dur", str(unit))[0]


@dataclasses.dataclass
class _Word:
    text: str
    slow: bool = False
    pause: bool = False
    rise: bool = False
    loud: bool = False


_TOKEN_SUFFIX = re.compile(r"[):?!]+$")


def parse_prompt(text: str) -> List[_Word]:
    """Split prompt text into words carrying their prosody flags."""
    words: List[_Word] = []
    in_paren = False
    for token in text.split():
        if token.startswith("("):
            in_paren = True
        slow = in_paren
        m = _TOKEN_SUFFIX.search(token)
        suffix = m.group(0) if m else ""
        if ")" in token:
            in_paren = False
        parts = normalize(token)
        for i, w in enumerate(parts):
            last = i == len(parts) - 1
            words.append(_Word(w, slow=slow, pause=last and ":" in suffix,
                               rise=last and "?" in suffix, loud=last and "!" in suffix))
    return words


def _harmonic_weights(f0: float, f1: float, f2: float) -> np.ndarray:
    fk = np.arange(1, int(4500.0 // f0) + 1, dtype=np.float64) * f0
    amps = (np.exp(-0.5 * ((fk - f1) / 90.0) ** 2)
            + 0.7 * np.exp(-0.5 * ((fk - f2) / 140.0) ** 2)
            + 0.03 * f0 / fk)
    return amps / np.sqrt(0.5 * np.sum(amps**2))


def _sine_series(phase: np.ndarray, amps: np.ndarray) -> np.ndarray:
    """sum_k amps[k-1] * sin(k * phase) via the Clenshaw recurrence."""
    two_cos = 2.0 * np.cos(phase)
    b1 = np.zeros_like(phase)
    b2 = np.zeros_like(phase)
    for a in amps[::-1]:
        b1, b2 = a + two_cos * b1 - b2, b1
    return b1 * np.sin(phase)


def _edge_envelope(n: int) -> np.ndarray:
    env = np.ones(n)
    e = min(n // 2, int(EDGE_MS * SAMPLE_RATE / 1000))
    if e > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(e) / e)
        env[:e] = ramp
        env[n - e:] = ramp[::-1]
    return env


def synth(prompt: PromptSpec, speaker: SpeakerProfile, seed: int = 0,
          mode: OracleMode = TTS_MODE, n_units: int = DEFAULT_N_UNITS) -> SynthResult:
    """Render ``prompt`` in ``speaker``'s voice. Deterministic in (prompt, speaker, seed, mode)."""
    words = parse_prompt(prompt.text)
    if not words:
        raise EmptyPrompt(f"prompt {prompt.text!r} has no renderable words")
    # keyed on the words only: a prosody symbol changes the rendering, not the random draws
    spoken = " ".join(w.text for w in words)
    rng = np.random.default_rng([_stable_int("synth", spoken, speaker.speaker_id, mode.name), seed])
    sr = SAMPLE_RATE
    lead = int(rng.uniform(0.10, 0.30) * sr)
    tail = int(rng.uniform(0.15, 0.30) * sr)
    utt_pitch = speaker.base_pitch_hz * (1.0 + rng.uniform(-mode.pitch_jitter, mode.pitch_jitter))

    pieces: List[np.ndarray] = [np.zeros(lead)]
    cursor = lead
    alignment: List[Tuple[int, int, int]] = []
    word_spans: List[Tuple[int, int]] = []
    for wi, word in enumerate(words):
        units = word_units(word.text, n_units)
        word_pitch = utt_pitch * (1.0 + rng.uniform(-mode.pitch_jitter, mode.pitch_jitter) / 2.0)
        durations = []
        for u in units:
            jitter = 1.0 + rng.uniform(-mode.duration_jitter, mode.duration_jitter)
            ms = unit_base_ms(u) / speaker.speaking_rate * jitter * (SLOW_FACTOR if word.slow else 1.0)
            durations.append(max(1, int(round(ms * sr / 1000.0))))
        n_word = sum(durations)
        f0 = np.full(n_word, word_pitch)
        if word.rise:
            start = int(n_word * (1.0 - RISE_FRACTION))
            f0[start:] *= np.linspace(1.0, RISE_FACTOR, n_word - start)
        phase = 2.0 * np.pi * np.cumsum(f0) / sr
        audio = np.zeros(n_word)
        pos = 0
        for u, n in zip(units, durations):
            f1, f2 = unit_formants(u)
            scale = speaker.formant_scale
            if mode.accent:
                shift = _hash_uniforms("accent", speaker.speaker_id, str(u), n=2) * 2.0 - 1.0
                f1, f2 = f1 * (1.0 + mode.accent * shift[0]), f2 * (1.0 + mode.accent * shift[1])
            amps = _harmonic_weights(float(np.mean(f0[pos:pos + n])), f1 * scale, f2 * scale)
            seg = _sine_series(phase[pos:pos + n], amps)
            audio[pos:pos + n] = seg * _edge_envelope(n)
            alignment.append((u, cursor + pos, cursor + pos + n))
            pos += n
        audio *= SPEECH_RMS * (LOUD_GAIN if word.loud else 1.0)
        pieces.append(audio)
        word_spans.append((cursor, cursor + n_word))
        cursor += n_word
        gap_ms = (PAUSE_MS if word.pause else 0.0) + (WORD_GAP_MS if wi < len(words) - 1 else 0.0)
        gap = int(round(gap_ms * sr / 1000.0))
        pieces.append(np.zeros(gap))
        cursor += gap
    pieces.append(np.zeros(tail))
    samples = np.concatenate(pieces)
    if mode.breath_noise_rms:
        noise = rng.standard_normal(samples.size)
        noise = np.convolve(noise, np.ones(8) / 8.0, mode="same")  # soften toward low frequencies
        noise *= mode.breath_noise_rms / (np.sqrt(np.mean(noise**2)) + 1e-12)
        samples = samples + noise
    peak = np.max(np.abs(samples))
    if peak > 0.99:
        samples *= 0.99 / peak

    kw_start = kw_end = None
    if prompt.keyword is not None:
        needle = normalize(prompt.keyword[0]) + normalize(prompt.keyword[1])
        texts = [w.text for w in words]
        for i in range(len(texts) - len(needle) + 1):
            if texts[i:i + len(needle)] == needle:
                kw_start, kw_end = word_spans[i][0], word_spans[i + len(needle) - 1][1]
                break
    label = prompt.label
    if label != POSITIVE:
        kw_start = kw_end = None
    clip = AudioClip(samples, SAMPLE_RATE, speaker.speaker_id, label,
                     keyword_end_sample=kw_end, keyword_start_sample=kw_start,
                     unit_alignment=alignment)
    return SynthResult(clip, prompt)


# --------------------------------------------------------------------------
# on-disk form: WAV + alignment JSON + manifest entry


def alignment_to_json(clip: AudioClip) -> dict:
    return {
        "speaker_id": clip.speaker_id,
        "label": clip.label,
        "sample_rate_hz": clip.sample_rate_hz,
        "keyword_start_sample": clip.keyword_start_sample,
        "keyword_end_sample": clip.keyword_end_sample,
        "units": [list(map(int, seg)) for seg in clip.unit_alignment or ()],
    }


def manifest_entry(clip: AudioClip, utt_id: str, source: str, wav_path=None, alignment_path=None) -> dict:
    entry = {
        "utt_id": utt_id,
        "wav_path": str(wav_path) if wav_path is not None else None,
        "label": clip.label,
        "speaker_id": clip.speaker_id,
        "source": source,
        "duration_ms": round(1000.0 * len(clip) / clip.sample_rate_hz, 3),
    }
    if alignment_path is not None:
        entry["alignment_path"] = str(alignment_path)
    if clip.keyword_end_sample is not None:
        entry["keyword_end_ms"] = round(1000.0 * clip.keyword_end_sample / clip.sample_rate_hz, 3)
    return entry


def write_utterance(clip: AudioClip, out_dir, utt_id: str, source: str) -> dict:
    """Write ``<utt_id>.wav`` and ``<utt_id>.json`` and return the manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_path = out_dir / f"{utt_id}.wav"
    align_path = out_dir / f"{utt_id}.json"
    write_wav(wav_path, clip)
    align_path.write_text(json.dumps(alignment_to_json(clip), sort_keys=True))
    return manifest_entry(clip, utt_id, source, wav_path, align_path)


def import_external(wav_path, alignment_path=None, label: Optional[str] = None,
                    speaker_id: Optional[str] = None) -> AudioClip:
    """Load externally synthesized audio plus an optional alignment JSON.

    The JSON uses the same schema ``write_utterance`` emits; only
    ``keyword_end_sample`` is required for positive clips.
    """
    meta = {}
    if alignment_path is not None and Path(alignment_path).exists():
        meta = json.loads(Path(alignment_path).read_text())
    clip = read_wav(wav_path,
                    speaker_id=speaker_id or meta.get("speaker_id", ""),
                    label=label or meta.get("label", NEGATIVE),
                    keyword_end_sample=meta.get("keyword_end_sample"),
                    keyword_start_sample=meta.get("keyword_start_sample"),
                    unit_alignment=[tuple(seg) for seg in meta.get("units", [])] or None)
    clip.validate()
    return clip


def render_prompts(prompts: Sequence[PromptSpec], speaker_ids: Sequence[str], out_dir, source: str,
                   mode: OracleMode, seed: int = 0, utt_prefix: str = "utt",
                   n_units: int = DEFAULT_N_UNITS) -> List[dict]:
    """Synthesize prompt i with speaker ``speaker_ids[i]``; returns manifest entries."""
    entries = []
    for i, (prompt, spk) in enumerate(zip(prompts, speaker_ids)):
        result = synth(prompt, speaker_params(spk), seed=seed + i, mode=mode, n_units=n_units)
        entries.append(write_utterance(result.clip, out_dir, f"{utt_prefix}_{i:06d}", source))
    return entries
