"""Manifests and declarative real/TTS training mixtures."""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .audio import NEGATIVE, POSITIVE
from .errors import PoolExhausted, StratificationError

REAL = "real"
TTS = "tts"
SOURCES = (REAL, TTS)
AXES = ("real_pos_count", "n_speakers", "utts_per_speaker")

Entry = Dict[str, object]


class Manifest(list):
    """List of manifest entries (dicts) with JSON-lines I/O and pool helpers."""

    def validate(self) -> "Manifest":
        seen = set()
        for e in self:
            uid = e["utt_id"]
            if uid in seen:
                raise ValueError(f"duplicate utt_id {uid!r}")
            seen.add(uid)
            if e["label"] not in (POSITIVE, NEGATIVE):
                raise ValueError(f"{uid}: label must be positive or negative")
            if e.get("source") not in SOURCES:
                raise ValueError(f"{uid}: source must be one of {SOURCES}")
            if e["label"] == POSITIVE and e.get("keyword_end_ms") is None:
                raise ValueError(f"{uid}: positive entry without keyword_end_ms")
        return self

    def pool(self, source: str, label: str) -> "Manifest":
        return Manifest(e for e in self if e.get("source") == source and e["label"] == label)

    def speakers(self) -> List[str]:
        return list(OrderedDict.fromkeys(str(e["speaker_id"]) for e in self))

    def total_hours(self) -> float:
        return sum(float(e["duration_ms"]) for e in self) / 3.6e6

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for e in self:
                f.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as f:
            return cls(json.loads(line) for line in f if line.strip())

    @classmethod
    def concat(cls, manifests: Iterable[Sequence[Entry]]) -> "Manifest":
        out = cls()
        for m in manifests:
            out.extend(m)
        return out


@dataclasses.dataclass
class MixSpec:
    """Requested counts per pool.

    ``real_pos`` is either a plain count or, when ``n_speakers`` and
    ``utts_per_speaker`` are set, the speaker-stratified rule.
    """

    tts_pos: int = 0
    tts_neg: int = 0
    real_pos: int = 0
    real_neg: int = 0
    n_speakers: Optional[int] = None
    utts_per_speaker: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("tts_pos", "tts_neg", "real_pos", "real_neg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if (self.n_speakers is None) != (self.utts_per_speaker is None):
            raise ValueError("n_speakers and utts_per_speaker go together")
        if self.stratified and (self.n_speakers < 1 or self.utts_per_speaker < 1):
            raise ValueError("stratified rule needs n_speakers >= 1 and utts_per_speaker >= 1")

    @property
    def stratified(self) -> bool:
        return self.n_speakers is not None

    @property
    def real_pos_total(self) -> int:
        return self.n_speakers * self.utts_per_speaker if self.stratified else self.real_pos

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MixSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})

    @classmethod
    def read(cls, path) -> "MixSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def _sample(pool: Sequence[Entry], k: int, rng: np.random.Generator, name: str) -> List[Entry]:
    if k > len(pool):
        raise PoolExhausted(name, k, len(pool))
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def fisher_yates(items: List, rng: np.random.Generator) -> List:
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.integers(i + 1))
        items[i], items[j] = items[j], items[i]
    return items


def stratify_speakers(pool: Sequence[Entry], n_speakers: int, utts_per_speaker: int,
                      seed) -> Manifest:
    rng = np.random.default_rng(seed)
    by_speaker: Dict[str, List[Entry]] = OrderedDict()
    for e in pool:
        by_speaker.setdefault(str(e["speaker_id"]), []).append(e)
    eligible = [s for s, es in by_speaker.items() if len(es) >= utts_per_speaker]
    if len(eligible) < n_speakers:
        raise StratificationError(
            f"need {n_speakers} speakers with >= {utts_per_speaker} utterances; "
            f"pool has {len(by_speaker)} speakers, {len(eligible)} deep enough")
    chosen = [eligible[i] for i in sorted(rng.choice(len(eligible), size=n_speakers, replace=False))]
    out = Manifest()
    for spk in chosen:
        out.extend(_sample(by_speaker[spk], utts_per_speaker, rng, f"speaker {spk}"))
    return out


def sample_mixture(pools: Dict[Tuple[str, str], Sequence[Entry]], spec: MixSpec) -> Manifest:
    """Sample each pool without replacement, then shuffle the union.

    ``pools`` maps (source, label) to entries, e.g. ``("real", "positive")``.
    """
    rng = np.random.default_rng(spec.seed)
    get = lambda src, lab: pools.get((src, lab), [])  # noqa: E731
    picked: List[Entry] = []
    picked += _sample(get(TTS, POSITIVE), spec.tts_pos, rng, "tts/positive")
    picked += _sample(get(TTS, NEGATIVE), spec.tts_neg, rng, "tts/negative")
    if spec.stratified:
        picked += stratify_speakers(get(REAL, POSITIVE), spec.n_speakers, spec.utts_per_speaker,
                                    rng.integers(2**63))
    else:
        picked += _sample(get(REAL, POSITIVE), spec.real_pos, rng, "real/positive")
    picked += _sample(get(REAL, NEGATIVE), spec.real_neg, rng, "real/negative")
    return Manifest(fisher_yates(picked, rng))


def pools_from_manifest(manifest: Sequence[Entry]) -> Dict[Tuple[str, str], Manifest]:
    pools: Dict[Tuple[str, str], Manifest] = {}
    for e in manifest:
        pools.setdefault((str(e["source"]), str(e["label"])), Manifest()).append(e)
    return pools


def sweep_grid(base: MixSpec, axis: str, values: Sequence[int]) -> List[MixSpec]:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be monotone increasing")
    specs = []
    for i, v in enumerate(values):
        changes = {"seed": base.seed + i}
        if axis == "real_pos_count":
            changes.update(real_pos=int(v), n_speakers=None, utts_per_speaker=None)
        else:
            if not base.stratified:
                raise ValueError(f"axis {axis} needs a stratified base spec")
            changes[axis] = int(v)
        specs.append(dataclasses.replace(base, **changes))
    return specs


def axis_value(spec: MixSpec, axis: str) -> int:
    return spec.real_pos if axis == "real_pos_count" else getattr(spec, axis)
