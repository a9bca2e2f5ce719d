"""Mini-batch training loop: manifest -> augment -> features -> loss -> optimizer."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio import NEGATIVE, POSITIVE, AudioClip, to_pcm16
from .augment import AugmentPolicy, builtin_noise_corpus, load_noise_dir, random_augment
from .errors import DivergenceError, ManifestImbalance, ShapeError
from .frontend import FrameLabels, compute_features_batch, feature_frame_labels, num_output_frames, num_source_frames
from .objective import LossConfig, combined_loss
from .svdf import KwsModel, ModelConfig, Params, backward_from_cache, forward_with_cache, init_model, save_checkpoint
from .tts_oracle import import_external

log = logging.getLogger(__name__)


@dataclasses.dataclass
class AugmentSettings:
    """Serializable augmentation settings; ``noise_dir=None`` selects built-in procedural noise."""

    enabled: bool = True
    snr_db_range: Tuple[float, float] = (5.0, 25.0)
    reverb_probability: float = 0.5
    rir_decay_ms_range: Tuple[float, float] = (50.0, 300.0)
    noise_dir: Optional[str] = None

    def policy(self, seed: int) -> Optional[AugmentPolicy]:
        if not self.enabled:
            return None
        corpus = load_noise_dir(self.noise_dir) if self.noise_dir else builtin_noise_corpus(seed)
        return AugmentPolicy(tuple(self.snr_db_range), self.reverb_probability,
                             tuple(self.rir_decay_ms_range), corpus)


@dataclasses.dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    pos_fraction: float = 0.25
    learning_rate: float = 1e-3
    # "constant", or "cosine": anneal to zero over ``steps``
    lr_schedule: str = "constant"
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    augment: AugmentSettings = dataclasses.field(default_factory=AugmentSettings)
    seed: int = 0
    # positives are cut this long after the keyword ends; None keeps whole clips
    crop_after_keyword_ms: Optional[float] = 500.0
    workers: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError("pos_fraction must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentSettings(**self.augment)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def read(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclasses.dataclass
class TrainLog:
    steps: List[dict] = dataclasses.field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint_path: Optional[str] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "ce_part", "mp_part"])
            w.writeheader()
            for row in self.steps:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# optimizers


@dataclasses.dataclass
class OptimizerState:
    t: int = 0
    m: Optional[Params] = None
    v: Optional[Params] = None


def _zeros_like(params: Params) -> Params:
    return [{k: np.zeros_like(a) for k, a in p.items()} for p in params]


def learning_rate_at(cfg: TrainConfig, t: int) -> float:
    """Learning rate of update ``t`` (1-based)."""
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (t - 1) / cfg.steps))
    return cfg.learning_rate


def optimizer_step(params: Params, grads: Params, state: OptimizerState,
                   cfg: TrainConfig) -> Tuple[Params, OptimizerState]:
    """One SGD-momentum or Adam update. ``params`` are modified in place and returned."""
    if len(params) != len(grads):
        raise ShapeError("gradient list does not match parameter list")
    for p, g in zip(params, grads):
        for k in p:
            if g[k].shape != p[k].shape:
                raise ShapeError(f"gradient shape {g[k].shape} != parameter shape {p[k].shape}")
    if state.m is None:
        state.m = _zeros_like(params)
        if cfg.optimizer == "adam":
            state.v = _zeros_like(params)
    state.t += 1
    lr = learning_rate_at(cfg, state.t)
    if cfg.optimizer == "sgd_momentum":
        for p, g, m in zip(params, grads, state.m):
            for k in p:
                m[k] *= cfg.momentum
                m[k] += g[k]
                p[k] -= lr * m[k]
        return params, state
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for k in p:
            m[k] = b1 * m[k] + (1.0 - b1) * g[k]
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k]
            p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.eps)
    return params, state


# --------------------------------------------------------------------------
# data


@dataclasses.dataclass
class Utterance:
    pcm: np.ndarray  # int16 samples
    labels: FrameLabels
    label: str
    speaker_id: str
    keyword_end_sample: Optional[int]
    keyword_start_sample: Optional[int]
    alignment: Optional[list]

    def clip(self) -> AudioClip:
        return AudioClip(self.pcm.astype(np.float64) / 32768.0, speaker_id=self.speaker_id, label=self.label,
                         keyword_end_sample=self.keyword_end_sample,
                         keyword_start_sample=self.keyword_start_sample, unit_alignment=self.alignment)


class AudioCache:
    """Decoded manifest audio kept in memory (int16) across training runs.

    Entries are keyed by ``utt_id``. Clips produced in memory can be
    registered with ``put`` so that manifests need no WAV files on disk.
    """

    def __init__(self):
        self._store: Dict[str, Tuple[np.ndarray, AudioClip]] = {}

    def __len__(self):
        return len(self._store)

    @staticmethod
    def _key(entry: dict) -> str:
        return str(entry.get("utt_id") or entry["wav_path"])

    def put(self, entry: dict, clip: AudioClip) -> None:
        self._store[self._key(entry)] = (to_pcm16(clip.samples), clip.replace(samples=np.zeros(0)))

    def load(self, entry: dict) -> AudioClip:
        hit = self._store.get(self._key(entry))
        if hit is None:
            if not entry.get("wav_path"):
                raise FileNotFoundError(f"no audio for {self._key(entry)!r}: not cached and no wav_path")
            clip = import_external(entry["wav_path"], entry.get("alignment_path"), label=entry["label"],
                                   speaker_id=str(entry.get("speaker_id", "")))
            self.put(entry, clip)
            hit = self._store[self._key(entry)]
        pcm, meta = hit
        return meta.replace(samples=pcm.astype(np.float64) / 32768.0)

    def load_pcm(self, entry: dict) -> Tuple[np.ndarray, AudioClip]:
        """(int16 samples, metadata clip with empty samples), without a float copy."""
        if self._key(entry) not in self._store:
            self.load(entry)
        return self._store[self._key(entry)]


def prepare_utterance(clip: AudioClip, crop_after_keyword_ms: Optional[float],
                      pcm: Optional[np.ndarray] = None) -> Utterance:
    """Crop and label one clip. ``pcm`` overrides ``clip.samples`` when given."""
    if pcm is None:
        pcm = to_pcm16(clip.samples)
    if clip.label == POSITIVE and clip.keyword_end_sample is not None and crop_after_keyword_ms is not None:
        end = clip.keyword_end_sample + int(crop_after_keyword_ms * clip.sample_rate_hz / 1000.0)
        pcm = pcm[:max(end, 400)]
    alignment = [seg for seg in (clip.unit_alignment or ()) if seg[2] <= len(pcm)]
    clip = clip.replace(samples=pcm, unit_alignment=alignment or None)
    n_frames = num_output_frames(num_source_frames(len(pcm)))
    return Utterance(pcm, feature_frame_labels(clip, n_frames), clip.label, clip.speaker_id,
                     clip.keyword_end_sample, clip.keyword_start_sample, clip.unit_alignment)


def load_manifest_audio(manifest: Sequence[dict], cache: Optional[AudioCache] = None) -> List[AudioClip]:
    cache = cache or AudioCache()
    return [cache.load(e) for e in manifest]


# --------------------------------------------------------------------------
# training


class _LabelStream:
    """Endless deterministic pass over indices of one label, reshuffled per epoch."""

    def __init__(self, indices: List[int], rng: np.random.Generator):
        self.indices = indices
        self.rng = rng
        self.order: List[int] = []

    def take(self, n: int) -> List[int]:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = [self.indices[i] for i in self.rng.permutation(len(self.indices))]
            out.append(self.order.pop())
        return out


def batch_composition(batch_size: int, pos_fraction: float) -> Tuple[int, int]:
    n_pos = int(round(pos_fraction * batch_size))
    return n_pos, batch_size - n_pos


def train(model_cfg: ModelConfig, manifest: Sequence[dict], cfg: TrainConfig,
          out_dir=None, clips: Optional[Sequence[AudioClip]] = None,
          cache: Optional[AudioCache] = None) -> Tuple[KwsModel, TrainLog]:
    """Train a fresh model on ``manifest``.

    Audio comes from ``clips`` when given (aligned with ``manifest``), else is
    loaded from the manifest's WAV/alignment files. With ``out_dir`` the final
    checkpoint and the per-step CSV log are written there.
    """
    started = time.perf_counter()
    if not manifest and clips is None:
        raise ManifestImbalance("manifest is empty")
    if clips is None:
        # int16 straight from the cache: a float64 copy of a large manifest does not fit in memory
        cache = cache or AudioCache()
        utts = []
        for e in manifest:
            pcm, meta = cache.load_pcm(e)
            utts.append(prepare_utterance(meta, cfg.crop_after_keyword_ms, pcm))
    else:
        utts = [prepare_utterance(c, cfg.crop_after_keyword_ms) for c in clips]
    if not utts:
        raise ManifestImbalance("manifest is empty")
    pos_idx = [i for i, u in enumerate(utts) if u.label == POSITIVE]
    neg_idx = [i for i, u in enumerate(utts) if u.label == NEGATIVE]
    n_pos, n_neg = batch_composition(cfg.batch_size, cfg.pos_fraction)
    if (n_pos and not pos_idx) or (n_neg and not neg_idx):
        raise ManifestImbalance(
            f"batch needs {n_pos} positives and {n_neg} negatives; manifest has "
            f"{len(pos_idx)} positives and {len(neg_idx)} negatives")
    # encoder max-pool class for negatives: the keyword's final unit, as seen in positives
    kw_units = [u.labels.keyword_unit for u in utts if u.labels.keyword_unit is not None]
    keyword_unit = max(set(kw_units), key=kw_units.count) if kw_units else None
    for u in utts:
        if u.label == NEGATIVE:
            u.labels.keyword_unit = keyword_unit

    root = np.random.SeedSequence(cfg.seed)
    init_ss, pos_ss, neg_ss, aug_ss = root.spawn(4)
    model = init_model(model_cfg, np.random.default_rng(init_ss))
    policy = cfg.augment.policy(int(aug_ss.generate_state(1)[0]))
    aug_rng = np.random.default_rng(aug_ss)
    pos_stream = _LabelStream(pos_idx, np.random.default_rng(pos_ss))
    neg_stream = _LabelStream(neg_idx, np.random.default_rng(neg_ss))
    opt_state = OptimizerState()
    train_log = TrainLog()
    n_enc = model_cfg.encoder_output_dim
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def augment_one(args):
        idx, seed = args
        clip = utts[idx].clip()
        if policy is not None:
            clip = random_augment(clip, policy, np.random.default_rng(seed))
        return clip.samples

    try:
        for step in range(cfg.steps):
            batch = pos_stream.take(n_pos) + neg_stream.take(n_neg)
            seeds = aug_rng.integers(2**63, size=len(batch))
            jobs = list(zip(batch, seeds))
            signals = list(pool.map(augment_one, jobs)) if pool else [augment_one(j) for j in jobs]
            feats = compute_features_batch(signals, dtype=np.float32)
            t_max = max(f.shape[0] for f in feats)
            x = np.zeros((len(batch), t_max, feats[0].shape[1]), dtype=np.float32)
            for b, f in enumerate(feats):
                x[b, :f.shape[0]] = f
            work = model.copy()
            for p in work.params:
                for k in p:
                    p[k] = p[k].astype(np.float32)
            logits, fwd_cache = forward_with_cache(work, x)
            upstream = np.zeros(logits.shape, dtype=np.float32)
            total = ce_sum = mp_sum = 0.0
            for b, idx in enumerate(batch):
                t_len = feats[b].shape[0]
                y = logits[b, :t_len].astype(np.float64)
                res = combined_loss(y[:, :n_enc], y[:, n_enc:], utts[idx].labels, cfg.loss)
                upstream[b, :t_len, :n_enc] = res.grad_encoder
                upstream[b, :t_len, n_enc:] = res.grad_decoder
                total += res.loss
                ce_sum += res.ce_part
                mp_sum += res.mp_part
            n = len(batch)
            loss = total / n
            if not np.isfinite(loss):
                raise DivergenceError(step, loss)
            upstream /= n
            grads = backward_from_cache(work, fwd_cache, upstream)
            grads = [{k: g.astype(np.float64) for k, g in layer.items()} for layer in grads]
            optimizer_step(model.params, grads, opt_state, cfg)
            train_log.steps.append({"step": step, "loss": loss, "ce_part": ce_sum / n, "mp_part": mp_sum / n})
            if step % 100 == 0:
                log.info("step %d loss %.4f", step, loss)
    finally:
        if pool is not None:
            pool.shutdown()
    train_log.wall_clock_s = time.perf_counter() - started
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.kwsf"
        save_checkpoint(model, ckpt)
        train_log.checkpoint_path = str(ckpt)
        train_log.write_csv(out_dir / "train_log.csv")
    return model, train_log
