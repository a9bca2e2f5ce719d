"""Combined frame-level cross-entropy and max-pool training loss.

For each head (encoder over unit ids, decoder over background/keyword)::

    head_loss = (1 - alpha) * CE(logits, per-frame labels) + alpha * MP(logits)

and the total is the head-weighted sum. CE is averaged over frames; MP is a
single cross-entropy at one pooled frame per utterance:

* positive: the frame with the highest keyword logit inside the window
  ``[omega_end - W + 1, omega_end]``, trained towards the keyword class;
* negative: the frame with the highest keyword logit anywhere, trained
  towards the background class.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Tuple

import numpy as np

from .audio import POSITIVE
from .errors import LabelError, MissingEndLabel, ShapeError
from .frontend import BACKGROUND, KEYWORD, FrameLabels

FrameTargets = FrameLabels


@dataclasses.dataclass
class LossConfig:
    alpha: float = 0.9
    encoder_weight: float = 1.0
    decoder_weight: float = 1.0
    pool_window_frames: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        for w in (self.encoder_weight, self.decoder_weight):
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"head weight {w} must be finite and non-negative")
        if self.pool_window_frames < 1:
            raise ValueError("pool window must be at least one frame")


@dataclasses.dataclass
class LossResult:
    loss: float
    grad_encoder: np.ndarray
    grad_decoder: np.ndarray
    ce_part: float
    mp_part: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_frame_loss(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over frames and its gradient wrt ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_frames, n_classes = logits.shape
    if labels.shape != (n_frames,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n_frames} frames")
    if n_frames == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes})")
    logp = _log_softmax(logits)
    rows = np.arange(n_frames)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n_frames


def pooled_frame(logits: np.ndarray, label: str, omega_end: Optional[int], window: int,
                 keyword_class: int = KEYWORD) -> int:
    """Index of the frame the max-pool loss is applied to."""
    n_frames = logits.shape[0]
    if label == POSITIVE:
        if omega_end is None:
            raise MissingEndLabel("positive utterance without an end-of-keyword frame")
        if not 0 <= omega_end < n_frames:
            raise MissingEndLabel(f"omega_end {omega_end} outside [0, {n_frames})")
        lo = max(0, omega_end - window + 1)
        return lo + int(np.argmax(logits[lo:omega_end + 1, keyword_class]))
    return int(np.argmax(logits[:, keyword_class]))


def max_pool_loss(logits, targets: FrameTargets, window: int,
                  keyword_class: int = KEYWORD,
                  background_class: int = BACKGROUND) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    if logits.shape[0] == 0:
        return 0.0, grad
    if not 0 <= keyword_class < logits.shape[1]:
        raise LabelError(f"keyword class {keyword_class} outside [0, {logits.shape[1]})")
    t_star = pooled_frame(logits, targets.label, targets.omega_end, window, keyword_class)
    target = keyword_class if targets.label == POSITIVE else background_class
    logp = _log_softmax(logits[t_star])
    grad[t_star] = np.exp(logp)
    grad[t_star, target] -= 1.0
    return float(-logp[target]), grad


def _head(logits, ce_labels, targets, cfg: LossConfig, keyword_class: Optional[int]):
    ce, g_ce = ce_frame_loss(logits, ce_labels)
    if keyword_class is None:
        # no alignment for this head's pooling class: CE only
        return ce, 0.0, g_ce, np.zeros_like(g_ce)
    mp, g_mp = max_pool_loss(logits, targets, cfg.pool_window_frames, keyword_class=keyword_class)
    return ce, mp, g_ce, g_mp


def combined_loss(encoder_logits, decoder_logits, targets: FrameTargets, cfg: LossConfig) -> LossResult:
    """Weighted CE + max-pool loss over both heads, with gradients on both logit sets."""
    encoder_logits = np.asarray(encoder_logits, dtype=np.float64)
    decoder_logits = np.asarray(decoder_logits, dtype=np.float64)
    if encoder_logits.shape[0] != decoder_logits.shape[0]:
        raise ShapeError("encoder and decoder logits disagree on frame count")
    a = cfg.alpha
    # the encoder pools on the keyword's final unit; negatives need it set by the caller
    ce_e, mp_e, gce_e, gmp_e = _head(encoder_logits, targets.units, targets, cfg, targets.keyword_unit)
    ce_d, mp_d, gce_d, gmp_d = _head(decoder_logits, targets.keyword, targets, cfg, KEYWORD)
    ce_part = cfg.encoder_weight * ce_e + cfg.decoder_weight * ce_d
    mp_part = cfg.encoder_weight * mp_e + cfg.decoder_weight * mp_d
    loss = (1.0 - a) * ce_part + a * mp_part
    grad_e = cfg.encoder_weight * ((1.0 - a) * gce_e + a * gmp_e)
    grad_d = cfg.decoder_weight * ((1.0 - a) * gce_d + a * gmp_d)
    return LossResult(float(loss), grad_e, grad_d, float(ce_part), float(mp_part))
