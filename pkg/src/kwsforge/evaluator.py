"""Utterance scoring, FRR at a fixed false-accept rate, and DET curves.

Counting rules: a negative utterance contributes one false accept when its
score is strictly above the threshold; a positive is rejected when its score
is at or below the threshold.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyInput, InsufficientNegatives, InsufficientPositives
from .frontend import FeatureSequence
from .svdf import KwsModel, forward_batch, forward_stream, stream_init

TARGET_FA_PER_HOUR = 0.133
SMOOTHING_FRAMES = 5


@dataclasses.dataclass
class EvalReport:
    threshold: float
    frr_percent: float
    fa_per_hour: float
    det_points: List[Tuple[float, float]]
    n_pos: int
    n_neg: int
    neg_hours: float
    target_fa_per_hour: float = TARGET_FA_PER_HOUR

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["threshold"] = _json_float(self.threshold)
        d["det_points"] = [list(p) for p in self.det_points]
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def write_det_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["fa_per_hour", "frr_percent"])
            w.writerows(self.det_points)


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def keyword_posteriors(decoder_logits: np.ndarray) -> np.ndarray:
    """P(keyword) per frame from the 2-way decoder logits."""
    d = decoder_logits[:, 1] - decoder_logits[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))  # logistic(d), overflow-free


def smooth(x: np.ndarray, width: int) -> np.ndarray:
    """Causal moving average over the last ``width`` frames (shorter at the start)."""
    if width <= 1:
        return x
    c = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - width)
    return (c[idx] - c[lo]) / (idx - lo)


def score_utterance(model: KwsModel, feats, smoothing: int = SMOOTHING_FRAMES,
                    streaming: bool = True) -> float:
    """Max over frames of the smoothed decoder keyword posterior."""
    x = feats.vectors if isinstance(feats, FeatureSequence) else np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("no feature frames to score")
    n_enc = model.config.encoder_output_dim
    if streaming:
        state = stream_init(model)
        dec = np.empty((x.shape[0], 2))
        for t in range(x.shape[0]):
            y, state = forward_stream(model, state, x[t])
            dec[t] = y[n_enc:]
    else:
        dec = forward_batch(model, x)[:, n_enc:]
    return float(np.max(smooth(keyword_posteriors(dec), smoothing)))


def score_many(model: KwsModel, feature_list: Sequence[np.ndarray], smoothing: int = SMOOTHING_FRAMES,
               streaming: bool = True, batch_size: int = 64) -> np.ndarray:
    if streaming:
        return np.array([score_utterance(model, f, smoothing, True) for f in feature_list])
    scores = np.empty(len(feature_list))
    n_enc = model.config.encoder_output_dim
    order = np.argsort([f.shape[0] for f in feature_list], kind="stable")
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        t_max = max(feature_list[i].shape[0] for i in chunk)
        x = np.zeros((len(chunk), t_max, feature_list[chunk[0]].shape[1]))
        for b, i in enumerate(chunk):
            x[b, :feature_list[i].shape[0]] = feature_list[i]
        y = forward_batch(model, x)[..., n_enc:]
        for b, i in enumerate(chunk):
            t_len = feature_list[i].shape[0]
            if t_len == 0:
                raise EmptyInput("no feature frames to score")
            scores[i] = np.max(smooth(keyword_posteriors(y[b, :t_len]), smoothing))
    return scores


def select_threshold(neg_scores: Sequence[float], neg_hours: float,
                     target_fa_per_hour: float = TARGET_FA_PER_HOUR) -> float:
    """Smallest candidate threshold whose false-accept rate is within the target.

    Candidates are the negative scores and +inf.
    """
    scores = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if scores.size == 0:
        raise InsufficientNegatives("no negative scores")
    if not neg_hours > 0:
        raise ValueError("neg_hours must be positive")
    if not np.all(np.isfinite(scores)):
        raise ValueError("negative scores must be finite")
    n = scores.size
    # false accepts at threshold scores[i] = number strictly above it
    fa = n - np.searchsorted(scores, scores, side="right")
    ok = fa / neg_hours <= target_fa_per_hour
    return float(scores[np.argmax(ok)]) if ok.any() else math.inf


def fa_per_hour_at(neg_scores: Sequence[float], threshold: float, neg_hours: float) -> float:
    return float(np.sum(np.asarray(neg_scores) > threshold)) / neg_hours


def frr_at_threshold(pos_scores: Sequence[float], threshold: float) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64)
    if pos.size == 0:
        raise InsufficientPositives("no positive scores")
    return 100.0 * float(np.sum(pos <= threshold)) / pos.size


def det_curve(pos_scores: Sequence[float], neg_scores: Sequence[float],
              neg_hours: float) -> List[Tuple[float, float]]:
    """(fa_per_hour, frr_percent) at every distinct negative score, ascending threshold."""
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0:
        raise InsufficientPositives("no positive scores")
    if neg.size == 0:
        raise InsufficientNegatives("no negative scores")
    thresholds = np.unique(neg)
    fa = (neg.size - np.searchsorted(neg, thresholds, side="right")) / neg_hours
    frr = 100.0 * np.searchsorted(pos, thresholds, side="right") / pos.size
    return [(float(a), float(r)) for a, r in zip(fa, frr)]


def evaluate_scores(pos_scores: Sequence[float], neg_scores: Sequence[float], neg_hours: float,
                    target_fa_per_hour: float = TARGET_FA_PER_HOUR) -> EvalReport:
    theta = select_threshold(neg_scores, neg_hours, target_fa_per_hour)
    return EvalReport(
        threshold=theta,
        frr_percent=frr_at_threshold(pos_scores, theta),
        fa_per_hour=fa_per_hour_at(neg_scores, theta, neg_hours),
        det_points=det_curve(pos_scores, neg_scores, neg_hours),
        n_pos=len(pos_scores),
        n_neg=len(neg_scores),
        neg_hours=neg_hours,
        target_fa_per_hour=target_fa_per_hour,
    )
