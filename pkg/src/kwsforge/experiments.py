"""Desk-scale data pools, sweep runner (mix -> train -> eval) and result tables."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import multiprocessing
import statistics
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio import NEGATIVE, POSITIVE
from .datamix import REAL, TTS, Manifest, MixSpec, axis_value, pools_from_manifest, sample_mixture
from .errors import EmptyResults
from .evaluator import TARGET_FA_PER_HOUR, EvalReport, evaluate_scores, score_many
from .frontend import compute_features_batch
from .svdf import KwsModel, ModelConfig
from .textgen import Keyword, desk_corpus, generate
from .trainer import AudioCache, TrainConfig, train
from .tts_oracle import REAL_MODE, TTS_MODE, manifest_entry, speaker_params, synth, write_utterance

log = logging.getLogger(__name__)

RESULT_FIELDS = ["axis", "axis_value", "frr_percent", "fa_per_hour", "threshold", "n_real_pos",
                 "n_speakers", "utts_per_speaker", "seed", "status", "error"]
OK = "ok"
FAILED = "failed"


@dataclasses.dataclass
class DeskPoolConfig:
    """Sizes of the oracle pools. Real-mode positives are grouped per speaker."""

    keyword: str = "Hey Google"
    tts_pos: int = 8000
    tts_neg: int = 6000
    tts_voices: int = 50
    real_pos_speakers: int = 500
    real_pos_per_speaker: int = 4
    real_neg: int = 6000
    real_neg_speakers: int = 600
    eval_pos: int = 1000
    eval_neg: int = 2000
    eval_speakers: int = 200
    corpus_lines: int = 5000
    n_units: int = 16
    seed: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DeskPoolConfig":
        return cls(**d)


# name -> (label, source, oracle mode, corpus)
_POOLS = OrderedDict([
    ("tts_pos", (POSITIVE, TTS, TTS_MODE, "train")),
    ("tts_neg", (NEGATIVE, TTS, TTS_MODE, "train")),
    ("real_pos", (POSITIVE, REAL, REAL_MODE, "train")),
    ("real_neg", (NEGATIVE, REAL, REAL_MODE, "train")),
    ("eval_pos", (POSITIVE, REAL, REAL_MODE, "eval")),
    ("eval_neg", (NEGATIVE, REAL, REAL_MODE, "eval")),
])


def _pool_layout(cfg: DeskPoolConfig, name: str) -> Tuple[int, List[str]]:
    """Utterance count and per-utterance speaker ids for one pool."""
    if name in ("tts_pos", "tts_neg"):
        n = getattr(cfg, name)
        return n, [f"tts{i % cfg.tts_voices:03d}" for i in range(n)]
    if name == "real_pos":
        n = cfg.real_pos_speakers * cfg.real_pos_per_speaker
        return n, [f"spk{i // cfg.real_pos_per_speaker:04d}" for i in range(n)]
    if name == "real_neg":
        return cfg.real_neg, [f"neg{i % cfg.real_neg_speakers:04d}" for i in range(cfg.real_neg)]
    n = getattr(cfg, name)
    return n, [f"eval{i % cfg.eval_speakers:04d}" for i in range(n)]


def render_pool(cfg: DeskPoolConfig, name: str, cache: Optional[AudioCache] = None,
                out_dir=None) -> Manifest:
    """Synthesize one named pool.

    With ``out_dir`` WAV and alignment files are written; otherwise clips are
    only registered in ``cache`` and entries carry ``wav_path: null``.
    """
    label, source, mode, corpus_name = _POOLS[name]
    n, speakers = _pool_layout(cfg, name)
    kw = Keyword.parse(cfg.keyword)
    corpus_seed = cfg.seed if corpus_name == "train" else cfg.seed + 7919
    corpus = desk_corpus(cfg.corpus_lines, seed=corpus_seed)
    rng = np.random.default_rng([cfg.seed, list(_POOLS).index(name)])
    prompts = list(generate(kw, corpus, n, label, rng))
    out = Manifest()
    for i, (prompt, spk) in enumerate(zip(prompts, speakers)):
        clip = synth(prompt, speaker_params(spk), seed=i, mode=mode, n_units=cfg.n_units).clip
        utt_id = f"{name}_{i:06d}"
        if out_dir is not None:
            entry = write_utterance(clip, Path(out_dir) / name, utt_id, source)
        else:
            entry = manifest_entry(clip, utt_id, source)
        if cache is not None:
            cache.put(entry, clip)
        out.append(entry)
    return out


def build_desk_pools(cfg: DeskPoolConfig, cache: Optional[AudioCache] = None,
                     out_dir=None) -> Tuple[Manifest, Manifest, Manifest]:
    """Training pool manifest plus held-out (positive, negative) eval manifests."""
    rendered = {name: render_pool(cfg, name, cache, out_dir) for name in _POOLS}
    train_pool = Manifest.concat(rendered[n] for n in ("tts_pos", "tts_neg", "real_pos", "real_neg"))
    return train_pool.validate(), rendered["eval_pos"], rendered["eval_neg"]


# --------------------------------------------------------------------------
# evaluation data


@dataclasses.dataclass
class EvalSet:
    pos_features: List[np.ndarray]
    neg_features: List[np.ndarray]
    neg_hours: float


def load_eval_set(pos_manifest: Sequence[dict], neg_manifest: Sequence[dict],
                  cache: Optional[AudioCache] = None, chunk: int = 256) -> EvalSet:
    cache = cache if cache is not None else AudioCache()

    def feats(manifest):
        out = []
        for start in range(0, len(manifest), chunk):
            clips = [cache.load(e) for e in manifest[start:start + chunk]]
            out.extend(compute_features_batch([c.samples for c in clips]))
        return out

    neg_hours = sum(float(e["duration_ms"]) for e in neg_manifest) / 3.6e6
    return EvalSet(feats(pos_manifest), feats(neg_manifest), neg_hours)


def evaluate_model(model: KwsModel, eval_set: EvalSet, target_fa_per_hour: float = TARGET_FA_PER_HOUR,
                   streaming: bool = False) -> EvalReport:
    pos = score_many(model, eval_set.pos_features, streaming=streaming)
    neg = score_many(model, eval_set.neg_features, streaming=streaming)
    return evaluate_scores(pos, neg, eval_set.neg_hours, target_fa_per_hour)


def as_saved(model: KwsModel) -> KwsModel:
    """The model as it reads back from a checkpoint (tensors stored as float32)."""
    out = model.copy()
    for p in out.params:
        for k in p:
            p[k] = p[k].astype(np.float32).astype(np.float64)
    return out


# --------------------------------------------------------------------------
# sweeps


def _fmt(x: float) -> str:
    return repr(float(x))


def run_grid_point(index: int, spec: MixSpec, axis: str, pools: Dict, eval_set: EvalSet,
                   model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
                   cache: Optional[AudioCache] = None,
                   target_fa_per_hour: float = TARGET_FA_PER_HOUR) -> dict:
    """mix -> train -> eval for one MixSpec. Failures produce a row with status=failed."""
    row = {
        "axis": axis,
        "axis_value": axis_value(spec, axis),
        "frr_percent": "",
        "fa_per_hour": "",
        "threshold": "",
        "n_real_pos": spec.real_pos_total,
        "n_speakers": "" if spec.n_speakers is None else spec.n_speakers,
        "utts_per_speaker": "" if spec.utts_per_speaker is None else spec.utts_per_speaker,
        "seed": spec.seed,
        "status": OK,
        "error": "",
    }
    run_dir = Path(out_dir) / f"run_{index:03d}" if out_dir is not None else None
    try:
        mixture = sample_mixture(pools, spec)
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            mixture.write(run_dir / "manifest.jsonl")
            (run_dir / "mix_spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
        cfg = dataclasses.replace(train_cfg, seed=spec.seed)
        model, train_log = train(model_cfg, mixture, cfg, out_dir=run_dir, cache=cache)
        log.info("run %d trained in %.1f s", index, train_log.wall_clock_s)
        report = evaluate_model(as_saved(model), eval_set, target_fa_per_hour)
        if run_dir is not None:
            report.write(run_dir / "report.json")
            report.write_det_csv(run_dir / "det.csv")
        row.update(frr_percent=_fmt(report.frr_percent), fa_per_hour=_fmt(report.fa_per_hour),
                   threshold=_fmt(report.threshold))
    except Exception as exc:  # a failed grid point must not stop the sweep
        log.warning("run %d failed: %s", index, exc)
        row.update(status=FAILED, error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(specs: Sequence[MixSpec], axis: str, pool_manifest: Sequence[dict], eval_set: EvalSet,
              model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
              cache: Optional[AudioCache] = None, parallel: int = 1,
              target_fa_per_hour: float = TARGET_FA_PER_HOUR) -> List[dict]:
    """Run every grid point; rows come back in grid order and go to ``results.csv``."""
    cache = cache if cache is not None else AudioCache()
    pools = pools_from_manifest(pool_manifest)
    args = [(i, spec, axis, pools, eval_set, model_cfg, train_cfg, out_dir, cache, target_fa_per_hour)
            for i, spec in enumerate(specs)]
    if parallel > 1 and len(specs) > 1:
        # fork so that workers inherit the decoded audio cache
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(parallel, mp_context=ctx) as ex:
            rows = list(ex.map(_run_packed, args))
    else:
        rows = [run_grid_point(*a) for a in args]
    if out_dir is not None:
        write_results(rows, Path(out_dir) / "results.csv")
    return rows


def _run_packed(args):
    return run_grid_point(*args)


def write_results(rows: Sequence[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_results(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _sort_key(row: dict):
    return (str(row.get("axis", "")), float(row["axis_value"]), int(row["seed"]))


def _row_label(axis: str, value: str, n_real: str) -> str:
    if axis == "n_speakers":
        return f"TTS + {value} speakers ({n_real} utts)"
    if axis == "utts_per_speaker":
        return f"TTS + {value} utts/speaker ({n_real} utts)"
    return f"TTS + {value} real positives"


def emit_report(rows: Sequence[dict], csv_path=None) -> str:
    """Sort rows by axis value, optionally write them as CSV, return a text table.

    The table has one line per (axis, axis value) with the median FRR over
    successful runs and the per-seed values; failed runs appear only in the CSV.
    """
    if not rows:
        raise EmptyResults("no result rows to report")
    rows = sorted(rows, key=_sort_key)
    if csv_path is not None:
        write_results(rows, csv_path)
    groups: Dict[Tuple[str, str], List[dict]] = OrderedDict()
    for row in rows:
        if row.get("status", OK) == OK:
            groups.setdefault((str(row["axis"]), str(row["axis_value"])), []).append(row)
    out = io.StringIO()
    out.write(f"{'configuration':<40} {'runs':>4} {'median FRR':>11}  per-seed FRR\n")
    for (axis, value), grp in groups.items():
        frrs = [float(r["frr_percent"]) for r in grp]
        seeds = ", ".join(f"s{r['seed']}={float(r['frr_percent']):.2f}%" for r in grp)
        label = _row_label(axis, value, str(grp[0]["n_real_pos"]))
        out.write(f"{label:<40} {len(grp):>4} {statistics.median(frrs):>10.2f}%  {seeds}\n")
    n_failed = sum(1 for r in rows if r.get("status", OK) != OK)
    if n_failed:
        out.write(f"({n_failed} failed run(s) omitted; see CSV)\n")
    return out.getvalue()


def median_frr_by_value(rows: Sequence[dict]) -> "OrderedDict[float, float]":
    """axis value -> median FRR over successful runs, ascending by value."""
    by_value: Dict[float, List[float]] = {}
    for r in rows:
        if r.get("status", OK) == OK:
            by_value.setdefault(float(r["axis_value"]), []).append(float(r["frr_percent"]))
    return OrderedDict((v, statistics.median(by_value[v])) for v in sorted(by_value))

