"""Command line entry point: gen-prompts, synth, mix, train, eval, sweep, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``KWSFORGE_SEED``
supplies the seed when ``--seed`` is not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .audio import NEGATIVE, POSITIVE
from .datamix import AXES, Manifest, MixSpec, pools_from_manifest, sample_mixture, sweep_grid
from .errors import KwsError
from .evaluator import TARGET_FA_PER_HOUR
from .experiments import (DeskPoolConfig, build_desk_pools, emit_report, evaluate_model, load_eval_set,
                          read_results, run_sweep)
from .svdf import ModelConfig, desk_config, load_checkpoint, paper_config
from .textgen import Keyword, PromptSpec, desk_corpus, generate, iter_jsonl_prompts, read_corpus
from .trainer import AudioCache, TrainConfig, train
from .tts_oracle import MODES, import_external, render_prompts, write_utterance

log = logging.getLogger("kwsforge")

PRESETS = {"desk": desk_config, "paper": paper_config}


def resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("KWSFORGE_SEED")
    return int(env) if env not in (None, "") else 0


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _model_config(args) -> ModelConfig:
    if args.model_config:
        return ModelConfig.from_dict(_read_json(args.model_config))
    return PRESETS[args.preset]()


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.read(args.train_config) if args.train_config else TrainConfig()
    if args.seed is not None or os.environ.get("KWSFORGE_SEED"):
        cfg.seed = resolve_seed(args.seed)
    return cfg


def _read_manifests(paths: List[str]) -> Manifest:
    return Manifest.concat(Manifest.read(p) for p in paths)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_prompts(args) -> int:
    kw = Keyword.parse(args.keyword)
    corpus = read_corpus(args.corpus) if args.corpus else desk_corpus(args.desk_corpus, seed=resolve_seed(args.seed))
    rng = np.random.default_rng(resolve_seed(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for prompt in generate(kw, corpus, args.count, args.label, rng):
            f.write(json.dumps(prompt.to_json(), sort_keys=True) + "\n")
    print(f"wrote {args.count} {args.label} prompts to {out}")
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    if args.desk_pools is not None:
        cfg = DeskPoolConfig.from_json(_read_json(args.desk_pools)) if args.desk_pools else DeskPoolConfig()
        if args.seed is not None or os.environ.get("KWSFORGE_SEED"):
            cfg.seed = resolve_seed(args.seed)
        train_pool, eval_pos, eval_neg = build_desk_pools(cfg, out_dir=out_dir)
        train_pool.write(out_dir / "pool.jsonl")
        eval_pos.write(out_dir / "eval_pos.jsonl")
        eval_neg.write(out_dir / "eval_neg.jsonl")
        (out_dir / "pool_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        print(f"wrote {len(train_pool)} pool and {len(eval_pos) + len(eval_neg)} eval utterances to {out_dir}")
        return 0
    if args.import_dir:
        entries = Manifest()
        for wav in sorted(Path(args.import_dir).glob("*.wav")):
            align = wav.with_suffix(".json")
            clip = import_external(wav, align if align.exists() else None, label=args.label,
                                   speaker_id=args.speaker)
            entries.append(write_utterance(clip, out_dir, wav.stem, args.source or "tts"))
    else:
        if not args.prompts:
            raise KwsError("synth needs --prompts, --import-dir or --desk-pools")
        with open(args.prompts, encoding="utf-8") as f:
            prompts: List[PromptSpec] = list(iter_jsonl_prompts(f))
        speakers = [f"{args.speaker_prefix}{i % args.speakers:04d}" for i in range(len(prompts))]
        source = args.source or ("real" if args.mode == "real" else "tts")
        entries = Manifest(render_prompts(prompts, speakers, out_dir, source, MODES[args.mode],
                                          seed=resolve_seed(args.seed), utt_prefix=args.utt_prefix))
    manifest_path = Path(args.manifest) if args.manifest else out_dir / "manifest.jsonl"
    entries.validate().write(manifest_path)
    print(f"wrote {len(entries)} utterances; manifest {manifest_path}")
    return 0


def cmd_mix(args) -> int:
    pools = pools_from_manifest(_read_manifests(args.pools))
    spec = MixSpec.read(args.spec)
    if args.seed is not None or os.environ.get("KWSFORGE_SEED"):
        spec.seed = resolve_seed(args.seed)
    mixture = sample_mixture(pools, spec)
    mixture.write(args.out)
    print(f"wrote {len(mixture)} entries to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg = _model_config(args)
    manifest = Manifest.read(args.manifest).validate()
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model_config.json").write_text(json.dumps(model_cfg.to_dict(), indent=2, sort_keys=True))
    (out / "train_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    _, train_log = train(model_cfg, manifest, cfg, out_dir=out)
    final = train_log.steps[-1]["loss"] if train_log.steps else float("nan")
    print(f"trained {cfg.steps} steps in {train_log.wall_clock_s:.1f} s; final loss {final:.4f}; "
          f"checkpoint {train_log.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    eval_set = load_eval_set(Manifest.read(args.pos_manifest), Manifest.read(args.neg_manifest))
    report = evaluate_model(model, eval_set, args.target_fa, streaming=not args.batch_scoring)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    report.write_det_csv(args.det_csv or out.with_suffix(".det.csv"))
    print(f"FRR {report.frr_percent:.2f}% at {report.fa_per_hour:.3f} FA/hr "
          f"(target {args.target_fa}, threshold {report.threshold:.4f})")
    return 0


def cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",") if v.strip()]
    base = MixSpec.read(args.base)
    if args.seed is not None or os.environ.get("KWSFORGE_SEED"):
        base.seed = resolve_seed(args.seed)
    specs = sweep_grid(base, args.axis, values)
    cache = AudioCache()
    pool = _read_manifests(args.pools).validate()
    eval_set = load_eval_set(Manifest.read(args.eval_pos), Manifest.read(args.eval_neg), cache)
    rows = run_sweep(specs, args.axis, pool, eval_set, _model_config(args), _train_config(args),
                     out_dir=args.out, cache=cache, parallel=args.parallel, target_fa_per_hour=args.target_fa)
    print(emit_report(rows), end="")
    return 0 if any(r["status"] == "ok" for r in rows) else 1


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        rows.extend(read_results(path))
    print(emit_report(rows, csv_path=args.out), end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_model_args(p):
    p.add_argument("--model-config", help="model config JSON (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--train-config", help="training config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwsforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-prompts", help="generate positive or negative TTS prompts")
    p.add_argument("--keyword", default="Hey Google", help="prefix and key name, e.g. 'Hey Google'")
    p.add_argument("--corpus", help="text corpus, one query per line (default: built-in)")
    p.add_argument("--desk-corpus", type=int, default=5000, help="lines of built-in corpus when --corpus is absent")
    p.add_argument("--label", choices=[POSITIVE, NEGATIVE], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output JSON-lines file")
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("synth", help="render prompts with the oracle synthesizer or import audio")
    p.add_argument("--prompts", help="prompt JSON-lines file")
    p.add_argument("--import-dir", help="directory of external .wav (+ .json alignment) files to import")
    p.add_argument("--desk-pools", nargs="?", const="", default=None, metavar="CONFIG",
                   help="render the full desk-scale pool set (optional pool config JSON)")
    p.add_argument("--mode", choices=sorted(MODES), default="tts")
    p.add_argument("--speakers", type=int, default=50, help="number of voices to cycle through")
    p.add_argument("--speaker-prefix", default="spk")
    p.add_argument("--speaker", help="speaker id for imported audio")
    p.add_argument("--label", choices=[POSITIVE, NEGATIVE], help="label for imported audio")
    p.add_argument("--source", choices=["tts", "real"], help="manifest source tag")
    p.add_argument("--utt-prefix", default="utt")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="manifest path (default: OUT_DIR/manifest.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mix", help="sample a training mixture from pools")
    p.add_argument("--pools", nargs="+", required=True, help="pool manifest(s)")
    p.add_argument("--spec", required=True, help="MixSpec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_model_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="FRR at a fixed FA/hr and DET points")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--pos-manifest", required=True)
    p.add_argument("--neg-manifest", required=True)
    p.add_argument("--target-fa", type=float, default=TARGET_FA_PER_HOUR)
    p.add_argument("--batch-scoring", action="store_true", help="score whole utterances instead of streaming")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--det-csv", help="DET CSV path (default: next to the report)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="mix -> train -> eval over a grid of one axis")
    _add_model_args(p)
    p.add_argument("--pools", nargs="+", required=True)
    p.add_argument("--base", required=True, help="base MixSpec JSON")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated increasing values")
    p.add_argument("--eval-pos", required=True)
    p.add_argument("--eval-neg", required=True)
    p.add_argument("--target-fa", type=float, default=TARGET_FA_PER_HOUR)
    p.add_argument("--parallel", type=int, default=1, help="grid points to run concurrently")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory (results.csv + run_NNN/)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="combine results.csv files into one table")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", help="combined CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (KwsError, OSError, ValueError, KeyError) as exc:
        print(f"kwsforge {args.command}: {exc}", file=sys.stderr)
        return 1


run_subcommand = main


def entry() -> None:
    sys.exit(main())
