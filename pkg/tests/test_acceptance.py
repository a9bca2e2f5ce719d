"""Acceptance criteria 1-12.

Each test records a one-line PASS/FAIL verdict; the lines are printed at the
end of the pytest run (see conftest.py) and immediately with ``-s``. The
desk-scale training criteria (8, 9, 10, 12) share one set of rendered pools
and take most of the suite's runtime.
"""

import collections
import dataclasses
import functools
import math
import time

import numpy as np
import pytest

from kwsforge import datamix, evaluator as ev, experiments as E, svdf, textgen, tts_oracle as tts
from kwsforge.audio import NEGATIVE, POSITIVE, SAMPLE_RATE
from kwsforge.frontend import FrameLabels
from kwsforge.objective import LossConfig, ce_frame_loss, combined_loss, max_pool_loss
from kwsforge.textgen import Keyword
from kwsforge.trainer import AudioCache, TrainConfig

from conftest import two_layer_config

VERDICTS = collections.OrderedDict()

# desk experiment budget shared by criteria 8-10 and 12
DESK_TRAIN = TrainConfig(steps=2000, batch_size=32, learning_rate=2e-3, lr_schedule="cosine")
DESK_POOLS = E.DeskPoolConfig(real_pos_per_speaker=10)
MIX_C8 = datamix.MixSpec(tts_pos=4000, tts_neg=4000, real_neg=6000, n_speakers=500, utts_per_speaker=4, seed=0)
SWEEP_BASES = (0, 100, 200)
SWEEP_VALUES = (1, 10, 100)


def criterion(n):
    """Record PASS/FAIL for criterion ``n`` from the test's outcome and detail string."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            started = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                VERDICTS[n] = f"criterion {n:>2}: FAIL  {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                print(VERDICTS[n])
                raise
            VERDICTS[n] = f"criterion {n:>2}: PASS  {detail} [{time.perf_counter() - started:.1f} s]"
            print(VERDICTS[n])
        return run
    return wrap


def check(ok, msg):
    assert ok, msg
    return msg


# ---- 1-7, 11: properties ---------------------------------------------------

@criterion(1)
def test_c01_streaming_equivalence():
    rng = np.random.default_rng(1)
    started = time.perf_counter()
    worst = 0.0
    for i in range(100):
        hidden, memory = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        cfg = svdf.ModelConfig.encoder_decoder(hidden=hidden, memory=memory, bottleneck=int(rng.integers(2, 6)),
                                               n_units=int(rng.integers(2, 8)))
        model = svdf.init_model(cfg, rng)
        x = rng.normal(size=(int(rng.integers(2, 201)), 120))
        worst = max(worst, float(np.max(np.abs(svdf.forward_streaming(model, x) - svdf.forward_batch(model, x)))))
    elapsed = time.perf_counter() - started
    assert worst < 1e-5, f"max abs diff {worst:.3g}"
    return check(elapsed < 10.0, f"max abs diff {worst:.2e} over 100 pairs in {elapsed:.1f} s (limit 10 s)")


def _fd_rel_errors(model, x, targets, cfg, eps=1e-4):
    n_enc = model.config.encoder_output_dim

    def loss_and_grad():
        y = svdf.forward_batch(model, x)
        r = combined_loss(y[:, :n_enc], y[:, n_enc:], targets, cfg)
        return r.loss, np.concatenate([r.grad_encoder, r.grad_decoder], axis=1)

    _, upstream = loss_and_grad()
    grads = svdf.backward(model, x, upstream)
    errors = []
    for i, p in enumerate(model.params):
        for name, arr in p.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = loss_and_grad()[0]
                arr[idx] = old - eps
                fm = loss_and_grad()[0]
                arr[idx] = old
                num, ana = (fp - fm) / (2 * eps), grads[i][name][idx]
                scale = max(abs(num), abs(ana))
                errors.append(0.0 if scale < 1e-10 else abs(num - ana) / scale)
    return np.array(errors)


@criterion(2)
def test_c02_gradient_correctness():
    rng = np.random.default_rng(2)
    cfg = two_layer_config()
    assert svdf.param_count(cfg) <= 500
    model = svdf.init_model(cfg, rng)
    x = rng.normal(size=(24, 120))
    worst = 0.0
    n_checked = 0
    for positive in (True, False):
        units = rng.integers(0, 2, 24)
        keyword = np.zeros(24, dtype=np.int64)
        if positive:
            keyword[15:20] = 1
            tg = FrameLabels(units, keyword, 15, POSITIVE, keyword_unit=1)
        else:
            tg = FrameLabels(np.zeros(24, dtype=np.int64), keyword, None, NEGATIVE, keyword_unit=1)
        err = _fd_rel_errors(model, x, tg, LossConfig(alpha=0.9))
        worst = max(worst, float(err.max()))
        n_checked += err.size
    return check(worst < 1e-4, f"{svdf.param_count(cfg)} params x 2 labels, max relative error {worst:.2e} (limit 1e-4)")


def _random_heads(rng, positive, t_len=30, n_units=6):
    enc = rng.normal(size=(t_len, n_units)) * 3
    dec = rng.normal(size=(t_len, 2)) * 3
    if positive:
        omega = int(rng.integers(t_len))
        keyword = np.zeros(t_len, dtype=np.int64)
        keyword[omega:omega + 5] = 1
        tg = FrameLabels(rng.integers(0, n_units, t_len), keyword, omega, POSITIVE,
                         keyword_unit=int(rng.integers(1, n_units)))
    else:
        tg = FrameLabels(np.zeros(t_len, dtype=np.int64), np.zeros(t_len, dtype=np.int64), None, NEGATIVE,
                         keyword_unit=1)
    return enc, dec, tg


@criterion(3)
def test_c03_alpha_endpoints_and_linearity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(10):
        enc, dec, tg = _random_heads(rng, positive=trial % 2 == 0)
        at = lambda a: combined_loss(enc, dec, tg, LossConfig(alpha=a))  # noqa: E731
        ce = ce_frame_loss(enc, tg.units)[0] + ce_frame_loss(dec, tg.keyword)[0]
        mp = max_pool_loss(enc, tg, 10, keyword_class=tg.keyword_unit)[0] + max_pool_loss(dec, tg, 10)[0]
        worst = max(worst, abs(at(0.0).loss - ce), abs(at(1.0).loss - mp))
        alpha = float(rng.uniform())
        worst = max(worst, abs(at(alpha).loss - ((1 - alpha) * at(0.0).loss + alpha * at(1.0).loss)))
    return check(worst <= 1e-12, f"endpoint and interpolation residual {worst:.1e} over 10 random alpha (limit 1e-12)")


@criterion(4)
def test_c04_max_pool_oracle():
    rng = np.random.default_rng(4)
    for trial in range(50):
        positive = trial % 2 == 0
        t_len = int(rng.integers(1, 60))
        logits = rng.normal(size=(t_len, 2)) * 4
        if positive:
            omega = int(rng.integers(t_len))
            tg = FrameLabels(np.zeros(t_len, int), np.zeros(t_len, int), omega, POSITIVE)
            frames = range(max(0, omega - 9), omega + 1)
        else:
            tg = FrameLabels(np.zeros(t_len, int), np.zeros(t_len, int), None, NEGATIVE)
            frames = range(t_len)
        best = max(frames, key=lambda t: (logits[t, 1], -t))
        row = logits[best]
        m = max(row)
        target = 1 if positive else 0
        brute = m + math.log(sum(math.exp(v - m) for v in row)) - row[target]
        loss = max_pool_loss(logits, tg, 10)[0]
        assert loss == ce_frame_loss(logits[best:best + 1], [target])[0], trial
        assert abs(loss - brute) < 1e-12, trial
    return "50 sequences equal the frame-scan cross-entropy exactly"


@criterion(5)
def test_c05_metric_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pos = list(np.round(rng.uniform(size=int(rng.integers(1, 1001))), 2))
        neg = list(np.round(rng.uniform(size=int(rng.integers(1, 1001))), 2))
        hours = float(rng.uniform(0.1, 20.0))
        candidates = sorted(set(neg)) + [math.inf]
        theta = next(t for t in candidates if sum(s > t for s in neg) / hours <= 0.133)
        assert ev.select_threshold(neg, hours) == theta
        assert ev.frr_at_threshold(pos, theta) == 100.0 * sum(s <= theta for s in pos) / len(pos)
        det = [(sum(s > t for s in neg) / hours, 100.0 * sum(s <= t for s in pos) / len(pos)) for t in sorted(set(neg))]
        assert ev.det_curve(pos, neg, hours) == det
    assert ev.TARGET_FA_PER_HOUR == 0.133
    assert ev.evaluate_scores([0.5], [0.4], 1.0).target_fa_per_hour == 0.133
    return "20 score sets match exhaustive enumeration; default target 0.133 FA/hr"


@criterion(6)
def test_c06_text_generator_safety():
    kw = Keyword("Hey", "Google")
    rng = np.random.default_rng(6)
    corpus = textgen.desk_corpus(4000, seed=6)
    salted = ["hey google " + corpus[0], "HEY, Google!", "so (hey) google?", "call hey   GOOGLE now"]
    for j, i in enumerate(rng.choice(len(corpus), size=len(corpus) // 20, replace=False)):
        corpus[i] = salted[j % len(salted)]
    negs = list(textgen.generate(kw, corpus, 10_000, NEGATIVE, rng))
    pos = list(textgen.generate(kw, corpus, 10_000, POSITIVE, rng))
    leaks = sum(textgen.contains_keyword(p.text, kw) for p in negs)
    misses = sum(not textgen.contains_keyword(p.text, kw) for p in pos)
    counts = collections.Counter(p.template_id for p in pos)
    spread = max(abs(counts[t] - 2000) / 2000 for t in range(1, 6))
    assert leaks == 0 and misses == 0, (leaks, misses)
    return check(spread <= 0.10, f"0 leaks in 10k negatives, 0 misses in 10k positives, template spread {spread:.1%}")


def _pitch(x):
    x = x - x.mean()
    r = np.correlate(x, x, mode="full")[len(x) - 1:]
    lo, hi = SAMPLE_RATE // 450, SAMPLE_RATE // 70
    seg = r[lo:hi]
    for i in range(1, len(seg) - 1):
        if seg[i] >= 0.9 * seg.max() and seg[i] >= seg[i - 1] and seg[i] >= seg[i + 1]:
            return SAMPLE_RATE / (lo + i)
    return SAMPLE_RATE / (lo + int(np.argmax(seg)))


@criterion(7)
def test_c07_prosody_effects():
    def render(text, spk, seed):
        p = textgen.PromptSpec(text, NEGATIVE, textgen.NEGATIVE_TEMPLATE_ID, text)
        return tts.synth(p, tts.speaker_params(spk), seed=seed).clip

    def span(x):
        idx = np.flatnonzero(np.abs(x) > 1e-6)
        return idx[0], idx[-1] + 1

    dur, peak, pause, rise = [], [], [], []
    w = int(0.04 * SAMPLE_RATE)
    for k in range(20):
        spk, seed = f"prosody{k}", k
        plain = render("Google", spk, seed).samples
        s0, e0 = span(plain)
        s1, e1 = span(render("(Google)", spk, seed).samples)
        dur.append((e1 - s1) / (e0 - s0))
        peak.append(np.max(np.abs(render("Google!", spk, seed).samples)) / np.max(np.abs(plain)))
        clip = render("Google: now", spk, seed)
        n = len(tts.word_units("google"))
        gap = clip.samples[clip.unit_alignment[n - 1][2]:clip.unit_alignment[n][1]]
        assert np.max(np.abs(gap)) < 1e-6
        pause.append(1000.0 * len(gap) / SAMPLE_RATE)
        q = render("Google?", spk, seed).samples
        s, e = span(q)
        rise.append(_pitch(q[e - 200 - w:e - 200]) / _pitch(q[s + 200:s + 200 + w]))
    assert min(dur) >= 1.4, min(dur)
    assert 1.8 <= min(peak) and max(peak) <= 2.2, (min(peak), max(peak))
    assert min(pause) >= 140.0, min(pause)
    assert min(rise) >= 1.1, min(rise)
    return (f"20 voices: duration ratio >= {min(dur):.2f}, peak ratio in [{min(peak):.2f}, {max(peak):.2f}], "
            f"pause >= {min(pause):.0f} ms, pitch rise >= {min(rise):.2f}x")


@criterion(11)
def test_c11_paper_scale_budget():
    n = svdf.param_count(svdf.paper_config())
    return check(288_000 <= n <= 352_000, f"paper-scale config has {n} parameters (range 288k-352k)")


# ---- 8-10, 12: desk-scale training -------------------------------------------

@pytest.fixture(scope="module")
def desk():
    started = time.perf_counter()
    cache = AudioCache()
    pool, eval_pos, eval_neg = E.build_desk_pools(DESK_POOLS, cache)
    eval_set = E.load_eval_set(eval_pos, eval_neg, cache)
    return {"cache": cache, "pool": pool, "eval_pos": eval_pos, "eval_neg": eval_neg, "eval": eval_set,
            "build_s": time.perf_counter() - started}


@pytest.fixture(scope="module")
def c8_runs(desk, tmp_path_factory):
    """Two identical runs of the criterion-8 experiment (the second serves criterion 12)."""
    runs = []
    for name in ("first", "second"):
        out = tmp_path_factory.mktemp(f"c8_{name}")
        started = time.perf_counter()
        rows = E.run_sweep([MIX_C8], "n_speakers", desk["pool"], desk["eval"], svdf.desk_config(), DESK_TRAIN,
                           out_dir=out, cache=desk["cache"])
        runs.append({"rows": rows, "dir": out, "seconds": time.perf_counter() - started})
    return runs


@pytest.fixture(scope="module")
def speaker_sweeps(desk):
    rows = []
    for base_seed in SWEEP_BASES:
        base = dataclasses.replace(MIX_C8, n_speakers=1, utts_per_speaker=10, seed=base_seed)
        rows += E.run_sweep(datamix.sweep_grid(base, "n_speakers", SWEEP_VALUES), "n_speakers", desk["pool"],
                            desk["eval"], svdf.desk_config(), DESK_TRAIN, cache=desk["cache"])
    return rows


@criterion(8)
def test_c08_desk_experiment(desk, c8_runs):
    (row,) = c8_runs[0]["rows"]
    assert row["status"] == "ok", row["error"]
    eval_speakers = {e["speaker_id"] for e in desk["eval_pos"]}
    train_speakers = {e["speaker_id"] for e in datamix.Manifest.read(c8_runs[0]["dir"] / "run_000/manifest.jsonl")}
    assert not eval_speakers & train_speakers
    assert svdf.param_count(svdf.desk_config()) < 40_000
    frr = float(row["frr_percent"])
    return check(frr <= 10.0, f"FRR {frr:.2f}% at {float(row['fa_per_hour']):.3f} FA/hr "
                              f"({DESK_TRAIN.steps} steps, {svdf.param_count(svdf.desk_config())} params, "
                              f"run {c8_runs[0]['seconds']:.0f} s + pools {desk['build_s']:.0f} s on this machine)")


@criterion(12)
def test_c12_reproducibility(c8_runs):
    a, b = c8_runs
    same_ckpt = (a["dir"] / "run_000/model.kwsf").read_bytes() == (b["dir"] / "run_000/model.kwsf").read_bytes()
    same_rows = (a["dir"] / "results.csv").read_bytes() == (b["dir"] / "results.csv").read_bytes()
    assert same_ckpt, "checkpoints differ"
    return check(same_rows, "byte-identical checkpoints and results.csv rows across two runs")


@criterion(9)
def test_c09_speaker_trend(speaker_sweeps):
    failed = [r for r in speaker_sweeps if r["status"] != "ok"]
    assert not failed, failed[0]["error"]
    med = E.median_frr_by_value(speaker_sweeps)
    values = [med[v] for v in SWEEP_VALUES]
    per_seed = {v: [round(float(r["frr_percent"]), 2) for r in speaker_sweeps if int(r["axis_value"]) == v]
                for v in SWEEP_VALUES}
    detail = f"median FRR {dict(zip(SWEEP_VALUES, [round(x, 2) for x in values]))}, per seed {per_seed}"
    assert all(b <= a for a, b in zip(values, values[1:])), "not non-increasing: " + detail
    return check(values[0] - values[-1] >= 2.0, detail)


@criterion(10)
def test_c10_tts_only_vs_mixed(desk, speaker_sweeps):
    mixed = [float(r["frr_percent"]) for r in speaker_sweeps if int(r["axis_value"]) == SWEEP_VALUES[-1]]
    tts_only = []
    for base_seed in SWEEP_BASES:
        # same seed, steps and batch as the paired 100-speaker run; only the real positives are removed
        spec = dataclasses.replace(MIX_C8, n_speakers=None, utts_per_speaker=None, real_pos=0,
                                   seed=base_seed + len(SWEEP_VALUES) - 1)
        (row,) = E.run_sweep([spec], "real_pos_count", desk["pool"], desk["eval"], svdf.desk_config(), DESK_TRAIN,
                             cache=desk["cache"])
        assert row["status"] == "ok", row["error"]
        tts_only.append(float(row["frr_percent"]))
    a, b = float(np.median(tts_only)), float(np.median(mixed))
    return check(a > b, f"median FRR TTS-only {a:.2f}% {[round(x, 2) for x in tts_only]} vs "
                        f"TTS + real {b:.2f}% {[round(x, 2) for x in mixed]}")
