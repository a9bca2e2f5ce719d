import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kwsforge import textgen, tts_oracle as tts
from kwsforge.audio import NEGATIVE, POSITIVE, SAMPLE_RATE
from kwsforge.errors import EmptyPrompt
from kwsforge.textgen import Keyword, PromptSpec

HEY = Keyword("Hey", "Google")
SPK = tts.speaker_params("spk_001")


def prompt(text, label=NEGATIVE, keyword=None):
    return PromptSpec(text, label, textgen.NEGATIVE_TEMPLATE_ID, text, frozenset(), keyword)


def render(text, speaker=SPK, seed=0, mode=tts.TTS_MODE, **kw):
    return tts.synth(prompt(text, **kw), speaker, seed=seed, mode=mode).clip


def voiced_span(x, floor=1e-6):
    idx = np.flatnonzero(np.abs(x) > floor)
    return idx[0], idx[-1] + 1


def autocorr_pitch(x, lo_hz=70.0, hi_hz=450.0):
    """Pitch from the first autocorrelation peak within 90% of the best one."""
    x = x - x.mean()
    r = np.correlate(x, x, mode="full")[len(x) - 1:]
    lo, hi = int(SAMPLE_RATE / hi_hz), int(SAMPLE_RATE / lo_hz)
    seg = r[lo:hi]
    best = seg.max()
    for i in range(1, len(seg) - 1):
        if seg[i] >= 0.9 * best and seg[i] >= seg[i - 1] and seg[i] >= seg[i + 1]:
            return SAMPLE_RATE / (lo + i)
    return SAMPLE_RATE / (lo + int(np.argmax(seg)))


def test_synth_is_deterministic():
    a = render("play some jazz", seed=3)
    b = render("play some jazz", seed=3)
    assert np.array_equal(a.samples, b.samples)
    assert a.unit_alignment == b.unit_alignment
    assert not np.array_equal(a.samples, render("play some jazz", seed=4).samples)


@pytest.mark.parametrize("speaker_id", ["spk_001", "a", "tts007", "spk0420"])
def test_slow_word_duration(speaker_id):
    spk = tts.speaker_params(speaker_id)
    for seed in range(5):
        s0, e0 = voiced_span(render("Google", spk, seed).samples)
        s1, e1 = voiced_span(render("(Google)", spk, seed).samples)
        assert (e1 - s1) / (e0 - s0) >= 1.4


@pytest.mark.parametrize("speaker_id", ["spk_001", "b", "tts003"])
def test_loud_word_peak_ratio(speaker_id):
    spk = tts.speaker_params(speaker_id)
    for seed in range(5):
        plain = np.max(np.abs(render("Google", spk, seed).samples))
        loud = np.max(np.abs(render("Google!", spk, seed).samples))
        assert 1.8 <= loud / plain <= 2.2


def test_pause_after_colon():
    for seed in range(5):
        clip = render("Google: now", seed=seed)
        n_google = len(tts.word_units("google"))
        end_google = clip.unit_alignment[n_google - 1][2]
        start_now = clip.unit_alignment[n_google][1]
        gap = clip.samples[end_google:start_now]
        assert np.max(np.abs(gap), initial=0.0) < 1e-6
        assert (start_now - end_google) / SAMPLE_RATE * 1000.0 >= 140.0
        plain = render("Google now", seed=seed)
        assert plain.unit_alignment[n_google][1] - plain.unit_alignment[n_google - 1][2] < 0.05 * SAMPLE_RATE


@pytest.mark.parametrize("speaker_id", ["spk_001", "c", "tts011", "low", "high"])
def test_rising_pitch(speaker_id):
    spk = tts.speaker_params(speaker_id)
    w = int(0.04 * SAMPLE_RATE)
    for seed in range(3):
        x = render("Google?", spk, seed).samples
        s, e = voiced_span(x)
        head = autocorr_pitch(x[s + 200:s + 200 + w])
        tail = autocorr_pitch(x[e - 200 - w:e - 200])
        assert tail >= 1.1 * head


def test_question_only_changes_the_end():
    a = render("Google", seed=2).samples
    b = render("Google?", seed=2).samples
    assert len(a) == len(b)
    s, e = voiced_span(a)
    first_two_thirds = s + int(0.6 * (e - s))
    assert np.allclose(a[:first_two_thirds], b[:first_two_thirds])


def test_speaker_params():
    assert tts.speaker_params("spk_001") == tts.speaker_params("spk_001")
    pitches = np.array([tts.speaker_params(f"id{i}").base_pitch_hz for i in range(1000)])
    lo, hi = tts.PITCH_RANGE
    assert pitches.min() >= lo and pitches.max() <= hi
    assert pitches.max() - pitches.min() >= 0.8 * (hi - lo)
    for i in range(1000):
        p = tts.speaker_params(f"id{i}")
        assert 0.8 <= p.formant_scale <= 1.25 and 0.8 <= p.speaking_rate <= 1.25
    with pytest.raises(ValueError):
        tts.speaker_params("")


@settings(max_examples=25)
@given(st.lists(st.sampled_from(["hey", "(google)", "play", "jazz!", "now:", "why?", "a", "moon"]),
                min_size=1, max_size=5),
       st.integers(0, 1000), st.sampled_from([tts.TTS_MODE, tts.REAL_MODE]))
def test_alignment_tiles_rendered_words(words, seed, mode):
    clip = render(" ".join(words), seed=seed, mode=mode)
    segs = clip.unit_alignment
    assert all(0 < s < e <= len(clip) for _, s, e in segs)
    assert all(a[2] <= b[1] for a, b in zip(segs, segs[1:]))
    # within a word units are contiguous; outside the alignment the TTS voice is silent
    assert sum(len(tts.word_units(tts.parse_prompt(w)[0].text)) for w in words) == len(segs)
    if mode is tts.TTS_MODE:
        mask = np.zeros(len(clip), bool)
        for _, s, e in segs:
            mask[s:e] = True
        assert np.all(clip.samples[~mask] == 0.0)
        assert np.all(np.abs(clip.samples[mask][::50]) < 1.0)


def test_keyword_end_is_last_keyword_unit():
    rng = np.random.default_rng(0)
    for tid in range(1, 6):
        p = textgen.make_positive(HEY, "what time is it", rng, template_id=tid)
        clip = tts.synth(p, SPK, seed=tid).clip
        n_kw = len(tts.word_units("hey")) + len(tts.word_units("google"))
        kw_segs = clip.unit_alignment[:n_kw]
        assert clip.keyword_end_sample == kw_segs[-1][2]
        assert clip.keyword_start_sample == kw_segs[0][1]
    neg = tts.synth(textgen.make_negative("turn off the lights", HEY), SPK).clip
    assert neg.keyword_end_sample is None and neg.label == NEGATIVE


def test_speaker_separability():
    ids = [f"sep{i}" for i in range(12)]
    profiles = [tts.speaker_params(i) for i in ids]
    w = int(0.05 * SAMPLE_RATE)

    def mean_pitch(spk):
        est = []
        for seed in range(6):
            x = render("moon", spk, seed).samples
            s, e = voiced_span(x)
            mid = (s + e) // 2
            est.append(autocorr_pitch(x[mid - w // 2:mid + w // 2]))
        return float(np.mean(est))

    pitch = {p.speaker_id: mean_pitch(p) for p in profiles}
    checked = 0
    for a in profiles:
        for b in profiles:
            if b.base_pitch_hz - a.base_pitch_hz > 20.0:
                assert pitch[b.speaker_id] > pitch[a.speaker_id]
                checked += 1
    assert checked > 10


def _contains_run(seq, needle):
    n = len(needle)
    return any(seq[i:i + n] == needle for i in range(len(seq) - n + 1))


def test_label_fidelity():
    needle = tts.word_units("hey") + tts.word_units("google")
    rng = np.random.default_rng(1)
    corpus = textgen.desk_corpus(200, seed=1)
    for i, p in enumerate(textgen.generate(HEY, corpus, 40, POSITIVE, rng)):
        clip = tts.synth(p, tts.speaker_params(f"s{i}"), seed=i, mode=tts.REAL_MODE).clip
        assert clip.label == POSITIVE
        assert _contains_run([u for u, _, _ in clip.unit_alignment], needle)
    for i, p in enumerate(textgen.generate(HEY, corpus, 200, NEGATIVE, rng)):
        units = [u for w in tts.parse_prompt(p.text) for u in tts.word_units(w.text)]
        assert not _contains_run(units, needle)


def test_units_avoid_background_id():
    for word in textgen._VOCAB:
        units = tts.word_units(word)
        assert len(units) == (len(word) + 1) // 2
        assert all(1 <= u < tts.DEFAULT_N_UNITS for u in units)


def test_real_mode_differs_from_tts():
    a = render("play jazz", seed=1)
    b = render("play jazz", seed=1, mode=tts.REAL_MODE)
    assert not np.array_equal(a.samples, b.samples)
    s, _ = voiced_span(a.samples)
    assert np.all(a.samples[:s] == 0.0)
    assert np.std(b.samples[:s // 2]) > 0.0  # breath-noise floor


def test_empty_prompt():
    with pytest.raises(EmptyPrompt):
        render("?! ()")


def test_write_and_import_round_trip(tmp_path):
    p = textgen.make_positive(HEY, "play music", np.random.default_rng(0), template_id=3)
    clip = tts.synth(p, SPK, seed=5).clip
    entry = tts.write_utterance(clip, tmp_path / "out", "utt_000001", "tts")
    assert entry["label"] == POSITIVE and entry["source"] == "tts"
    assert entry["keyword_end_ms"] == pytest.approx(1000.0 * clip.keyword_end_sample / SAMPLE_RATE, abs=1e-3)
    back = tts.import_external(entry["wav_path"], entry["alignment_path"])
    assert back.label == POSITIVE and back.speaker_id == "spk_001"
    assert back.keyword_end_sample == clip.keyword_end_sample
    assert back.unit_alignment == clip.unit_alignment
    assert np.max(np.abs(back.samples - clip.samples)) <= 1.0 / 32768.0
