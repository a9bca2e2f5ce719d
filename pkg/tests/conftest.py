import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kwsforge.audio import NEGATIVE, POSITIVE, AudioClip
from kwsforge.svdf import ModelConfig, ProjectionConfig, SvdfLayerConfig

settings.register_profile("kwsforge", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kwsforge")


def tiny_config(n_units=4, hidden=6, memory=3, bottleneck=4):
    """Small encoder/decoder with the full layer pattern, for fast exact checks."""
    return ModelConfig.encoder_decoder(hidden=hidden, memory=memory, bottleneck=bottleneck, n_units=n_units)


def two_layer_config(hidden=3, memory=3, n_units=2):
    # one SVDF layer per head; 120*3 + 3*3 + 3 + ... stays under 500 parameters
    layers = (
        SvdfLayerConfig(n_units, 120, memory, activation="none"),
        SvdfLayerConfig(2, n_units, memory, activation="none"),
    )
    return ModelConfig(layers, split_index=1)


def tone(freq_hz, n, amp=0.5, sr=16000):
    return amp * np.sin(2 * np.pi * freq_hz * np.arange(n) / sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def positive_clip():
    """1 s clip with two aligned keyword units ending at sample 8000."""
    x = tone(440.0, 16000, 0.3)
    return AudioClip(x, label=POSITIVE, speaker_id="s1", keyword_start_sample=4000,
                     keyword_end_sample=8000, unit_alignment=[(3, 4000, 6000), (5, 6000, 8000), (7, 9000, 12000)])


@pytest.fixture
def negative_clip():
    return AudioClip(tone(300.0, 16000, 0.3), label=NEGATIVE, speaker_id="s2")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
