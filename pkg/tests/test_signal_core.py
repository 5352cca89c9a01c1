import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal as sig

from tdbwe.signal_core import (Band, StftConfig, Waveform, band_energy_db, band_split, chunk, decimate_to_8k,
                               detect_bandwidth, istft, low_frequency_replacement, make_wide_down,
                               normalize_amplitude, read_wav, stft, upsample_linear_to_16k,
                               write_wav)
from tdbwe.quality_metrics import lsd
from tdbwe.toy_corpus import make_corpus

FS = 16000


def tone(freq, seconds=1.0, fs=FS, amp=0.5):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture(scope="module")
def speech():
    return [u.waveform for u in make_corpus(3, 2, 2.0, seed=7)]


def test_normalize_examples():
    out = normalize_amplitude(Waveform(np.array([0.5, -0.25])))
    np.testing.assert_array_equal(out.samples, [1.0, -0.5])
    zero = Waveform(np.zeros(10))
    np.testing.assert_array_equal(normalize_amplitude(zero).samples, np.zeros(10))
    with pytest.raises(ValueError):
        normalize_amplitude(Waveform(np.zeros(0)))


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=64))
def test_normalize_matches_peak_division(values):
    x = np.array(values)
    peak = np.max(np.abs(x))
    out = normalize_amplitude(Waveform(x, band="wide"))
    assert out.band == Band.WIDE
    if peak == 0:
        np.testing.assert_array_equal(out.samples, x)
    else:
        np.testing.assert_allclose(out.samples, x / peak)
        assert np.max(np.abs(out.samples)) == pytest.approx(1.0)


def test_waveform_rejects_rate():
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 44100)


def test_decimate_length_and_rate():
    out = decimate_to_8k(Waveform(np.zeros(16000)))
    assert out.sample_rate == 8000 and len(out) == 8000
    assert len(decimate_to_8k(Waveform(np.zeros(16001)))) == 8001
    with pytest.raises(ValueError):
        decimate_to_8k(Waveform(np.zeros(800), 8000))


def test_decimate_passes_1k_tone():
    out = decimate_to_8k(Waveform(tone(1000))).samples
    t = np.arange(len(out)) / 8000
    inner = slice(200, -200)
    # least-squares sinusoid fit at 1 kHz
    basis = np.stack([np.sin(2 * np.pi * 1000 * t), np.cos(2 * np.pi * 1000 * t)], 1)[inner]
    coef, *_ = np.linalg.lstsq(basis, out[inner], rcond=None)
    assert np.hypot(*coef) == pytest.approx(0.5, rel=0.01)


def test_decimate_suppresses_6k_tone():
    x = tone(6000)
    out = decimate_to_8k(Waveform(x)).samples
    ratio = 10 * np.log10(np.mean(out[100:-100] ** 2) / np.mean(x ** 2))
    assert ratio <= -40


def test_upsample_examples():
    out = upsample_linear_to_16k(Waveform(np.array([0.0, 1.0]), 8000))
    np.testing.assert_array_equal(out.samples, [0, 0.5, 1, 1.0])
    const = upsample_linear_to_16k(Waveform(np.full(9, 0.3), 8000))
    np.testing.assert_allclose(const.samples, 0.3)
    ramp = upsample_linear_to_16k(Waveform(np.arange(8.0), 8000)).samples
    np.testing.assert_allclose(ramp[:-1], np.arange(15) / 2)
    with pytest.raises(ValueError):
        upsample_linear_to_16k(Waveform(np.zeros(4)))


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=50))
def test_upsample_structure(values):
    x = np.array(values)
    y = upsample_linear_to_16k(Waveform(x, 8000)).samples
    np.testing.assert_array_equal(y[0::2], x)
    np.testing.assert_allclose(y[1:-1:2], (x[:-1] + x[1:]) / 2)


def test_make_wide_down_examples(speech):
    for w in speech:
        wd = make_wide_down(w)
        assert wd.band == Band.WIDE_DOWN and len(wd) == len(w)
        assert band_energy_db(wd.samples, 4000, 8001) <= -30
        assert detect_bandwidth(wd) == Band.NARROW
    dc = make_wide_down(Waveform(np.full(16000, 0.25)))
    np.testing.assert_allclose(dc.samples[200:-200], 0.25, atol=1e-3)
    assert len(make_wide_down(Waveform(np.zeros(16001)))) == 16001


def test_make_wide_down_keeps_lower_band():
    rng = np.random.default_rng(0)
    b = sig.firwin(255, 3300, fs=FS)
    x = np.convolve(rng.standard_normal(32000), b, mode="same")
    y = make_wide_down(Waveform(x)).samples
    c = StftConfig(512, 128, 512)
    X, Y = np.abs(stft(x, c)), np.abs(stft(y, c))
    k = int(3500 * 512 / FS)
    diff = np.abs(20 * np.log10(Y[4:-4, 1:k] / X[4:-4, 1:k]))
    assert diff.mean() < 0.5


def test_stft_impulse_flat():
    x = np.zeros(2048)
    x[1024] = 1.0
    c = StftConfig(512, 128, 512)
    S = stft(x, c)
    # frame centred on the impulse sees the window peak
    frame = 1024 // 128
    mag = np.abs(S[frame])
    np.testing.assert_allclose(mag, mag[0], rtol=1e-12)


@pytest.mark.parametrize("c", [StftConfig(1024, 120, 600), StftConfig(2048, 240, 1200),
                               StftConfig(512, 50, 240), StftConfig(512, 128, 512)])
def test_stft_round_trip(c):
    x = np.random.default_rng(1).uniform(-1, 1, FS)
    y = istft(stft(x, c), c, len(x))
    assert np.max(np.abs(x - y)[c.fft_size:-c.fft_size]) < 1e-6


def test_istft_rejects_non_invertible():
    c = StftConfig(64, 64, 64)  # periodic Hann is zero at every frame start
    with pytest.raises(ValueError):
        istft(stft(np.zeros(256), c), c, 256)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(256, 300, 256)
    with pytest.raises(ValueError):
        StftConfig(256, 64, 512)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5, allow_nan=False))
def test_stft_linearity(a):
    x = np.random.default_rng(2).standard_normal(1024)
    c = StftConfig(256, 64, 256)
    np.testing.assert_allclose(stft(a * x, c), a * stft(x, c), atol=1e-12)


def test_lfr_identity_and_idempotence(speech):
    x = speech[0]
    assert np.max(np.abs(low_frequency_replacement(x, x).samples - x.samples)) < 1e-4
    p = Waveform(np.random.default_rng(3).uniform(-0.5, 0.5, len(x)))
    once = low_frequency_replacement(p, x)
    twice = low_frequency_replacement(once, x)
    assert np.max(np.abs(once.samples - twice.samples)) < 1e-4


def test_lfr_preserves_lower_band(speech):
    rng = np.random.default_rng(4)
    for w in speech:
        narrow = make_wide_down(w)
        for p in (w.samples, rng.uniform(-0.5, 0.5, len(w))):
            out = low_frequency_replacement(Waveform(p), narrow)
            assert lsd(narrow, out, band=(0, 4000)) < 0.05
            _, p_high = band_split(p)
            _, o_high = band_split(out.samples)
            np.testing.assert_allclose(o_high, p_high, atol=1e-9)


def test_lfr_tone_examples():
    low = Waveform(tone(1000))
    out = low_frequency_replacement(Waveform(np.zeros(FS)), low).samples
    assert band_energy_db(out, 4000, 8001) < -60
    np.testing.assert_allclose(out[512:-512], low.samples[512:-512], atol=1e-6)
    both = low_frequency_replacement(Waveform(tone(6000)), low).samples
    spec = np.abs(np.fft.rfft(both))
    freqs = np.fft.rfftfreq(len(both), 1 / FS)
    top = freqs[np.argsort(spec)[-2:]]
    assert sorted(top) == [1000, 6000]


def test_lfr_length_mismatch():
    with pytest.raises(ValueError):
        low_frequency_replacement(Waveform(np.zeros(1000)), Waveform(np.zeros(1001)))


def test_detect_bandwidth_examples():
    noise = Waveform(np.random.default_rng(4).uniform(-1, 1, FS))
    assert detect_bandwidth(noise) == Band.WIDE
    assert detect_bandwidth(Waveform(np.zeros(FS))) == Band.NARROW
    with pytest.raises(ValueError):
        detect_bandwidth(Waveform(np.zeros(4000)))


def test_chunk_examples():
    w = Waveform(np.arange(10 * FS, dtype=float))
    chunks = chunk(w, 4.0, source_id="u")
    assert len(chunks) == 2
    assert chunk(Waveform(np.zeros(3 * FS)), 4.0) == []
    np.testing.assert_array_equal(np.concatenate([c.samples for c in chunks]), w.samples[:8 * FS])
    assert [c.offset for c in chunks] == [0, 4 * FS]
    with pytest.raises(ValueError):
        chunk(w, 0)


def test_wav_round_trip(tmp_path):
    x = Waveform(np.round(tone(440, 0.1) * 32768) / 32768)
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert y.sample_rate == FS
    np.testing.assert_array_equal(x.samples, y.samples)
