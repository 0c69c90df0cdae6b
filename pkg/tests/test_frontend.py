import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaudio.exceptions import InvalidConfigError, InvalidInputError
from mmaudio.frontend import (
    FrontendConfig,
    LogMelExtractor,
    LogMelFrame,
    Waveform,
    build_mel_filterbank,
    featurize_waveform,
    hamming,
    log_mel,
    read_record,
    read_wav,
    segment_1s,
    standardize,
    write_record,
    write_wav,
)

FB = build_mel_filterbank()


def _segment(x):
    return Waveform(np.asarray(x, dtype=np.float64), 16000)


def test_standardize_identity_for_mono_16k():
    x = np.random.default_rng(0).uniform(-1, 1, 1234)
    assert np.array_equal(standardize(Waveform(x, 16000)).samples, x)


def test_standardize_identical_stereo_channels():
    x = np.random.default_rng(1).uniform(-1, 1, 500)
    out = standardize(Waveform(np.stack([x, x], axis=1), 16000))
    assert np.allclose(out.samples, x, atol=0)


def test_standardize_8k_ramp_linear_interpolation():
    out = standardize(Waveform(np.array([0.0, 0.5, 1.0]), 8000))
    # output sample k sits at input position k/2; the last point clamps to the final sample
    assert out.samples.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]


def test_standardize_rejects_empty():
    with pytest.raises(InvalidInputError):
        standardize(Waveform(np.zeros(0), 16000))


@pytest.mark.parametrize("n,expected", [(64000, 4), (56000, 3), (15999, 0), (16000, 1)])
def test_segment_counts(n, expected):
    segs = segment_1s(_segment(np.arange(n) / n))
    assert len(segs) == expected
    assert all(len(s) == 16000 for s in segs)


def test_segment_drops_trailing_partial():
    x = np.arange(56000, dtype=float)
    segs = segment_1s(_segment(x))
    assert segs[-1].samples[-1] == 47999


def _independent_filterbank(n_fft, n_mels, fmin, fmax, rate=16000):
    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = mel(fmin), mel(fmax)
    edges = [hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    w = np.zeros((n_mels, n_fft // 2 + 1))
    for r in range(n_mels):
        a, c, b = edges[r], edges[r + 1], edges[r + 2]
        for k in range(n_fft // 2 + 1):
            f = k * rate / n_fft
            if a < f <= c:
                w[r, k] = (f - a) / (c - a)
            elif c < f < b:
                w[r, k] = (b - f) / (b - c)
    return w, edges


def test_filterbank_matches_independent_mel_oracle():
    ref, edges = _independent_filterbank(512, 64, 125.0, 7500.0)
    assert np.allclose(FB.weights.sum(axis=1), ref.sum(axis=1), atol=1e-9, rtol=0)
    assert np.allclose(FB.weights, ref, atol=1e-9, rtol=0)
    assert np.allclose(FB.centers, edges[1:-1], atol=1e-9)


def test_single_filter_peaks_at_mel_midpoint():
    fb = build_mel_filterbank(n_mels=1)
    mid = 700 * (10 ** ((2595 * math.log10(1 + 125 / 700) + 2595 * math.log10(1 + 7500 / 700)) / 2 / 2595) - 1)
    assert fb.centers[0] == pytest.approx(mid, rel=1e-12)


@pytest.mark.parametrize("n_mels,fmin,fmax", [(64, 125.0, 7500.0), (40, 0.0, 8000.0), (16, 300.0, 3000.0)])
def test_filterbank_covers_interior_bins(n_mels, fmin, fmax):
    fb = build_mel_filterbank(n_mels=n_mels, fmin=fmin, fmax=fmax)
    freqs = np.arange(fb.weights.shape[1]) * 16000 / 512
    interior = (freqs > fb.centers[0]) & (freqs < fb.centers[-1])
    assert np.all(fb.weights[:, interior].sum(axis=0) > 0)


@pytest.mark.parametrize("fmin,fmax", [(7500, 125), (100, 9000), (-1, 100)])
def test_filterbank_rejects_bad_range(fmin, fmax):
    with pytest.raises(InvalidConfigError):
        build_mel_filterbank(fmin=fmin, fmax=fmax)


def test_frame_count_arithmetic():
    assert (16000 - 400) // 160 + 1 == 98
    assert (16000 + 2 * 120 - 400) // 160 + 1 == 100


def test_silence_gives_log_offset():
    frame = log_mel(_segment(np.zeros(16000)), FB)
    assert frame.values.shape == (100, 64)
    assert np.all(frame.values == math.log(0.01))
    assert math.log(0.01) == pytest.approx(-4.60517, abs=1e-5)


def test_sine_peak_bin_and_direct_dft_oracle():
    t = np.arange(16000) / 16000
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    frame = log_mel(_segment(x), FB)
    nearest = int(np.argmin(np.abs(FB.centers - 1000)))
    # rows fully inside the signal (edges see the zero padding)
    assert np.all(frame.values[2:-2].argmax(axis=1) == nearest)

    padded = np.concatenate([np.zeros(120), x, np.zeros(120)])
    n = np.arange(400)
    window = 0.54 - 0.46 * np.cos(2 * np.pi * n / 400)
    k = np.arange(257)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None, :] / 512)
    for row in (0, 37, 99):
        seg = padded[row * 160: row * 160 + 400] * window
        mag = np.abs(basis @ seg)
        expected = np.log(FB.weights @ mag + 0.01)
        assert np.allclose(frame.values[row], expected, atol=1e-9)


def test_hamming_is_periodic_form():
    assert np.allclose(hamming(4), [0.08, 0.54, 1.0, 0.54])


def test_log_mel_rejects_wrong_length():
    with pytest.raises(InvalidInputError):
        log_mel(_segment(np.zeros(15999)), FB)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 20.0))
def test_amplitude_monotonicity(seed, c):
    x = np.random.default_rng(seed).uniform(-0.05, 0.05, 16000)
    lo = log_mel(_segment(x), FB).values
    hi = log_mel(_segment(c * x), FB).values
    assert np.all(hi >= lo - 1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shape_and_determinism(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, 16000)
    a, b = log_mel(_segment(x), FB), log_mel(_segment(x.copy()), FB)
    assert a.values.shape == (100, 64)
    assert a.values.tobytes() == b.values.tobytes()


def test_featurize_chain_offsets():
    x = np.random.default_rng(2).uniform(-1, 1, (44100 * 3 + 100, 2))
    frames = featurize_waveform(Waveform(x, 44100))
    assert [f.source_offset for f in frames] == [0.0, 1.0, 2.0]


def test_wav_roundtrip_pcm16_and_float(tmp_path):
    x = np.random.default_rng(3).uniform(-0.9, 0.9, 1000)
    write_wav(tmp_path / "a.wav", Waveform(x, 22050))
    got = read_wav(tmp_path / "a.wav")
    assert got.sample_rate == 22050 and np.max(np.abs(got.samples - x)) < 1 / 32768 * 1.01
    write_wav(tmp_path / "b.wav", Waveform(x, 8000), pcm16=False)
    assert np.allclose(read_wav(tmp_path / "b.wav").samples, x, atol=1e-7)


def test_record_layout(tmp_path):
    values = np.arange(6400, dtype=np.float64).reshape(100, 64) / 7
    write_record(tmp_path / "r.lmel", LogMelFrame(values, 3.0))
    blob = (tmp_path / "r.lmel").read_bytes()
    assert blob[:4] == b"LMEL" and len(blob) == 4 + 4 + 4 + 4 + 8 + 6400 * 4
    assert np.frombuffer(blob[24:28], "<f4")[0] == np.float32(values[0, 0])
    got = read_record(tmp_path / "r.lmel")
    assert got.source_offset == 3.0
    assert np.array_equal(got.values, values.astype(np.float32))


def test_extractor_estimator_api():
    X = np.random.default_rng(4).uniform(-1, 1, (3, 16000))
    ext = LogMelExtractor().fit(X)
    out = ext.transform(X)
    assert out.shape == (3, 100, 64)
    assert np.allclose(out[1], log_mel(_segment(X[1]), FB).values)
    assert ext.get_params()["n_mels"] == 64
    with pytest.raises(InvalidInputError):
        ext.transform(np.zeros((1, 100)))


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        FrontendConfig(log_offset=0)
    with pytest.raises(InvalidConfigError):
        FrontendConfig(sample_rate=8000)
