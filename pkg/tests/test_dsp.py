import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nrced import dsp
from nrced.dsp import (Beat, PreprocessError, Recording, bandpass_filter_zero_phase,
                       center_normalize, center_normalize_array, detect_r_peaks,
                       downsample_by_two, preprocess_recording, read_recording, segment_beats,
                       write_recording)
from nrced.synth import SynthPatientConfig, synth_recording

FS = 1000


def butterworth_bandpass_power(f, fs=FS, band=(3.0, 50.0), order=5):
    """Analytic |H|^2 of the bilinear-transformed Butterworth bandpass; the
    zero-phase cascade applies it once forward and once backward."""
    warp = lambda x: 2 * fs * np.tan(np.pi * x / fs)  # noqa: E731
    w1, w2, w = warp(band[0]), warp(band[1]), warp(np.asarray(f, dtype=float))
    ratio = (w**2 - w1 * w2) / (w * (w2 - w1))
    return 1.0 / (1.0 + ratio ** (2 * order))


def sine(freq, seconds=4.0, fs=FS, phase=0.0):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2 * np.pi * freq * t + phase)


def amplitude_at(x, freq, fs=FS):
    spec = np.fft.rfft(x * np.hanning(len(x)))
    k = int(round(freq * len(x) / fs))
    return 2 * np.abs(spec[k]) / np.hanning(len(x)).sum()


def test_passband_gain_matches_frequency_response_oracle():
    x = sine(25.0)
    y = bandpass_filter_zero_phase(x, FS)
    gain = amplitude_at(y[500:-500], 25.0) / amplitude_at(x[500:-500], 25.0)
    assert 0.9 <= gain <= 1.0
    assert gain == pytest.approx(butterworth_bandpass_power(25.0), abs=2e-3)


def test_dc_is_removed():
    y = bandpass_filter_zero_phase(np.full(4000, 5.0), FS)
    assert np.abs(y[500:-500]).max() < 5e-3
    assert butterworth_bandpass_power(0.01) < 1e-20


def tone_burst(freq, seconds=4.0, fs=FS, phase=0.0, sigma_s=0.4):
    """A sinusoid under a wide Gaussian envelope, so its cross-correlation has
    a single dominant peak rather than one per period."""
    t = np.arange(int(seconds * fs)) / fs
    return np.exp(-0.5 * ((t - seconds / 2) / sigma_s) ** 2) * np.sin(2 * np.pi * freq * t + phase)


def peak_lag(x, y):
    cc = np.correlate(y, x, mode="full")
    return int(np.argmax(cc)) - (len(x) - 1)


@pytest.mark.parametrize("freq", [10.0, 40.0])
def test_zero_phase_lag(freq):
    x = tone_burst(freq)
    assert peak_lag(x, bandpass_filter_zero_phase(x, FS)) == 0


@given(st.floats(5.0, 45.0), st.floats(0.0, 2 * np.pi))
def test_zero_phase_property(freq, phase):
    x = tone_burst(freq, phase=phase)
    assert peak_lag(x, bandpass_filter_zero_phase(x, FS)) == 0


def test_filter_errors():
    with pytest.raises(PreprocessError):
        bandpass_filter_zero_phase(np.zeros(20), FS)
    bad = sine(10.0)
    bad[7] = np.nan
    with pytest.raises(PreprocessError):
        bandpass_filter_zero_phase(bad, FS)
    with pytest.raises(PreprocessError):
        bandpass_filter_zero_phase(sine(10.0), 100)


def bump_train(centres, n, sigma_s=0.010, heights=None):
    t = np.arange(n)
    x = np.zeros(n)
    heights = np.ones(len(centres)) if heights is None else heights
    for c, h in zip(centres, heights):
        x += h * np.exp(-0.5 * ((t - c) / (sigma_s * FS)) ** 2)
    return x


def test_planted_peaks_found():
    centres = 500 + 1000 * np.arange(10)
    peaks = detect_r_peaks(bump_train(centres, 10500), FS)
    assert len(peaks) == 10
    assert np.all(np.abs(peaks - centres) <= 2)


def test_flatline_gives_no_peaks():
    assert detect_r_peaks(np.zeros(5000), FS).size == 0


def test_refractory_keeps_taller_bump():
    x = bump_train([1000, 1150], 3000, heights=[0.7, 1.0])
    peaks = detect_r_peaks(x, FS, refractory_s=0.4)
    assert list(peaks) == [1150]


@given(st.integers(0, 2**31 - 1))
def test_peak_monotonicity(seed):
    r = np.random.default_rng(seed)
    x = np.cumsum(r.normal(size=3000))
    x = x - np.convolve(x, np.ones(101) / 101, mode="same") + r.normal(size=3000)
    peaks = detect_r_peaks(x, FS, min_prominence_mad=0.5, refractory_s=0.2)
    if len(peaks) > 1:
        assert np.all(np.diff(peaks) >= 200)
    for p in peaks:
        assert x[p] >= x[max(p - 1, 0)] and x[p] >= x[min(p + 1, len(x) - 1)]


def make_recording(n=5000, seed=0):
    r = np.random.default_rng(seed)
    return Recording("t", FS, r.normal(size=(12, n)), r.normal(size=(5, n)))


def test_segment_window_arithmetic():
    rec = make_recording()
    seg = segment_beats(rec, [100, 1000, 4800])
    assert seg.dropped == 2
    (pair,) = seg.pairs
    assert (pair.start, pair.stop) == (750, 1250)
    np.testing.assert_array_equal(pair.ecg.channels, rec.ecg[:, 750:1250])
    np.testing.assert_array_equal(pair.egm.channels, rec.egm[:, 750:1250])


def test_segment_interior_peaks_aligned():
    rec = make_recording(12000)
    peaks = 500 + 1000 * np.arange(10) + 300
    seg = segment_beats(rec, peaks)
    assert len(seg.pairs) == 10 and seg.dropped == 0
    for pair, p in zip(seg.pairs, peaks):
        assert pair.egm.r_peak_index == pair.ecg.r_peak_index == p
        assert pair.stop - pair.start == 500


def test_downsample():
    b = Beat(np.array([[1.0, 2.0, 3.0, 4.0]]), 10, 0, 1000)
    d = downsample_by_two(b)
    np.testing.assert_array_equal(d.channels, [[1.0, 3.0]])
    assert d.sample_rate_hz == 500
    long = downsample_by_two(Beat(np.zeros((3, 500)), 0, 0, 1000))
    assert long.channels.shape == (3, 250)


def test_downsample_preserves_48hz_tone():
    n = 2000
    x = np.sin(2 * np.pi * 48 * np.arange(n) / 1000)
    d = downsample_by_two(Beat(x[None], 0, 0, 1000)).channels[0]
    t = np.arange(n // 2) / 500
    np.testing.assert_allclose(d, np.sin(2 * np.pi * 48 * t), atol=1e-6)


def test_center_normalize_examples():
    out = center_normalize_array(np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 2.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out[0], 0.0)
    np.testing.assert_allclose(center_normalize_array(np.array([0.0, 2.0])),
                               [-1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-15)
    b = center_normalize(Beat(np.random.default_rng(0).normal(size=(5, 250)), 0, 0, 500))
    assert np.abs(b.channels.mean(axis=1)).max() < 1e-9
    np.testing.assert_allclose(np.linalg.norm(b.channels, axis=1), 1.0, atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_center_normalize_idempotent(seed, scale):
    x = scale * np.random.default_rng(seed).normal(size=(4, 250)) + 7.0
    once = center_normalize_array(x)
    np.testing.assert_allclose(center_normalize_array(once), once, atol=1e-12)


@pytest.fixture(scope="module")
def synth60():
    return synth_recording(SynthPatientConfig(patient_id="s60", n_beats=60, seed=3))


def test_preprocess_synthetic_recording(synth60):
    beats = preprocess_recording(synth60.recording)
    assert beats.egm.shape == (60, 5, 250)
    assert beats.ecg.shape == (60, 12, 250)
    assert beats.sample_rate_hz == 500
    assert np.all(np.diff(beats.r_peaks) > 0)
    assert np.all(np.abs(beats.r_peaks - synth60.r_peaks) <= 5)
    again = preprocess_recording(synth60.recording)
    assert np.array_equal(beats.ecg, again.ecg) and np.array_equal(beats.egm, again.egm)


def test_edge_beat_dropped(synth60):
    rec = synth60.recording
    cut = synth60.r_peaks[0] - 100  # the first beat now sits 100 samples from the edge
    short = Recording(rec.patient_id, FS, rec.ecg[:, cut:], rec.egm[:, cut:])
    beats = preprocess_recording(short)
    assert len(beats.r_peaks) == 59
    assert beats.dropped >= 1
    assert beats.r_peaks[0] == pytest.approx(synth60.r_peaks[1] - cut, abs=5)


def test_zero_beats_is_an_error():
    with pytest.raises(PreprocessError):
        preprocess_recording(Recording("z", FS, np.zeros((12, 3000)), np.zeros((5, 3000))))


def test_recording_validation():
    with pytest.raises(PreprocessError):
        Recording("x", FS, np.zeros((12, 10)), np.zeros((5, 11)))
    bad = np.zeros((12, 10))
    bad[0, 0] = np.inf
    with pytest.raises(PreprocessError):
        Recording("x", FS, bad, np.zeros((5, 10)))


def test_csv_round_trip(tmp_path, synth60):
    rec = synth60.recording
    write_recording(rec, tmp_path / "a.csv")
    back = read_recording(tmp_path / "a.csv")
    assert back.patient_id == rec.patient_id and back.sample_rate_hz == 1000
    np.testing.assert_allclose(back.ecg, rec.ecg, atol=5e-7)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(dsp.CSV_COLUMNS)
    assert json.loads((tmp_path / "a.json").read_text()) == {"patient_id": "s60",
                                                              "sample_rate_hz": 1000}


def test_csv_requires_header_and_manifest(tmp_path, synth60):
    write_recording(synth60.recording, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    (tmp_path / "b.csv").write_text("\n".join(lines[1:]) + "\n")
    (tmp_path / "b.json").write_text((tmp_path / "a.json").read_text())
    with pytest.raises(PreprocessError):
        read_recording(tmp_path / "b.csv")
    (tmp_path / "a.json").unlink()
    with pytest.raises(PreprocessError):
        read_recording(tmp_path / "a.csv")


def test_attach_labels(synth60):
    beats = preprocess_recording(synth60.recording)
    dsp.attach_labels(beats, synth60.r_peaks, synth60.labels)
    np.testing.assert_array_equal(beats.labels, synth60.labels)
    dsp.attach_labels(beats, synth60.r_peaks + 50, synth60.labels)
    assert np.all(beats.labels == dsp.LABEL_UNLABELED)
