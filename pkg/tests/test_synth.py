import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nrced import dsp
from nrced.synth import (SynthPatientConfig, derive_leads, generate_dataset, make_cohort,
                         patient_model, read_labels, synth_beat, synth_recording)


@pytest.fixture(scope="module")
def cfg():
    return SynthPatientConfig(patient_id="s", n_beats=300, seed=5)


def qrs_extent(beat):
    """Two-sigma envelope of the Q..S Gaussians, measured from the returned
    centres and widths rather than the drawn width itself."""
    t, s = beat.wave_times_s, beat.wave_sigmas_s
    return (t["S"] + 2 * s["S"]) - (t["Q"] - 2 * s["Q"])


@given(st.integers(0, 5000))
def test_qrs_widths(index):
    cfg = SynthPatientConfig(seed=1)
    sinus = synth_beat(cfg, index, dsp.LABEL_SINUS)
    atyp = synth_beat(cfg, index, dsp.LABEL_ATYPICAL)
    assert 0.08 <= qrs_extent(sinus) <= 0.11
    assert qrs_extent(atyp) > 0.11
    assert qrs_extent(sinus) == pytest.approx(sinus.qrs_width_s)
    assert np.all(np.isfinite(sinus.latent)) and np.abs(sinus.latent).max() < 10


def test_atypical_morphology_differs(cfg):
    s = synth_beat(cfg, 3, dsp.LABEL_SINUS)
    a = synth_beat(cfg, 3, dsp.LABEL_ATYPICAL)
    # the repolarisation wave flips sign on the dominant source
    t_idx = 500 + int(1000 * s.wave_times_s["T"])
    assert np.sign(s.latent[0, t_idx]) == -np.sign(a.latent[0, t_idx])


def test_beat_determinism(cfg):
    a = synth_beat(cfg, 17, dsp.LABEL_SINUS)
    b = synth_beat(cfg, 17, dsp.LABEL_SINUS)
    assert np.array_equal(a.latent, b.latent)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthPatientConfig(latent_dim=6)
    with pytest.raises(ValueError):
        SynthPatientConfig(atypical_fraction=1.0)
    with pytest.raises(ValueError):
        SynthPatientConfig.from_dict({"bogus": 1})
    c = SynthPatientConfig(patient_id="x", n_beats=12)
    assert SynthPatientConfig.from_dict(c.to_dict()) == c


def test_noise_free_leads_repeatable(cfg):
    model = patient_model(cfg)
    latent = synth_beat(cfg, 0, dsp.LABEL_SINUS).latent
    a = derive_leads(latent, model, 0.0, np.random.default_rng(1))
    b = derive_leads(latent, model, 0.0, np.random.default_rng(1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    ecg, egm = a
    assert ecg.shape == (12, 1000) and egm.shape == (5, 1000)
    # Einthoven: III = II - I
    np.testing.assert_allclose(ecg[2], np.tanh(model.ecg_gain[2] * (
        np.arctanh(model.ecg_gain[1] * ecg[1]) / model.ecg_gain[1]
        - np.arctanh(model.ecg_gain[0] * ecg[0]) / model.ecg_gain[0])) / model.ecg_gain[2],
        atol=1e-9)


def test_doubling_noise_halves_snr(cfg):
    model = patient_model(cfg)
    latent = np.concatenate([synth_beat(cfg, i, dsp.LABEL_SINUS).latent for i in range(40)], axis=1)
    clean_ecg, clean_egm = derive_leads(latent, model, 0.0, None)

    def snr(level):
        ecg, egm = derive_leads(latent, model, level, np.random.default_rng(9))
        return np.concatenate([
            np.sqrt(np.mean(clean_ecg**2, axis=1) / np.mean((ecg - clean_ecg) ** 2, axis=1)),
            np.sqrt(np.mean(clean_egm**2, axis=1) / np.mean((egm - clean_egm) ** 2, axis=1))])

    np.testing.assert_allclose(snr(0.05) / snr(0.1), 2.0, rtol=1e-6)


def test_label_balance():
    sr = synth_recording(SynthPatientConfig(n_beats=600, atypical_fraction=0.1, seed=2))
    frac = np.mean(sr.labels == dsp.LABEL_ATYPICAL)
    assert abs(frac - 0.1) <= 0.02
    none = synth_recording(SynthPatientConfig(n_beats=50, atypical_fraction=0.0, seed=2))
    assert np.all(none.labels == dsp.LABEL_SINUS)


def test_recording_determinism():
    c = SynthPatientConfig(n_beats=30, seed=4)
    a, b = synth_recording(c), synth_recording(c)
    assert np.array_equal(a.recording.ecg, b.recording.ecg)
    assert np.array_equal(a.recording.egm, b.recording.egm)
    assert np.array_equal(a.r_peaks, b.r_peaks)


def test_generate_dataset_bookkeeping(tmp_path):
    configs = make_cohort(3, n_beats=200, seed=1)
    generate_dataset(configs, tmp_path)
    assert len(list(tmp_path.glob("p0?.csv"))) == 3
    assert len(list(tmp_path.glob("p0?.json"))) == 3
    labels = sorted(tmp_path.glob("labels_*.csv"))
    assert len(labels) == 3
    assert sum(len(read_labels(p)[0]) for p in labels) == 600
    assert labels[0].read_text().splitlines()[0] == "beat_index,r_peak_index_truth,label"
    rec = dsp.read_recording(tmp_path / "p00.csv")
    assert rec.ecg.shape[0] == 12 and rec.egm.shape[0] == 5


@pytest.mark.parametrize("seed", [0, 1])
def test_true_peaks_recovered(seed):
    sr = synth_recording(SynthPatientConfig(n_beats=400, seed=seed))
    fs = sr.recording.sample_rate_hz
    ecg = dsp.bandpass_filter_zero_phase(sr.recording.ecg, fs)
    found = dsp.detect_r_peaks(ecg[1], fs)
    hits = sum(np.min(np.abs(found - r)) <= 5 for r in sr.r_peaks)
    assert hits / len(sr.r_peaks) >= 0.99
