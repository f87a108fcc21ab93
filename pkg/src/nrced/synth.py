"""Synthetic paired EGM / 12-lead ECG recordings.

A handful of latent "dipole" sources, each a sum of Gaussian P, Q, R, S and T
deflections, drive both lead sets.  ECG leads are a linear mix of the
sources (limb leads obey Einthoven's relations before the nonlinearity)
passed through a per-lead tanh saturation.  EGM leads mix the time
derivative of the sources, which makes them sharper and more local.  All
patients of a cohort draw their mixing maps and morphology around a shared
family, so a map learned on some patients transfers partially to others.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dsp import LABEL_ATYPICAL, LABEL_NAMES, LABEL_SINUS, Recording, write_recording
from .formats import atomic_write_text

WAVES = ("P", "Q", "R", "S", "T")
BEAT_WINDOW = 1000  # latent samples per beat at 1 kHz, R peak at the centre


@dataclass
class SynthPatientConfig:
    patient_id: str = "synth00"
    n_beats: int = 1000
    hr_mean_bpm: float = 70.0
    hr_jitter: float = 0.05
    latent_dim: int = 3
    atypical_fraction: float = 0.1
    sinus_qrs_s: tuple = (0.08, 0.11)
    atypical_qrs_s: tuple = (0.13, 0.16)
    noise_level: float = 0.03
    nonlinearity_gain: float = 0.6
    family_seed: int = 0
    family_spread: float = 0.15
    sample_rate_hz: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.sinus_qrs_s = tuple(float(v) for v in self.sinus_qrs_s)
        self.atypical_qrs_s = tuple(float(v) for v in self.atypical_qrs_s)
        if not 1 <= self.latent_dim <= 5:
            raise ValueError("latent_dim must lie in [1, 5]")
        if not 0.0 <= self.atypical_fraction < 1.0:
            raise ValueError("atypical_fraction must lie in [0, 1)")
        if self.sample_rate_hz != 1000:
            raise ValueError("the generator works at 1000 Hz")
        if self.n_beats < 1:
            raise ValueError("n_beats must be positive")

    def to_dict(self):
        d = asdict(self)
        d["sinus_qrs_s"] = list(self.sinus_qrs_s)
        d["atypical_qrs_s"] = list(self.atypical_qrs_s)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PatientModel:
    amplitudes: np.ndarray  # (latent_dim, 5) per-wave amplitude of each source
    source_shift_s: np.ndarray  # (latent_dim,) small activation delays
    limb_mix: np.ndarray  # (2, latent_dim) -> leads I, II
    precordial_mix: np.ndarray  # (6, latent_dim)
    egm_mix: np.ndarray  # (5, latent_dim)
    ecg_gain: np.ndarray  # (12,)
    egm_gain: np.ndarray  # (5,)
    pr_interval_s: float
    qt_base_s: float


@dataclass
class SynthBeat:
    latent: np.ndarray  # (latent_dim, BEAT_WINDOW)
    label: int
    qrs_width_s: float
    wave_times_s: dict  # wave -> centre offset from R (source 0)
    wave_sigmas_s: dict


def _family_base(latent_dim, family_seed):
    rng = np.random.default_rng([family_seed, 7919])
    amp = np.empty((latent_dim, 5))
    amp[0] = [0.15, -0.12, 1.0, -0.3, 0.3]
    for j in range(1, latent_dim):
        amp[j] = rng.uniform([-0.12, -0.25, -0.5, -0.4, -0.25], [0.12, 0.25, 0.5, 0.4, 0.25])
    limb = np.zeros((2, latent_dim))
    limb[:, 0] = [0.7, 1.0]
    if latent_dim > 1:
        limb[:, 1:] = rng.uniform(-0.3, 0.3, size=(2, latent_dim - 1))
    prec = rng.uniform(-1.0, 1.0, size=(6, latent_dim))
    prec[:, 0] = np.linspace(-0.6, 1.0, 6)
    egm = rng.uniform(-1.0, 1.0, size=(5, latent_dim))
    return amp, limb, prec, egm


def patient_model(cfg):
    """Mixing maps and base morphology of one synthetic patient."""
    amp, limb, prec, egm = _family_base(cfg.latent_dim, cfg.family_seed)
    rng = np.random.default_rng([cfg.seed, 104729])
    s = cfg.family_spread

    def jitter(a):
        return a + s * rng.normal(size=a.shape) * np.maximum(np.abs(a), 0.2)

    amp = jitter(amp)
    amp[0, 2] = abs(amp[0, 2])  # dominant source keeps an upright R wave
    limb = jitter(limb)
    limb[1, 0] = abs(limb[1, 0]) + 0.5  # lead II dominated by source 0
    limb[1, 1:] *= 0.5
    shifts = np.zeros(cfg.latent_dim)
    shifts[1:] = rng.uniform(-0.006, 0.006, size=cfg.latent_dim - 1)
    return PatientModel(
        amplitudes=amp, source_shift_s=shifts, limb_mix=limb,
        precordial_mix=jitter(prec), egm_mix=jitter(egm),
        ecg_gain=cfg.nonlinearity_gain * rng.uniform(0.7, 1.3, size=12),
        egm_gain=cfg.nonlinearity_gain * rng.uniform(0.7, 1.3, size=5),
        pr_interval_s=float(rng.uniform(0.14, 0.18)),
        qt_base_s=float(rng.uniform(0.26, 0.30)),
    )


def _gauss(t, centre, sigma):
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2)


def synth_beat(cfg, beat_index, label, model=None):
    """Latent source traces for one beat, R peak of source 0 at the window centre.

    The QRS complex is three Gaussians with common width ``sigma = w / 10``
    placed at ``-0.3 w``, ``0`` and ``+0.3 w``, so its two-sigma envelope spans
    exactly ``w`` seconds.
    """
    model = model or patient_model(cfg)
    rng = np.random.default_rng([cfg.seed, 15485863, int(beat_index), int(label)])
    d = cfg.latent_dim
    fs = cfg.sample_rate_hz
    t = (np.arange(BEAT_WINDOW) - BEAT_WINDOW // 2) / fs

    atypical = label == LABEL_ATYPICAL
    lo, hi = cfg.atypical_qrs_s if atypical else cfg.sinus_qrs_s
    width = float(rng.uniform(lo, hi))
    sig_qrs = width / 10.0
    times = {"P": -(model.pr_interval_s + rng.normal(0, 0.004)),
             "Q": -0.3 * width, "R": 0.0, "S": 0.3 * width,
             "T": model.qt_base_s + 0.5 * (width - 0.095) + rng.normal(0, 0.004)}
    sigmas = {"P": 0.022, "Q": sig_qrs, "R": sig_qrs, "S": sig_qrs, "T": 0.045}

    amp = model.amplitudes * rng.normal(1.0, 0.08, size=(d, 5))
    # slow beat-to-beat modulation of repolarisation (respiration-like)
    amp[:, 4] *= 1.0 + 0.15 * np.sin(2 * np.pi * beat_index / 13.0)
    amp[:, 2] *= 1.0 + 0.05 * np.sin(2 * np.pi * beat_index / 7.0)
    if atypical:
        amp[:, 0] = 0.0  # no preceding atrial wave
        amp[1:, 1:4] *= -1.0  # inverted ventricular deflections off the main axis
        amp[:, 4] *= -1.0  # discordant repolarisation
        amp[0, 2] = abs(amp[0, 2]) * 1.1

    latent = np.zeros((d, BEAT_WINDOW))
    for j in range(d):
        shift = model.source_shift_s[j]
        for w_i, wave in enumerate(WAVES):
            latent[j] += amp[j, w_i] * _gauss(t, times[wave] + (shift if wave in "QRS" else 0.0),
                                              sigmas[wave])
    return SynthBeat(latent, int(label), width, times, sigmas)


def derive_leads(latent, model, noise_level, rng, sample_rate_hz=1000):
    """Map latent traces ``(d, L)`` to ``(ecg (12, L), egm (5, L))``."""
    latent = np.asarray(latent, dtype=np.float64)
    i_ii = model.limb_mix @ latent
    lead_i, lead_ii = i_ii
    limb = np.stack([lead_i, lead_ii, lead_ii - lead_i, -(lead_i + lead_ii) / 2,
                     lead_i - lead_ii / 2, lead_ii - lead_i / 2])
    ecg_lin = np.vstack([limb, model.precordial_mix @ latent])
    ecg = np.tanh(model.ecg_gain[:, None] * ecg_lin) / model.ecg_gain[:, None]

    tau = 0.01
    deriv = np.gradient(latent, axis=1) * sample_rate_hz * tau
    egm_lin = model.egm_mix @ (deriv + 0.2 * latent)
    egm = np.tanh(model.egm_gain[:, None] * egm_lin) / model.egm_gain[:, None]

    if noise_level:
        ecg = ecg + noise_level * _noise(ecg, rng, sample_rate_hz)
        egm = egm + noise_level * _noise(egm, rng, sample_rate_hz)
    return ecg, egm


def _noise(clean, rng, fs):
    """Unit-level noise per lead scaled by that lead's clean RMS: white noise,
    baseline wander and mains hum."""
    n_leads, n = clean.shape
    t = np.arange(n) / fs
    rms = np.sqrt(np.mean(clean**2, axis=1, keepdims=True))
    white = rng.normal(size=(n_leads, n))
    phase = rng.uniform(0, 2 * np.pi, size=(n_leads, 2, 1))
    wander = 2.0 * np.sin(2 * np.pi * 0.25 * t + phase[:, 0])
    mains = 0.5 * np.sin(2 * np.pi * 60.0 * t + phase[:, 1])
    return rms * (white + wander + mains)


@dataclass
class SynthRecording:
    recording: Recording
    r_peaks: np.ndarray  # true R peak sample of every beat
    labels: np.ndarray  # uint8, LABEL_SINUS / LABEL_ATYPICAL
    qrs_width_s: np.ndarray
    model: PatientModel


def _choose_labels(cfg, rng):
    labels = np.full(cfg.n_beats, LABEL_SINUS, dtype=np.uint8)
    k = int(round(cfg.atypical_fraction * cfg.n_beats))
    if k:
        labels[rng.choice(cfg.n_beats, size=k, replace=False)] = LABEL_ATYPICAL
    return labels


def synth_recording(cfg):
    model = patient_model(cfg)
    rng = np.random.default_rng([cfg.seed, 32452843])
    fs = cfg.sample_rate_hz
    labels = _choose_labels(cfg, rng)

    rr_mean = 60.0 / cfg.hr_mean_bpm
    rr = rr_mean * np.clip(1.0 + cfg.hr_jitter * rng.normal(size=cfg.n_beats), 0.75, 1.25)
    premature = labels == LABEL_ATYPICAL
    rr[premature] *= 0.8  # early ectopic beat ...
    rr[1:][premature[:-1]] *= 1.2  # ... followed by a compensatory pause
    lead_in = 0.6
    r_times = lead_in + np.cumsum(rr) - rr[0]
    r_peaks = np.round(r_times * fs).astype(np.int64)
    n = int(r_peaks[-1] + lead_in * fs)

    latent = np.zeros((cfg.latent_dim, n))
    widths = np.empty(cfg.n_beats)
    half = BEAT_WINDOW // 2
    for i, r in enumerate(r_peaks):
        beat = synth_beat(cfg, i, labels[i], model)
        widths[i] = beat.qrs_width_s
        lo, hi = r - half, r + half
        a, b = max(lo, 0), min(hi, n)
        latent[:, a:b] += beat.latent[:, a - lo:b - lo]

    noise_rng = np.random.default_rng([cfg.seed, 49979687])
    ecg, egm = derive_leads(latent, model, cfg.noise_level, noise_rng, fs)
    rec = Recording(cfg.patient_id, fs, ecg, egm)
    return SynthRecording(rec, r_peaks, labels, widths, model)


def make_cohort(n_patients, n_beats=400, seed=0, family_seed=0, **overrides):
    """Configs for a cohort sharing one generator family."""
    return [SynthPatientConfig(patient_id=f"p{i:02d}", n_beats=n_beats, seed=seed * 1000 + i,
                               family_seed=family_seed, **overrides)
            for i in range(n_patients)]


def write_labels(path, r_peaks, labels):
    lines = ["beat_index,r_peak_index_truth,label"]
    lines += [f"{i},{int(r)},{LABEL_NAMES[int(l)]}" for i, (r, l) in enumerate(zip(r_peaks, labels))]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_labels(path):
    path = Path(path)
    rows = path.read_text().strip().splitlines()
    if not rows or rows[0].strip() != "beat_index,r_peak_index_truth,label":
        raise ValueError(f"{path}: bad labels header")
    codes = {v: k for k, v in LABEL_NAMES.items()}
    peaks, labels = [], []
    for row in rows[1:]:
        _, r, lab = row.split(",")
        peaks.append(int(r))
        labels.append(codes[lab.strip()])
    return np.array(peaks, dtype=np.int64), np.array(labels, dtype=np.uint8)


def generate_dataset(configs, out_dir):
    """Write ``<pid>.csv``, ``<pid>.json`` and ``labels_<pid>.csv`` per patient."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for cfg in configs:
        sr = synth_recording(cfg)
        write_recording(sr.recording, out_dir / f"{cfg.patient_id}.csv")
        write_labels(out_dir / f"labels_{cfg.patient_id}.csv", sr.r_peaks, sr.labels)
        results.append(sr)
    atomic_write_text(out_dir / "cohort.json", json.dumps(
        {"patients": [c.to_dict() for c in configs]}, indent=2) + "\n")
    return results
