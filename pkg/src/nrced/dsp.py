"""Recording ingestion and beat extraction.

raw 1 kHz recording -> zero-phase 3-50 Hz bandpass -> R peaks on one ECG lead
-> 500-sample windows around each peak -> decimate by two -> per-channel
centering and unit-norm scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

ECG_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF",
             "V1", "V2", "V3", "V4", "V5", "V6")
EGM_LEADS = ("EGM1", "EGM2", "EGM3", "EGM4", "EGM5")
CSV_COLUMNS = ECG_LEADS + EGM_LEADS

LABEL_SINUS = 0
LABEL_ATYPICAL = 1
LABEL_UNLABELED = 2
LABEL_NAMES = {LABEL_SINUS: "sinus", LABEL_ATYPICAL: "atypical", LABEL_UNLABELED: "unlabeled"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}


class PreprocessError(ValueError):
    """Raised when a recording cannot be turned into beats."""


@dataclass
class PreprocessConfig:
    band_hz: tuple[float, float] = (3.0, 50.0)
    filter_order: int = 5
    peak_lead: str = "II"
    min_prominence_mad: float = 4.0
    refractory_s: float = 0.4
    half_window: int = 250
    decimation: int = 2

    def __post_init__(self):
        self.band_hz = tuple(float(f) for f in self.band_hz)
        if self.peak_lead not in ECG_LEADS:
            raise ValueError(f"unknown ECG lead {self.peak_lead!r}")
        if self.decimation < 1 or (2 * self.half_window) % self.decimation:
            raise ValueError("decimation must divide the window length")


@dataclass
class Recording:
    patient_id: str
    sample_rate_hz: int
    ecg: np.ndarray  # (12, L)
    egm: np.ndarray  # (5, L)

    def __post_init__(self):
        self.ecg = np.asarray(self.ecg, dtype=np.float64)
        self.egm = np.asarray(self.egm, dtype=np.float64)
        if self.ecg.ndim != 2 or self.egm.ndim != 2:
            raise PreprocessError("ecg and egm must be 2-D channel x time arrays")
        if self.ecg.shape[1] != self.egm.shape[1]:
            raise PreprocessError(
                f"ecg and egm lengths differ: {self.ecg.shape[1]} != {self.egm.shape[1]}")
        if int(self.sample_rate_hz) <= 0:
            raise PreprocessError("sample_rate_hz must be positive")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not (np.isfinite(self.ecg).all() and np.isfinite(self.egm).all()):
            raise PreprocessError(f"recording {self.patient_id!r} contains non-finite samples")

    @property
    def n_samples(self):
        return self.ecg.shape[1]


@dataclass
class Beat:
    channels: np.ndarray  # (M, T)
    r_peak_index: int
    beat_index: int
    sample_rate_hz: int


@dataclass
class BeatPair:
    egm: Beat
    ecg: Beat
    start: int  # first source sample (inclusive) shared by both snippets
    stop: int


@dataclass
class Segmentation:
    pairs: list[BeatPair]
    dropped: int = 0


@dataclass
class ProcessedBeats:
    """Time-domain output of :func:`preprocess_recording`."""

    patient_id: str
    egm: np.ndarray  # (N, 5, T)
    ecg: np.ndarray  # (N, 12, T)
    r_peaks: np.ndarray  # (N,) int64, source sample index
    sample_rate_hz: int
    dropped: int = 0
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.full(len(self.r_peaks), LABEL_UNLABELED, dtype=np.uint8)


# ------------------------------------------------------------------ filtering


def _bandpass_sos(sample_rate_hz, band_hz=(3.0, 50.0), order=5):
    return sps.butter(order, band_hz, btype="bandpass", fs=sample_rate_hz, output="sos")


def bandpass_filter_zero_phase(x, sample_rate_hz, band_hz=(3.0, 50.0), order=5):
    """Forward-backward Butterworth bandpass (net phase zero).

    ``x`` may be 1-D or channels x time; filtering runs along the last axis.
    The signal is reflect-padded by three times the bandpass order (twice the
    prototype order) before filtering and trimmed afterwards.
    """
    x = np.asarray(x, dtype=np.float64)
    if sample_rate_hz < 200:
        raise PreprocessError(f"sample rate {sample_rate_hz} Hz is below 200 Hz")
    if band_hz[1] * 2 >= sample_rate_hz:
        raise PreprocessError("upper cutoff must lie below Nyquist")
    if not np.isfinite(x).all():
        raise PreprocessError("cannot filter non-finite samples")
    padlen = 3 * 2 * order
    if x.shape[-1] <= padlen:
        raise PreprocessError(
            f"signal of length {x.shape[-1]} is too short for edge padding ({padlen})")
    sos = _bandpass_sos(sample_rate_hz, band_hz, order)
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=padlen)


# ------------------------------------------------------------------ R peaks


def robust_scale(x):
    """Median absolute deviation, scaled to match the std of a Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    return 1.4826 * np.median(np.abs(x - np.median(x)))


def detect_r_peaks(lead, sample_rate_hz, min_prominence_mad=4.0, refractory_s=0.4):
    lead = np.asarray(lead, dtype=np.float64)
    scale = robust_scale(lead)
    if scale == 0.0:
        # mostly flat baseline (over half the samples equal): use the std instead
        scale = float(lead.std()) if lead.size else 0.0
    if scale == 0.0:
        return np.empty(0, dtype=np.int64)
    distance = max(1, int(round(refractory_s * sample_rate_hz)))
    peaks, _ = sps.find_peaks(lead, prominence=min_prominence_mad * scale, distance=distance)
    return peaks.astype(np.int64)


# ------------------------------------------------------------------ beats


def segment_beats(recording, peaks, half_window=250):
    """Cut aligned EGM/ECG snippets ``[p - half_window, p + half_window)``.

    Peaks without a full window on both sides are dropped and counted.
    """
    pairs = []
    dropped = 0
    n = recording.n_samples
    for k, p in enumerate(np.asarray(peaks, dtype=np.int64)):
        start, stop = int(p) - half_window, int(p) + half_window
        if start < 0 or stop > n:
            dropped += 1
            continue
        fs = recording.sample_rate_hz
        pairs.append(BeatPair(
            egm=Beat(recording.egm[:, start:stop].copy(), int(p), len(pairs), fs),
            ecg=Beat(recording.ecg[:, start:stop].copy(), int(p), len(pairs), fs),
            start=start, stop=stop))
    return Segmentation(pairs, dropped)


def downsample_by_two(beat):
    if beat.channels.shape[-1] % 2:
        raise PreprocessError("downsampling by two needs an even number of samples")
    return Beat(beat.channels[..., ::2].copy(), beat.r_peak_index, beat.beat_index,
                beat.sample_rate_hz // 2)


def center_normalize_array(x):
    """Per-channel mean removal and unit Euclidean norm along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(xc, axis=-1, keepdims=True)
    # constant channels become exactly zero instead of amplified rounding noise
    flat = norm <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=-1, keepdims=True))
    out = np.divide(xc, norm, out=np.zeros_like(xc), where=~flat)
    return out


def center_normalize(beat):
    return Beat(center_normalize_array(beat.channels), beat.r_peak_index,
                beat.beat_index, beat.sample_rate_hz)


def preprocess_recording(recording, cfg=None):
    cfg = cfg or PreprocessConfig()
    fs = recording.sample_rate_hz
    ecg = bandpass_filter_zero_phase(recording.ecg, fs, cfg.band_hz, cfg.filter_order)
    egm = bandpass_filter_zero_phase(recording.egm, fs, cfg.band_hz, cfg.filter_order)
    filtered = Recording(recording.patient_id, fs, ecg, egm)
    peaks = detect_r_peaks(ecg[ECG_LEADS.index(cfg.peak_lead)], fs,
                           cfg.min_prominence_mad, cfg.refractory_s)
    seg = segment_beats(filtered, peaks, cfg.half_window)
    if not seg.pairs:
        raise PreprocessError(f"no usable beats in recording {recording.patient_id!r}")
    step = cfg.decimation
    egm_b = np.stack([p.egm.channels[:, ::step] for p in seg.pairs])
    ecg_b = np.stack([p.ecg.channels[:, ::step] for p in seg.pairs])
    return ProcessedBeats(
        patient_id=recording.patient_id,
        egm=center_normalize_array(egm_b),
        ecg=center_normalize_array(ecg_b),
        r_peaks=np.array([p.egm.r_peak_index for p in seg.pairs], dtype=np.int64),
        sample_rate_hz=fs // step,
        dropped=seg.dropped,
    )


def attach_labels(beats, truth_peaks, truth_labels, tolerance=5):
    """Copy ground-truth labels onto detected beats whose peak lies within
    ``tolerance`` samples of a true peak; others stay unlabeled."""
    truth_peaks = np.asarray(truth_peaks, dtype=np.int64)
    truth_labels = np.asarray(truth_labels, dtype=np.uint8)
    labels = np.full(len(beats.r_peaks), LABEL_UNLABELED, dtype=np.uint8)
    if truth_peaks.size:
        order = np.argsort(truth_peaks)
        tp, tl = truth_peaks[order], truth_labels[order]
        pos = np.clip(np.searchsorted(tp, beats.r_peaks), 1, len(tp) - 1) if len(tp) > 1 else None
        for i, r in enumerate(beats.r_peaks):
            if pos is None:
                j = 0
            else:
                j = pos[i] if abs(tp[pos[i]] - r) < abs(tp[pos[i] - 1] - r) else pos[i] - 1
            if abs(int(tp[j]) - int(r)) <= tolerance:
                labels[i] = tl[j]
    beats.labels = labels
    return beats


# ------------------------------------------------------------------ file I/O


def read_recording(csv_path, manifest_path=None):
    """Load a recording from the 17-column CSV plus its JSON manifest."""
    csv_path = Path(csv_path)
    manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".json")
    for p in (csv_path, manifest_path):
        if not p.exists():
            raise PreprocessError(f"missing file: {p}")
    manifest = json.loads(manifest_path.read_text())
    if set(manifest) != {"patient_id", "sample_rate_hz"}:
        raise PreprocessError(f"{manifest_path}: manifest keys must be patient_id, sample_rate_hz")
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    if tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise PreprocessError(f"{csv_path}: header must be {','.join(CSV_COLUMNS)}")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(CSV_COLUMNS):
        raise PreprocessError(f"{csv_path}: expected 17 columns, found {data.shape[1]}")
    return Recording(str(manifest["patient_id"]), int(manifest["sample_rate_hz"]),
                     data[:, :12].T, data[:, 12:].T)


def write_recording(recording, csv_path, manifest_path=None):
    from .formats import atomic_write_bytes, atomic_write_text

    csv_path = Path(csv_path)
    manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".json")
    table = np.vstack([recording.ecg, recording.egm]).T
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(f"{v:.6f}" for v in row) for row in table)
    atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())
    atomic_write_text(manifest_path, json.dumps(
        {"patient_id": recording.patient_id, "sample_rate_hz": recording.sample_rate_hz},
        indent=2) + "\n")
