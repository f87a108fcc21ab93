"""Paired beat tensors of one patient."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import LABEL_UNLABELED
from .formats import read_beat_tensors, write_beat_tensors
from .tfrepr import DEFAULT_STFT, tf_forward, tf_inverse


@dataclass
class BeatDataset:
    patient_id: str
    egm: np.ndarray  # (N, 2*M_in, K, F)
    ecg: np.ndarray  # (N, 2*M_out, K, F)
    r_peaks: np.ndarray  # (N,) source sample of each R peak, increasing
    labels: np.ndarray  # (N,) uint8
    dropped: int = 0

    def __post_init__(self):
        n = len(self.r_peaks)
        if len(self.egm) != n or len(self.ecg) != n or len(self.labels) != n:
            raise ValueError("egm, ecg, r_peaks and labels must be index-aligned")
        self.r_peaks = np.asarray(self.r_peaks, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)

    def __len__(self):
        return len(self.r_peaks)

    @classmethod
    def from_beats(cls, beats, stft_cfg=DEFAULT_STFT):
        """Build from :class:`nrced.dsp.ProcessedBeats`."""
        return cls(beats.patient_id, tf_forward(beats.egm, stft_cfg), tf_forward(beats.ecg, stft_cfg),
                   beats.r_peaks.copy(), beats.labels.copy(), beats.dropped)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return BeatDataset(self.patient_id, self.egm[idx], self.ecg[idx],
                           self.r_peaks[idx], self.labels[idx], 0)

    def time_domain(self, which="ecg", stft_cfg=DEFAULT_STFT):
        return tf_inverse(getattr(self, which), stft_cfg)

    @property
    def has_labels(self):
        return bool((self.labels != LABEL_UNLABELED).any())

    def save(self, directory):
        directory = Path(directory)
        write_beat_tensors(directory / f"{self.patient_id}.egm.nrcd", self.egm, self.r_peaks, self.labels)
        write_beat_tensors(directory / f"{self.patient_id}.ecg.nrcd", self.ecg, self.r_peaks, self.labels)

    @classmethod
    def load(cls, directory, patient_id):
        directory = Path(directory)
        egm, r1, l1 = read_beat_tensors(directory / f"{patient_id}.egm.nrcd")
        ecg, r2, l2 = read_beat_tensors(directory / f"{patient_id}.ecg.nrcd")
        if not (np.array_equal(r1, r2) and np.array_equal(l1, l2)):
            raise ValueError(f"EGM and ECG files of {patient_id!r} are not aligned")
        return cls(patient_id, egm.astype(np.float64), ecg.astype(np.float64), r1, l1)


def list_patients(directory):
    directory = Path(directory)
    return sorted(p.name[:-len(".egm.nrcd")] for p in directory.glob("*.egm.nrcd"))


def concat(datasets, patient_id="pooled"):
    return BeatDataset(patient_id,
                       np.concatenate([d.egm for d in datasets]),
                       np.concatenate([d.ecg for d in datasets]),
                       np.concatenate([d.r_peaks for d in datasets]),
                       np.concatenate([d.labels for d in datasets]))
