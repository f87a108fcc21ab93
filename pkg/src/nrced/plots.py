"""Static SVG figures, each written next to a CSV holding its numbers."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.colors import LogNorm
from matplotlib.figure import Figure

from .formats import atomic_write_bytes, atomic_write_text

matplotlib.rcParams["svg.hashsalt"] = "nrced"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, stem, header, rows):
    """Write ``stem.svg`` and ``stem.csv``; returns both paths."""
    stem = Path(stem)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[_fmt(v) for v in row] for row in rows])
    csv_path = stem.with_suffix(".csv")
    svg_path = stem.with_suffix(".svg")
    svg = io.BytesIO()
    fig.savefig(svg, format="svg", metadata={"Date": None})
    atomic_write_text(csv_path, buf.getvalue())
    atomic_write_bytes(svg_path, svg.getvalue())
    return svg_path, csv_path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def lead_overlay(truth, estimate, lead_names, stem, sample_rate_hz=500, title=""):
    """One panel per lead, true and reconstructed beat overlaid."""
    truth = np.asarray(truth)
    estimate = np.asarray(estimate)
    m, t = truth.shape
    if estimate.shape != truth.shape or len(lead_names) != m:
        raise ValueError("truth, estimate and lead names disagree in shape")
    ncols = 3 if m > 6 else 1
    nrows = -(-m // ncols)
    fig = Figure(figsize=(4 * ncols, 1.6 * nrows))
    ms = np.arange(t) * 1000.0 / sample_rate_hz
    for i in range(m):
        ax = fig.add_subplot(nrows, ncols, i + 1)
        ax.plot(ms, truth[i], color="black", lw=1.0, label="true")
        ax.plot(ms, estimate[i], color="tab:red", lw=1.0, ls="--", label="reconstructed")
        ax.set_title(lead_names[i], fontsize=8)
        ax.tick_params(labelsize=6)
    fig.axes[0].legend(fontsize=6)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    rows = [(lead_names[i], j, truth[i, j], estimate[i, j]) for i in range(m) for j in range(t)]
    return _save(fig, stem, ["lead", "sample", "true", "reconstructed"], rows)


def correlation_bars(per_patient, stem, title="Mean time-domain correlation"):
    if not per_patient:
        raise ValueError("no patients to plot")
    ids = sorted(per_patient)
    means = [per_patient[p]["mean_rho"] for p in ids]
    lo = [per_patient[p]["mean_rho"] - per_patient[p]["min_rho"] for p in ids]
    hi = [per_patient[p]["max_rho"] - per_patient[p]["mean_rho"] for p in ids]
    fig = Figure(figsize=(max(3, 0.6 * len(ids) + 1), 3))
    ax = fig.add_subplot()
    ax.bar(ids, means, yerr=[lo, hi], color="tab:blue", capsize=3)
    ax.set_ylim(min(0.0, min(per_patient[p]["min_rho"] for p in ids)), 1.0)
    ax.set_ylabel("rho")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    rows = [(p, per_patient[p]["mean_rho"], per_patient[p]["min_rho"], per_patient[p]["max_rho"])
            for p in ids]
    return _save(fig, stem, ["patient_id", "mean_rho", "min_rho", "max_rho"], rows)


def block_reduce_absmax(a, max_side=256):
    """Downsample a matrix by taking the largest magnitude in each block."""
    a = np.abs(np.asarray(a, dtype=np.float64))
    fr = -(-a.shape[0] // max_side)
    fc = -(-a.shape[1] // max_side)
    pr, pc = -a.shape[0] % fr, -a.shape[1] % fc
    a = np.pad(a, ((0, pr), (0, pc)))
    return a.reshape(a.shape[0] // fr, fr, a.shape[1] // fc, fc).max(axis=(1, 3))


def matrix_heatmap(matrix, stem, title="", log_scale=False, max_side=256, cmap="viridis",
                   xlabel="column", ylabel="row"):
    """Heatmap of a (possibly downsampled) matrix; CSV holds the plotted pixels."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        raise ValueError("empty matrix")
    if log_scale:
        pix = block_reduce_absmax(matrix, max_side)
        positive = pix[pix > 0]
        floor = positive.min() if positive.size else 1.0
        pix = np.maximum(pix, floor)
        norm = LogNorm(vmin=floor, vmax=max(pix.max(), floor * 10))
    else:
        pix = matrix if max(matrix.shape) <= max_side else _block_mean(matrix, max_side)
        norm = None
    fig = Figure(figsize=(4.5, 4))
    ax = fig.add_subplot()
    im = ax.imshow(pix, aspect="auto", interpolation="nearest", cmap=cmap, norm=norm)
    fig.colorbar(im, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    rows = [(i, j, pix[i, j]) for i in range(pix.shape[0]) for j in range(pix.shape[1])]
    return _save(fig, stem, ["row", "col", "value"], rows)


def _block_mean(a, max_side):
    fr = -(-a.shape[0] // max_side)
    fc = -(-a.shape[1] // max_side)
    r, c = a.shape[0] // fr * fr, a.shape[1] // fc * fc
    a = a[:r, :c]
    return a.reshape(r // fr, fr, c // fc, fc).mean(axis=(1, 3))


def roc_plot(curve, stem, title=""):
    fig = Figure(figsize=(3.5, 3.5))
    ax = fig.add_subplot()
    ax.plot(curve.fpr, curve.tpr, color="tab:blue", lw=1.5, drawstyle="default")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title or f"AUC = {curve.auc:.3f}", fontsize=9)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    fig.tight_layout()
    rows = list(zip(curve.thresholds, curve.fpr, curve.tpr))
    return _save(fig, stem, ["threshold", "fpr", "tpr"], rows)
