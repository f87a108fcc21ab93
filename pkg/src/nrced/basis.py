"""The final weight matrix as an overcomplete basis.

Targets are expressed as ``x - b_L = W_L beta`` with ``beta`` found by ridge
regression.  Correlations between the ``beta`` rows of a patient's beats
separate typical from atypical morphology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .experiment import time_domain_correlation
from .tfrepr import DEFAULT_STFT, tf_inverse, unflatten

DEFAULT_LAMBDA = 1e-7


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class RegressionBasis:
    """``W_L`` (columns are basis vectors), the final bias and the penalty."""

    weight: np.ndarray
    bias: np.ndarray = None
    lam: float = DEFAULT_LAMBDA
    source: dict = field(default_factory=dict)
    refine_steps: int = 2
    _factor: tuple = field(default=None, init=False, repr=False)
    _gram: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        d = self.weight.shape[0]
        if self.weight.ndim != 2 or self.weight.shape[1] != d:
            raise ValueError(f"basis must be square, got {self.weight.shape}")
        _check_finite("basis", self.weight)
        self.bias = np.zeros(d) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (d,):
            raise ValueError("bias length must match the basis")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @classmethod
    def from_params(cls, params, lam=DEFAULT_LAMBDA, source=None):
        from .model import extract_last_bias, extract_last_layer

        return cls(extract_last_layer(params).copy(), extract_last_bias(params).copy(),
                   lam, dict(source or {}))

    @property
    def dim(self):
        return self.weight.shape[0]

    def gram(self):
        """``W^T W + lambda I``, computed once."""
        if self._gram is None:
            g = self.weight.T @ self.weight
            g[np.diag_indices_from(g)] += self.lam
            self._gram = g
        return self._gram

    def factor(self):
        """Cholesky factor of the regularized Gram matrix, computed once."""
        if self._factor is None:
            self._factor = cho_factor(self.gram(), lower=True, check_finite=False)
        return self._factor

    def solve(self, targets, subtract_bias=True):
        """Ridge coefficients for each row of ``targets`` (``(N, D)`` or ``(D,)``)."""
        x = np.asarray(targets, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"targets have length {x.shape[1]}, basis has {self.dim}")
        _check_finite("targets", x)
        if subtract_bias:
            x = x - self.bias
        rhs = (x @ self.weight).T  # W^T x, one column per beat
        beta = cho_solve(self.factor(), rhs, check_finite=False)
        # Iterative refinement keeps the normal-equation residual near round-off
        # even when W^T W is badly conditioned.
        gram = self.gram()
        for _ in range(self.refine_steps):
            beta += cho_solve(self.factor(), rhs - gram @ beta, check_finite=False)
        beta = beta.T
        return beta[0] if single else beta

    def residuals(self, targets, beta, subtract_bias=True):
        """Relative normal-equation residual per row."""
        x = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if subtract_bias:
            x = x - self.bias
        rhs = x @ self.weight
        r = np.atleast_2d(beta) @ self.gram() - rhs  # the Gram matrix is symmetric
        den = np.linalg.norm(rhs, axis=1)
        return np.linalg.norm(r, axis=1) / np.where(den > 0, den, 1.0)

    def reconstruct(self, beta):
        return np.atleast_2d(beta) @ self.weight.T + self.bias


def ridge_solve(weight, x, lam=DEFAULT_LAMBDA):
    """``beta`` solving ``(W^T W + lam I) beta = W^T x`` via Cholesky."""
    weight = np.asarray(weight, dtype=np.float64)
    _check_finite("basis", weight)
    return RegressionBasis(weight, None, lam).solve(x, subtract_bias=False)


def normal_residual(weight, x, beta, lam=DEFAULT_LAMBDA):
    return float(RegressionBasis(weight, None, lam).residuals(x, beta, subtract_bias=False)[0])


@dataclass
class RidgeReconstruction:
    betas: np.ndarray  # (N, D)
    residuals: np.ndarray  # (N,) relative normal-equation residuals
    tensors: np.ndarray  # (N, C, K, F) reconstructed tensors
    estimate: np.ndarray  # (N, M, T) time domain
    truth: np.ndarray
    rho: np.ndarray  # (N,)
    per_lead: np.ndarray  # (N, M)


def ridge_reconstruct(basis, tensors, stft_cfg=DEFAULT_STFT):
    """Fit every beat ``(N, C, K, F)`` with the basis and score it in time."""
    tensors = np.asarray(tensors, dtype=np.float64)
    n = len(tensors)
    flat = tensors.reshape(n, -1)
    betas = basis.solve(flat)
    res = basis.residuals(flat, betas)
    rec = basis.reconstruct(betas).reshape(tensors.shape)
    est = tf_inverse(rec, stft_cfg)
    truth = tf_inverse(tensors, stft_cfg)
    rho, per_lead = time_domain_correlation(est, truth)
    return RidgeReconstruction(betas, res, rec, est, truth, rho, per_lead)


def column_to_time_domain(basis, index, stft_cfg=DEFAULT_STFT):
    """Column ``index`` of ``W_L`` as an ``(M, T)`` beat-shaped feature."""
    weight = basis.weight if isinstance(basis, RegressionBasis) else np.asarray(basis)
    d = weight.shape[0]
    if not 0 <= index < d:
        raise IndexError(f"column {index} out of range [0, {d})")
    per_lead = 2 * stft_cfg.num_freqs * stft_cfg.num_frames  # real and imaginary planes
    return tf_inverse(unflatten(weight[:, index], d // per_lead, stft_cfg), stft_cfg)


def sparsity_report(weight, rel_tol=1e-4):
    """Fraction of entries per column with ``|w| < rel_tol * max|w|``."""
    weight = np.abs(np.asarray(weight))
    cutoff = rel_tol * weight.max() if weight.size else 0.0
    per_col = (weight < cutoff).mean(axis=0)
    return {"rel_tol": rel_tol, "overall": float(per_col.mean()),
            "min": float(per_col.min()), "max": float(per_col.max()), "per_column": per_col}


@dataclass
class CrossCorrMatrix:
    rho: np.ndarray  # (N, N) in [-1, 1]

    @property
    def rescaled(self):
        return (self.rho + 1.0) / 2.0


def cross_corr_matrix(betas):
    """Pearson correlation between every pair of ``beta`` rows."""
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 2 or len(b) < 2:
        raise ValueError("need a 2-D matrix with at least two rows")
    _check_finite("betas", b)
    c = b - b.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    z = np.divide(c, norms, out=np.zeros_like(c), where=norms > 0)
    rho = z @ z.T
    rho = np.clip((rho + rho.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return CrossCorrMatrix(rho)


def reference_index(ccm):
    """The most typical beat: highest mean correlation with all others."""
    rho = ccm.rho
    n = len(rho)
    return int(np.argmax((rho.sum(axis=1) - 1.0) / (n - 1)))


def classify_beats(ccm, reference=None, threshold=0.5):
    """1 (atypical) where the rescaled correlation with the reference beat
    falls below ``threshold``; the reference beat itself is 0."""
    ref = reference_index(ccm) if reference is None else int(reference)
    sim = ccm.rescaled[ref]
    labels = (sim < threshold).astype(np.uint8)
    labels[ref] = 0
    return labels


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    lower_is_positive: bool = False

    def best_threshold(self):
        """Threshold maximizing ``tpr - fpr``."""
        i = int(np.argmax(self.tpr - self.fpr))
        return float(self.thresholds[i])


def roc_curve(scores, labels, lower_is_positive=False):
    """Sweep every distinct score as a threshold.

    A beat is called positive when ``score >= t`` (or ``score < t`` with
    ``lower_is_positive``).  Tied scores enter the curve together, so the area
    (trapezoid rule) credits ties with one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    _check_finite("scores", s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    key = -s if lower_is_positive else s
    order = np.argsort(-key, kind="mergesort")
    ks, ys = key[order], y[order]
    last = np.r_[np.nonzero(np.diff(ks))[0], len(ks) - 1]  # end of each tie group
    tp = np.r_[0, np.cumsum(ys)[last]]
    fp = np.r_[0, np.cumsum(~ys)[last]]
    tpr, fpr = tp / n_pos, fp / n_neg
    if lower_is_positive:
        uniq = s[order][last]  # increasing
        # nothing is strictly below the minimum; just above a group takes it in
        thresholds = np.r_[uniq[0], np.nextafter(uniq, np.inf)]
    else:
        thresholds = np.r_[np.inf, ks[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc, lower_is_positive)
