"""Pearson correlation and the negative-correlation batch loss."""

import warnings

import numpy as np


class DegenerateCorrelationWarning(RuntimeWarning):
    """A correlation was requested for a constant vector; 0 was returned."""


def pearson_corr(a, b):
    """Centred, variance-normalised correlation of two equal-length vectors.

    If either vector is constant the coefficient is undefined; 0.0 is returned
    and a :class:`DegenerateCorrelationWarning` is issued.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} != {b.size}")
    if a.size < 2:
        raise ValueError("need at least two samples")
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0.0 or nb == 0.0:
        warnings.warn("correlation of a constant vector defined as 0",
                      DegenerateCorrelationWarning, stacklevel=2)
        return 0.0
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))


def rowwise_corr(a, b):
    """Pearson correlation of matching rows of two 2-D arrays (no warnings;
    constant rows give 0, rows holding NaN or inf give NaN)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=-1, keepdims=True)
    bc = b - b.mean(axis=-1, keepdims=True)
    den = np.linalg.norm(ac, axis=-1) * np.linalg.norm(bc, axis=-1)
    num = (ac * bc).sum(axis=-1)
    rho = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    rho[np.isnan(den)] = np.nan  # non-finite input must not pass as degenerate
    return np.clip(rho, -1.0, 1.0)


def batch_loss(outputs, targets):
    """Mean over the batch of ``-rho(flatten(output_n), flatten(target_n))``."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"shape mismatch {outputs.shape} vs {targets.shape}")
    n = outputs.shape[0]
    return float(-rowwise_corr(outputs.reshape(n, -1), targets.reshape(n, -1)).mean())


def batch_loss_grad(outputs, targets):
    """Loss value and its gradient with respect to ``outputs``."""
    shape = outputs.shape
    n = shape[0]
    a = outputs.reshape(n, -1)
    b = targets.reshape(n, -1)
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(ac, axis=1, keepdims=True)
    nb = np.linalg.norm(bc, axis=1, keepdims=True)
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    rho = np.where(ok, (ac * bc).sum(axis=1, keepdims=True) / (na_s * nb_s), 0.0)
    # d rho / d a = bc / (|ac||bc|) - rho * ac / |ac|^2 ; both terms already zero-mean
    drho = np.where(ok, bc / (na_s * nb_s) - rho * ac / na_s**2, 0.0)
    if not (np.isfinite(na).all() and np.isfinite(nb).all()):
        return float("nan"), np.full(shape, np.nan)
    loss = float(-rho.mean())
    return loss, (-drho / n).reshape(shape)
