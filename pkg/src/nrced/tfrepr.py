"""Real-stacked short-time Fourier representation of multichannel beats.

A beat of shape ``(M, T)`` maps to a real tensor ``(2M, K, F)``: the real
parts of all channels followed by the imaginary parts, each a ``K x F``
(frequency x frame) image.  With the defaults (30-sample periodic Hann
window, hop 15, one leading and four trailing zeros) a 250-sample beat gives
a 16 x 16 image and the inverse is exact to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TFShapeError(ValueError):
    pass


def make_hann_window(length):
    """Periodic Hann window ``0.5 * (1 - cos(2 pi t / length))``."""
    if length < 2:
        raise ValueError("window length must be at least 2")
    t = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / length))


@dataclass(frozen=True)
class STFTConfig:
    window_len: int = 30
    hop: int = 15
    source_len: int = 250
    pad_left: int = 1
    pad_right: int = 4
    window: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.hop <= 0 or self.hop > self.window_len:
            raise ValueError("hop must lie in (0, window_len]")
        padded = self.padded_len
        if (padded - self.window_len) % self.hop:
            raise ValueError(
                f"padded length {padded} does not tile with window {self.window_len}, hop {self.hop}")
        object.__setattr__(self, "window", make_hann_window(self.window_len))
        # every source sample must be seen by a nonzero window tap
        cover = self.ola_weights()[self.pad_left:self.pad_left + self.source_len]
        if cover.min() <= 1e-12:
            raise ValueError("window/hop/padding leave source samples uncovered")

    @property
    def fft_len(self):
        return self.window_len

    @property
    def num_freqs(self):
        return self.fft_len // 2 + 1

    @property
    def padded_len(self):
        return self.source_len + self.pad_left + self.pad_right

    @property
    def num_frames(self):
        return (self.padded_len - self.window_len) // self.hop + 1

    @property
    def image_shape(self):
        return self.num_freqs, self.num_frames

    def ola_weights(self):
        """Sum over frames of the squared shifted window (length padded_len)."""
        acc = np.zeros(self.padded_len)
        w2 = self.window**2
        for m in range(self.num_frames):
            acc[m * self.hop:m * self.hop + self.window_len] += w2
        return acc

    def is_cola(self):
        acc = np.zeros(self.padded_len + self.window_len)
        for m in range(self.num_frames + 1):
            acc[m * self.hop:m * self.hop + self.window_len] += self.window
        interior = acc[self.window_len:self.padded_len]
        return bool(np.ptp(interior) < 1e-9)

    def to_dict(self):
        return {"window_len": self.window_len, "hop": self.hop, "source_len": self.source_len,
                "pad_left": self.pad_left, "pad_right": self.pad_right}


DEFAULT_STFT = STFTConfig()


def _frames(x, cfg):
    pad = [(0, 0)] * (x.ndim - 1) + [(cfg.pad_left, cfg.pad_right)]
    xp = np.pad(x, pad)
    return sliding_window_view(xp, cfg.window_len, axis=-1)[..., ::cfg.hop, :]


def stft(x, cfg=DEFAULT_STFT):
    """Complex STFT along the last axis: ``(..., T) -> (..., K, F)``.

    Entry ``[k, m]`` is ``sum_n x[m*hop + n - pad_left] w[n] exp(-2 pi i k n / N)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.source_len:
        raise TFShapeError(f"expected {cfg.source_len} samples, got {x.shape[-1]}")
    fr = _frames(x, cfg) * cfg.window  # (..., F, N)
    spec = np.fft.rfft(fr, n=cfg.fft_len, axis=-1)  # (..., F, K)
    return np.swapaxes(spec, -1, -2)


def stft_channel(signal, cfg=DEFAULT_STFT):
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise TFShapeError("stft_channel expects a 1-D signal")
    return stft(signal, cfg)


def istft(spec, cfg=DEFAULT_STFT):
    """Least-squares overlap-add inverse of :func:`stft` (``(..., K, F) -> (..., T)``)."""
    spec = np.asarray(spec)
    if spec.shape[-2:] != cfg.image_shape:
        raise TFShapeError(f"expected a {cfg.image_shape} spectrogram, got {spec.shape[-2:]}")
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=cfg.fft_len, axis=-1)  # (..., F, N)
    frames = frames * cfg.window
    out = np.zeros(spec.shape[:-2] + (cfg.padded_len,))
    for m in range(cfg.num_frames):
        out[..., m * cfg.hop:m * cfg.hop + cfg.window_len] += frames[..., m, :]
    out /= np.where(cfg.ola_weights() > 0, cfg.ola_weights(), 1.0)
    return out[..., cfg.pad_left:cfg.pad_left + cfg.source_len]


def tf_forward(beat, cfg=DEFAULT_STFT):
    """``(..., M, T)`` beat(s) -> ``(..., 2M, K, F)`` real tensor(s)."""
    spec = stft(beat, cfg)
    return np.concatenate([spec.real, spec.imag], axis=-3)


def tf_inverse(tensor, cfg=DEFAULT_STFT):
    """``(..., 2M, K, F)`` real tensor(s) -> ``(..., M, T)`` beat(s)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim < 3 or tensor.shape[-3] % 2:
        raise TFShapeError(f"tensor must have an even channel axis, got shape {tensor.shape}")
    if tensor.shape[-2:] != cfg.image_shape:
        raise TFShapeError(f"expected {cfg.image_shape} images, got {tensor.shape[-2:]}")
    m = tensor.shape[-3] // 2
    spec = tensor[..., :m, :, :] + 1j * tensor[..., m:, :, :]
    return istft(spec, cfg)


def flatten(tensor):
    """Channel-major, then frequency, then frame ordering (C order)."""
    tensor = np.asarray(tensor)
    return tensor.reshape(tensor.shape[:-3] + (-1,))


def unflatten(vector, n_channels, cfg=DEFAULT_STFT):
    """Inverse of :func:`flatten`; ``n_channels`` is the original channel count M."""
    vector = np.asarray(vector)
    k, f = cfg.image_shape
    if vector.shape[-1] != 2 * n_channels * k * f:
        raise TFShapeError(
            f"vector of length {vector.shape[-1]} does not match {2 * n_channels}x{k}x{f}")
    return vector.reshape(vector.shape[:-1] + (2 * n_channels, k, f))


def consistent_offset(tensor, cfg=DEFAULT_STFT):
    """Shift each ``(2M, K, F)`` tensor by the constant that brings it closest
    to the range of :func:`tf_forward`.

    A correlation-trained network fixes its output only up to a positive
    affine map.  A constant added to every coefficient is invisible to the
    loss, but it is not the transform of any beat, and inverting it leaves a
    spurious component in the time domain.  Valid transforms are unchanged.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    ones = np.ones(tensor.shape[-3:])
    r1 = ones - tf_forward(tf_inverse(ones, cfg), cfg)
    den = np.sum(r1 * r1)
    if den <= 1e-12 * ones.size:
        return tensor.copy()
    resid = tensor - tf_forward(tf_inverse(tensor, cfg), cfg)
    c = -np.sum(resid * r1, axis=(-3, -2, -1)) / den
    return tensor + np.asarray(c)[..., None, None, None]
