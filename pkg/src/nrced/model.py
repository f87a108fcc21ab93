"""The convolutional encoder-decoder.

Encoder: ``[conv -> bn -> tanh -> dropout -> maxpool] x stages`` followed by
fully connected blocks down to the bottleneck.  Decoder: fully connected
blocks back up, reshape, ``[upsample -> transposed conv -> bn -> tanh ->
dropout] x stages``, then one square fully connected layer ``W_L`` whose input
``g`` is the penultimate feature vector.  Every fully connected block is
``linear -> bn -> tanh -> dropout``; the final layer is purely affine.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .loss import batch_loss_grad


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 10
    out_channels: int = 24
    height: int = 16
    width: int = 16
    conv_channel_widths: tuple = (32, 64)
    conv_kernel: tuple = (3, 3)
    encoder_fc: tuple = (512, 256)
    bottleneck_dim: int = 128
    decoder_fc: tuple = (512,)
    dropout_rate: float = 0.1
    learning_rate: float = 5e-3
    batch_size: int = 64
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    activation: str = "tanh"
    batch_norm: bool = True
    upsample: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        self.conv_channel_widths = tuple(int(c) for c in self.conv_channel_widths)
        self.conv_kernel = tuple(int(k) for k in self.conv_kernel)
        self.encoder_fc = tuple(int(c) for c in self.encoder_fc)
        self.decoder_fc = tuple(int(c) for c in self.decoder_fc)
        if self.activation != "tanh":
            raise ValueError("only the hyperbolic tangent activation is supported")
        if self.upsample != "nearest":
            raise ValueError("only nearest-neighbour upsampling is supported")
        if not self.conv_channel_widths:
            raise ValueError("at least one convolution stage is required")
        scale = 2 ** self.conv_stage_count
        if self.height % scale or self.width % scale:
            raise ValueError(f"image {self.height}x{self.width} not divisible by {scale}")
        if any(k % 2 == 0 for k in self.conv_kernel):
            raise ValueError("convolution kernels must be odd-sized")
        limit = min(self.in_channels, self.out_channels) * self.height * self.width
        if not 0 < self.bottleneck_dim < limit:
            raise ValueError(f"bottleneck_dim must lie in (0, {limit})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def conv_stage_count(self):
        return len(self.conv_channel_widths)

    @property
    def fc_layer_count(self):
        return len(self.encoder_fc) + 1 + len(self.decoder_fc) + 1 + 1

    @property
    def output_dim(self):
        return self.out_channels * self.height * self.width

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def build_layers(cfg):
    """Return ``(layers, n_encoder_layers)`` for a configuration."""
    layers = []

    def block(prefix, width):
        if cfg.batch_norm:
            layers.append(nn.BatchNorm(f"{prefix}.bn", width, cfg.bn_eps))
        layers.append(nn.Tanh(f"{prefix}.act"))
        layers.append(nn.Dropout(f"{prefix}.drop", cfg.dropout_rate))

    cin = cfg.in_channels
    h, w = cfg.height, cfg.width
    for i, cout in enumerate(cfg.conv_channel_widths):
        layers.append(nn.Conv2d(f"enc.conv{i}", cin, cout, cfg.conv_kernel))
        block(f"enc.conv{i}", cout)
        layers.append(nn.MaxPool2x2(f"enc.pool{i}"))
        cin, h, w = cout, h // 2, w // 2
    feat_shape = (cin, h, w)
    flat = cin * h * w
    layers.append(nn.Reshape("enc.flatten", (flat,)))
    fin = flat
    for i, fout in enumerate(cfg.encoder_fc + (cfg.bottleneck_dim,)):
        layers.append(nn.Linear(f"enc.fc{i}", fin, fout))
        block(f"enc.fc{i}", fout)
        fin = fout
    n_enc = len(layers)

    for i, fout in enumerate(cfg.decoder_fc + (flat,)):
        layers.append(nn.Linear(f"dec.fc{i}", fin, fout))
        block(f"dec.fc{i}", fout)
        fin = fout
    layers.append(nn.Reshape("dec.unflatten", feat_shape))
    widths = list(reversed(cfg.conv_channel_widths[:-1])) + [cfg.out_channels]
    for i, cout in enumerate(widths):
        layers.append(nn.Upsample2x(f"dec.up{i}"))
        layers.append(nn.ConvTranspose2d(f"dec.tconv{i}", cin, cout, cfg.conv_kernel))
        block(f"dec.tconv{i}", cout)
        cin = cout
    layers.append(nn.Reshape("dec.flatten", (cfg.output_dim,)))
    layers.append(nn.Linear("dec.final", cfg.output_dim, cfg.output_dim))
    return layers, n_enc


FINAL_WEIGHT = "dec.final.weight"
FINAL_BIAS = "dec.final.bias"


@dataclass
class ModelParams:
    cfg: ModelConfig
    layers: list
    n_encoder_layers: int
    arrays: dict  # learnable parameters, in layer order
    state: dict  # batch-norm running statistics
    step: int = 0

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def encoder_names(self):
        return [n for l in self.layers[:self.n_encoder_layers] for n in l.param_names]

    @property
    def decoder_names(self):
        return [n for l in self.layers[self.n_encoder_layers:] for n in l.param_names]

    def n_parameters(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        return ModelParams(self.cfg, self.layers, self.n_encoder_layers,
                           {k: v.copy() for k, v in self.arrays.items()},
                           {k: v.copy() for k, v in self.state.items()}, self.step)


def init_params(cfg, seed=None):
    """Fan-in scaled uniform weights ``U(+-sqrt(6 / fan_in))``, zero biases,
    unit batch-norm scale and zero shift."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    layers, n_enc = build_layers(cfg)
    arrays, state = {}, {}
    for layer in layers:
        arrays.update(layer.init(rng))
        if isinstance(layer, nn.BatchNorm):
            state.update(layer.init_state())
    return ModelParams(cfg, layers, n_enc, arrays, state)


@dataclass
class ForwardTrace:
    caches: list
    features: np.ndarray  # g, (N, output_dim)
    output: np.ndarray  # (N, out_channels, H, W)
    train: bool
    bn_stats: dict = field(default_factory=dict)


def forward(params, x, mode="eval", rng=None):
    """Run a batch ``(N, in_channels, H, W)`` through the network.

    ``mode`` is ``"train"`` (dropout on, batch statistics) or ``"eval"``.
    """
    cfg = params.cfg
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatchError(f"input shape {x.shape[1:]} does not match {expected}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = nn.Context(train=(mode == "train"), rng=rng)
    caches = []
    h = x
    for layer in params.layers[:-1]:
        h, cache = layer.forward(params, h, ctx)
        caches.append(cache)
    g = h
    out, cache = params.layers[-1].forward(params, g, ctx)
    caches.append(cache)
    out = out.reshape((x.shape[0], cfg.out_channels, cfg.height, cfg.width))
    return ForwardTrace(caches, g, out, ctx.train, ctx.bn_stats)


def backward(params, trace, targets):
    """Gradient of :func:`nrced.loss.batch_loss` with respect to every parameter.

    Returns ``(loss, grads)``.  Only train-mode traces are accepted.
    """
    if not trace.train:
        raise ValueError("backward needs a train-mode trace")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != trace.output.shape:
        raise ShapeMismatchError(f"targets {targets.shape} vs outputs {trace.output.shape}")
    loss, dy = batch_loss_grad(trace.output, targets)
    dy = dy.reshape(dy.shape[0], -1)
    grads = {}
    for layer, cache in zip(reversed(params.layers), reversed(trace.caches)):
        dy, g = layer.backward(params, dy, cache)
        grads.update(g)
    return loss, grads


def penultimate_features(trace):
    return trace.features


def extract_last_layer(params):
    """The square final weight matrix ``W_L`` (columns are basis vectors)."""
    return params.arrays[FINAL_WEIGHT]


def extract_last_bias(params):
    return params.arrays[FINAL_BIAS]


def predict(params, x, batch_size=256):
    """Eval-mode outputs for an arbitrary number of inputs."""
    x = np.asarray(x, dtype=np.float64)
    outs = [forward(params, x[i:i + batch_size], "eval").output
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.empty((0,) + (params.cfg.out_channels,
                                                              params.cfg.height, params.cfg.width))


def predict_features(params, x, batch_size=256):
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([forward(params, x[i:i + batch_size], "eval").features
                           for i in range(0, len(x), batch_size)])
