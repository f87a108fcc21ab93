"""Shared oracles for the test modules."""

import numpy as np

from nrced.loss import batch_loss
from nrced.model import ModelConfig, backward, forward, init_params

TINY = ModelConfig(in_channels=2, out_channels=3, height=4, width=4, conv_channel_widths=(2, 3),
                   encoder_fc=(6,), bottleneck_dim=4, decoder_fc=(6,), dropout_rate=0.1,
                   batch_size=8)


def finite_difference_check(seed, cfg=TINY, batch=8, eps=1e-4):
    """Worst ``|analytic - central difference| / max(1, |analytic|)`` over every
    parameter coordinate.  Dropout masks are frozen by reseeding the generator
    for every evaluation."""
    params = init_params(cfg, seed)
    r = np.random.default_rng(1000 + seed)
    x = r.normal(size=(batch, cfg.in_channels, cfg.height, cfg.width))
    y = r.normal(size=(batch, cfg.out_channels, cfg.height, cfg.width))

    def loss():
        return batch_loss(forward(params, x, "train", np.random.default_rng(seed)).output, y)

    trace = forward(params, x, "train", np.random.default_rng(seed))
    _, grads = backward(params, trace, y)
    worst = 0.0
    for name, a in params.arrays.items():
        g = grads[name]
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + eps
            up = loss()
            a[i] = old - eps
            down = loss()
            a[i] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(g[i])))
    return worst


SMALL_PIPELINE = {
    "synth": {"n_patients": 2, "n_beats": 60},
    "model": {"conv_channel_widths": [4, 4], "encoder_fc": [16], "bottleneck_dim": 8,
              "decoder_fc": [16], "batch_size": 32},
    "experiment": {"mode": "patient_specific", "epochs": 2},
    "analysis": {"patient": "p00"},
}


def run_pipeline(root, seed=0, config=SMALL_PIPELINE):
    """synth -> preprocess -> train -> eval -> reconstruct -> analyze -> roc -> plot
    under ``root``; returns the list of exit codes."""
    import json
    from pathlib import Path

    from nrced.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    c, s = ["--config", str(cfg)], ["--seed", str(seed)]
    raw, beats, models = root / "raw", root / "beats", root / "models"
    ev, an, figs = root / "eval", root / "analysis", root / "figures"
    codes = [
        main(["synth", *c, *s, "--out", str(raw)]),
        main(["preprocess", *c, "--data", str(raw), "--out", str(beats)]),
        main(["train", *c, *s, "--data", str(beats), "--out", str(models)]),
        main(["eval", *c, "--data", str(beats), "--checkpoint", str(models), "--out", str(ev)]),
        main(["reconstruct", *c, "--data", str(beats), "--checkpoint", str(models / "p00.ckpt"),
              "--out", str(an)]),
        main(["analyze", *c, "--data", str(beats), "--checkpoint", str(models / "p00.ckpt"),
              "--out", str(an)]),
        main(["roc", *c, "--scores", str(an / "scores.csv"), "--out", str(an / "roc_cli")]),
        main(["plot", *c, "--data", str(ev), "--out", str(figs)]),
        main(["plot", *c, "--data", str(an), "--checkpoint", str(models / "p00.ckpt"),
              "--out", str(figs / "analysis")]),
    ]
    return codes
