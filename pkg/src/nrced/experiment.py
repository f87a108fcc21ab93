"""Splitting, training, time-domain evaluation and the four experiment protocols."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as nmodel
from . import nn
from .dataset import BeatDataset, concat
from .loss import batch_loss, rowwise_corr
from .optim import adam_init, adam_step
from .tfrepr import DEFAULT_STFT, consistent_offset, tf_inverse

log = logging.getLogger(__name__)

MODES = ("patient_specific", "single_lead", "leave_one_out", "reverse")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    mode: str = "patient_specific"
    patients: tuple = ()  # empty means every available patient
    lead: int = 0  # EGM channel kept in single_lead mode
    epochs: int = 50
    seed: int = 0
    split_ratio: float = 0.5
    early_stop_patience: int = 5
    early_stop_tol: float = 1e-4

    def __post_init__(self):
        self.patients = tuple(self.patients)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")

    @property
    def direction(self):
        return "reverse" if self.mode == "reverse" else "forward"

    def to_dict(self):
        d = asdict(self)
        d["patients"] = list(self.patients)
        d["direction"] = self.direction
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("direction", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)


def split_dataset(ds, ratio=0.5, seed=0):
    """Random disjoint partition; the first part has ``ceil(ratio * N)`` beats.

    Each part keeps temporal order, so the shuffle only decides membership.
    """
    n = len(ds)
    if n < 2:
        raise ValueError("need at least two beats to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(max(math.ceil(ratio * n), 1), n - 1)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def io_arrays(ds, spec):
    """Inputs and targets for a dataset under the experiment's mode."""
    if spec.mode == "reverse":
        return ds.ecg, ds.egm
    if spec.mode == "single_lead":
        m = ds.egm.shape[1] // 2
        if not 0 <= spec.lead < m:
            raise ValueError(f"lead {spec.lead} out of range for {m} EGM channels")
        return ds.egm[:, [spec.lead, m + spec.lead]], ds.ecg
    return ds.egm, ds.ecg


def model_config_for(spec, ds, base=None):
    """Adapt channel counts of ``base`` to the data and the mode."""
    x, y = io_arrays(ds.subset([0]), spec)
    base = base or nmodel.ModelConfig()
    return replace(base, in_channels=x.shape[1], out_channels=y.shape[1],
                   height=x.shape[2], width=x.shape[3])


@dataclass
class TrainingLog:
    initial_loss: float
    epoch_loss: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    @property
    def final_loss(self):
        return self.epoch_loss[-1] if self.epoch_loss else self.initial_loss

    def to_dict(self):
        return {"initial_loss": self.initial_loss, "epoch_loss": list(self.epoch_loss),
                "steps": self.steps, "stopped_early": self.stopped_early}

    @classmethod
    def from_dict(cls, d):
        return cls(d["initial_loss"], list(d["epoch_loss"]), d["steps"], d["stopped_early"])


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, math.ceil(n / batch_size)))


def _mean_loss(params, x, y, batch_size, rng):
    """Train-mode loss without updates (batch statistics, dropout on)."""
    total = 0.0
    for idx in _batches(len(x), batch_size, rng):
        trace = nmodel.forward(params, x[idx], "train", rng)
        total += batch_loss(trace.output, y[idx]) * len(idx)
    return total / len(x)


def train(x, y, cfg, epochs=50, seed=0, patience=5, tol=1e-4, params=None):
    """Minimize the batch loss with Adam on inputs ``x`` and targets ``y``.

    Returns ``(params, TrainingLog)``.  Stops early when the epoch loss has
    improved by less than ``tol`` over the last ``patience`` epochs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    params = nmodel.init_params(cfg, seed) if params is None else params
    rng = np.random.default_rng([seed, 7])
    eval_rng = np.random.default_rng([seed, 11])
    state = adam_init(params.arrays, lr=cfg.learning_rate)
    tlog = TrainingLog(_mean_loss(params, x, y, cfg.batch_size, eval_rng))
    log.info("initial loss %.6f", tlog.initial_loss)
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(x), cfg.batch_size, rng):
            trace = nmodel.forward(params, x[idx], "train", rng)
            loss, grads = nmodel.backward(params, trace, y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, step {tlog.steps}")
            adam_step(params.arrays, grads, state)
            nn.update_running_stats(params.layers, params.state, trace.bn_stats, cfg.bn_momentum)
            params.step += 1
            tlog.steps += 1
            total += loss * len(idx)
        tlog.epoch_loss.append(total / len(x))
        log.info("epoch %d loss %.6f", epoch + 1, tlog.epoch_loss[-1])
        hist = tlog.epoch_loss
        if len(hist) > patience and hist[-patience - 1] - min(hist[-patience:]) < tol:
            tlog.stopped_early = True
            break
    return params, tlog


@dataclass
class EvalResult:
    rho: np.ndarray  # (N,) per-beat correlation over all leads
    per_lead: np.ndarray  # (N, M) per-beat, per-lead correlation
    reconstructed: np.ndarray  # (N, M, T) time-domain estimates
    truth: np.ndarray

    def summary(self):
        return {"mean_rho": float(self.rho.mean()), "min_rho": float(self.rho.min()),
                "max_rho": float(self.rho.max()),
                "per_lead_rho": [float(v) for v in self.per_lead.mean(axis=0)]}


def time_domain_correlation(estimate, truth):
    """Per-beat and per-lead Pearson correlation of ``(N, M, T)`` beats."""
    n, m, t = truth.shape
    rho = rowwise_corr(estimate.reshape(n, -1), truth.reshape(n, -1))
    per_lead = rowwise_corr(estimate.reshape(n * m, t), truth.reshape(n * m, t)).reshape(n, m)
    return rho, per_lead


def evaluate_time_domain(params, x, y, stft_cfg=DEFAULT_STFT):
    """Predict, invert the transform and correlate against the true beats.

    The prediction's free additive constant is fixed by
    :func:`nrced.tfrepr.consistent_offset` before inversion.
    """
    est = tf_inverse(consistent_offset(nmodel.predict(params, x), stft_cfg), stft_cfg)
    truth = tf_inverse(np.asarray(y, dtype=np.float64), stft_cfg)
    rho, per_lead = time_domain_correlation(est, truth)
    return EvalResult(rho, per_lead, est, truth)


@dataclass
class MetricsReport:
    spec: dict
    per_patient: dict
    training_log: dict

    def to_dict(self):
        return {"spec": self.spec, "per_patient": self.per_patient, "training_log": self.training_log}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        missing = {"spec", "per_patient", "training_log"} - set(d)
        if missing:
            raise ValueError(f"metrics report lacks {sorted(missing)}")
        return cls(d["spec"], d["per_patient"], d["training_log"])

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()


@dataclass
class ExperimentResult:
    report: MetricsReport
    params: dict  # run id -> ModelParams
    evals: dict  # patient id -> EvalResult


def run_experiment(spec, datasets, base_cfg=None, stft_cfg=DEFAULT_STFT):
    """Run one protocol over ``datasets`` (a list of :class:`BeatDataset`)."""
    by_id = {d.patient_id: d for d in datasets}
    ids = list(spec.patients) or sorted(by_id)
    missing = [p for p in ids if p not in by_id]
    if missing:
        raise KeyError(f"no data for patients {missing}")
    per_patient, logs, params_out, evals = {}, {}, {}, {}

    def fit(run_id, train_ds):
        x, y = io_arrays(train_ds, spec)
        cfg = model_config_for(spec, train_ds, base_cfg)
        params, tlog = train(x, y, cfg, spec.epochs, spec.seed,
                             spec.early_stop_patience, spec.early_stop_tol)
        logs[run_id] = tlog.to_dict()
        params_out[run_id] = params
        return params

    def score(pid, params, test_ds):
        x, y = io_arrays(test_ds, spec)
        res = evaluate_time_domain(params, x, y, stft_cfg)
        evals[pid] = res
        per_patient[pid] = res.summary()
        log.info("%s mean rho %.4f", pid, per_patient[pid]["mean_rho"])

    if spec.mode == "leave_one_out":
        if len(ids) < 2:
            raise ValueError("leave_one_out needs at least two patients")
        for held in ids:
            pool = concat([by_id[p] for p in ids if p != held])
            score(held, fit(held, pool), by_id[held])
    else:
        for pid in ids:
            tr, te = split_dataset(by_id[pid], spec.split_ratio, spec.seed)
            score(pid, fit(pid, tr), te)
    report = MetricsReport(spec.to_dict(), per_patient, logs)
    return ExperimentResult(report, params_out, evals)
