"""``nrced`` command line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .basis import (DEFAULT_LAMBDA, RegressionBasis, classify_beats, cross_corr_matrix,
                    reference_index, ridge_reconstruct, roc_curve, sparsity_report)
from .dataset import BeatDataset, list_patients
from .dsp import (ECG_LEADS, EGM_LEADS, LABEL_ATYPICAL, LABEL_UNLABELED, PreprocessConfig,
                  PreprocessError, attach_labels, preprocess_recording, read_recording)
from .experiment import (ExperimentSpec, MetricsReport, evaluate_time_domain, io_arrays,
                         run_experiment, split_dataset)
from .formats import (FormatError, atomic_write_text, read_beat_tensors, read_checkpoint,
                      write_beat_tensors, write_checkpoint)
from .model import ModelConfig, extract_last_layer
from .synth import SynthPatientConfig, generate_dataset, make_cohort, read_labels
from .tfrepr import STFTConfig

log = logging.getLogger("nrced")

COMMANDS = ("synth", "preprocess", "train", "eval", "reconstruct", "analyze", "roc", "plot")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    data: str = None
    out: str = None
    checkpoint: str = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    synth: dict = field(default_factory=dict)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    stft: STFTConfig = field(default_factory=STFTConfig)
    analysis: dict = field(default_factory=dict)

    ANALYSIS_KEYS = ("patient", "lam", "threshold")
    SYNTH_KEYS = ("patients", "n_patients", "n_beats", "family_seed", "overrides")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "experiment" in d:
                d["experiment"] = ExperimentSpec.from_dict(d["experiment"])
            if "preprocess" in d:
                pp = d["preprocess"]
                bad = set(pp) - {f.name for f in fields(PreprocessConfig)}
                if bad:
                    raise ValueError(f"unknown preprocess keys: {sorted(bad)}")
                d["preprocess"] = PreprocessConfig(**pp)
            if "stft" in d:
                bad = set(d["stft"]) - {"window_len", "hop", "source_len", "pad_left", "pad_right"}
                if bad:
                    raise ValueError(f"unknown stft keys: {sorted(bad)}")
                d["stft"] = STFTConfig(**d["stft"])
            for key, allowed in (("analysis", cls.ANALYSIS_KEYS), ("synth", cls.SYNTH_KEYS)):
                bad = set(d.get(key, {})) - set(allowed)
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise DataError(f"{path}: top level must be an object")
        return cls.from_dict(d)


def _build_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for name in ("data", "out", "checkpoint"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _need_dir(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory not found: {p}")
    return p


def _need_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _out_dir(cfg):
    if cfg.out is None:
        raise UsageError("--out is required")
    return Path(cfg.out)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_datasets(data_dir, patients=()):
    ids = list(patients) or list_patients(data_dir)
    if not ids:
        raise DataError(f"no beat-tensor files (*.egm.nrcd) in {data_dir}")
    return [BeatDataset.load(data_dir, pid) for pid in ids]


def _checkpoints(path):
    path = Path(path)
    files = sorted(path.glob("*.ckpt")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no checkpoints in {path}")
    return [(f, *read_checkpoint(f)) for f in files]


def _csv_matrix(a):
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in a)


# ------------------------------------------------------------------ commands


def cmd_synth(cfg, args):
    out = _out_dir(cfg)
    s = cfg.synth
    if "patients" in s:
        configs = [SynthPatientConfig.from_dict(p) for p in s["patients"]]
    else:
        try:
            configs = make_cohort(s.get("n_patients", 1), s.get("n_beats", 1000), seed=cfg.seed,
                                  family_seed=s.get("family_seed", 0), **s.get("overrides", {}))
        except TypeError as exc:
            raise DataError(f"bad synth overrides: {exc}") from exc
    results = generate_dataset(configs, out)
    for c, r in zip(configs, results):
        log.info("%s: %d beats, %d atypical", c.patient_id, len(r.r_peaks),
                 int((r.labels == LABEL_ATYPICAL).sum()))
    return 0


def cmd_preprocess(cfg, args):
    data = _need_dir(cfg.data, "data")
    out = _out_dir(cfg)
    csvs = sorted(p for p in data.glob("*.csv") if not p.name.startswith("labels_"))
    if not csvs:
        raise DataError(f"no recordings (*.csv) in {data}")
    summary = {}
    for csv_path in csvs:
        rec = read_recording(csv_path)
        beats = preprocess_recording(rec, cfg.preprocess)
        labels_path = data / f"labels_{rec.patient_id}.csv"
        if labels_path.exists():
            attach_labels(beats, *read_labels(labels_path))
        ds = BeatDataset.from_beats(beats, cfg.stft)
        ds.save(out)
        summary[rec.patient_id] = {"beats": len(ds), "dropped": int(beats.dropped),
                                   "labeled": int((ds.labels != LABEL_UNLABELED).sum())}
    atomic_write_text(out / "preprocess.json", _dump(summary))
    return 0


def cmd_train(cfg, args):
    data = _need_dir(cfg.data, "data")
    out = _out_dir(cfg)
    spec = cfg.experiment
    if args.seed is not None:
        spec.seed = cfg.seed
    datasets = _load_datasets(data, spec.patients)
    result = run_experiment(spec, datasets, cfg.model, cfg.stft)
    for run_id, params in result.params.items():
        extra = {"run_id": run_id, "spec": spec.to_dict(), "stft": cfg.stft.to_dict(),
                 "training_log": result.report.training_log[run_id],
                 "train_patients": [d.patient_id for d in datasets]
                 if spec.mode == "leave_one_out" else [run_id]}
        write_checkpoint(out / f"{run_id}.ckpt", params, extra)
    atomic_write_text(out / "training_log.json", _dump(result.report.training_log))
    return 0


def cmd_eval(cfg, args):
    data = _need_dir(cfg.data, "data")
    ckpt = _need_file(cfg.checkpoint, "checkpoint")
    out = _out_dir(cfg)
    per_patient, logs, spec_d = {}, {}, None
    for path, params, extra in _checkpoints(ckpt):
        spec = ExperimentSpec.from_dict(extra["spec"])
        stft = STFTConfig(**extra.get("stft", {}))
        pid = extra["run_id"]
        ds = BeatDataset.load(data, pid)
        test = ds if spec.mode == "leave_one_out" else split_dataset(ds, spec.split_ratio, spec.seed)[1]
        x, y = io_arrays(test, spec)
        res = evaluate_time_domain(params, x, y, stft)
        per_patient[pid] = res.summary()
        logs[pid] = extra.get("training_log", {})
        spec_d = extra["spec"]
        est = res.reconstructed[:, :, None, :]
        tru = res.truth[:, :, None, :]
        write_beat_tensors(out / "estimates" / f"{pid}.est.nrcd", est, test.r_peaks, test.labels)
        write_beat_tensors(out / "estimates" / f"{pid}.true.nrcd", tru, test.r_peaks, test.labels)
        log.info("%s: mean rho %.4f", pid, per_patient[pid]["mean_rho"])
    report = MetricsReport(spec_d, per_patient, logs)
    atomic_write_text(out / "metrics.json", report.to_json())
    return 0


def _basis(cfg, path):
    entries = _checkpoints(path)
    if len(entries) != 1:
        raise DataError("reconstruct and analyze need exactly one checkpoint file")
    f, params, extra = entries[0]
    lam = float(cfg.analysis.get("lam", DEFAULT_LAMBDA))
    src = {"checkpoint": f.name, "train_patients": extra.get("train_patients", [])}
    stft = STFTConfig(**extra.get("stft", {}))
    return RegressionBasis.from_params(params, lam, src), stft, extra


def cmd_reconstruct(cfg, args):
    data = _need_dir(cfg.data, "data")
    ckpt = _need_file(cfg.checkpoint, "checkpoint")
    out = _out_dir(cfg)
    basis, stft, extra = _basis(cfg, ckpt)
    reverse = extra.get("spec", {}).get("mode") == "reverse"
    per_patient = {}
    for ds in _load_datasets(data):
        rec = ridge_reconstruct(basis, ds.egm if reverse else ds.ecg, stft)
        per_patient[ds.patient_id] = {
            "mean_rho": float(rec.rho.mean()), "min_rho": float(rec.rho.min()),
            "max_rho": float(rec.rho.max()),
            "per_lead_rho": [float(v) for v in rec.per_lead.mean(axis=0)],
            "max_residual": float(rec.residuals.max())}
    sp = sparsity_report(basis.weight)
    report = {"lambda": basis.lam, "source": basis.source, "per_patient": per_patient,
              "sparsity": {k: v for k, v in sp.items() if k != "per_column"}}
    atomic_write_text(out / "reconstruct.json", _dump(report))
    return 0


def cmd_analyze(cfg, args):
    data = _need_dir(cfg.data, "data")
    ckpt = _need_file(cfg.checkpoint, "checkpoint")
    out = _out_dir(cfg)
    basis, stft, _ = _basis(cfg, ckpt)
    pid = cfg.analysis.get("patient")
    if pid is None:
        ids = list_patients(data)
        if not ids:
            raise DataError(f"no beat-tensor files in {data}")
        pid = ids[0]
    ds = BeatDataset.load(data, pid)
    if len(ds) < 2:
        raise DataError("analysis needs at least two beats")
    rec = ridge_reconstruct(basis, ds.ecg, stft)
    ccm = cross_corr_matrix(rec.betas)
    ref = reference_index(ccm)
    sim = ccm.rescaled[ref]
    write_beat_tensors(out / "betas.nrcd-beta", rec.betas[:, None, None, :], ds.r_peaks, ds.labels)
    atomic_write_text(out / "ccm.csv", _csv_matrix(ccm.rho))
    lines = ["beat_index,r_peak_index,label,score"]
    lines += [f"{i},{int(r)},{int(l)},{float(s)!r}" for i, (r, l, s) in
              enumerate(zip(ds.r_peaks, ds.labels, sim))]
    atomic_write_text(out / "scores.csv", "\n".join(lines) + "\n")
    report = {"patient_id": pid, "n_beats": len(ds), "reference_index": ref,
              "lambda": basis.lam, "max_residual": float(rec.residuals.max()),
              "mean_rho": float(rec.rho.mean())}
    known = ds.labels != LABEL_UNLABELED
    y = ds.labels[known] == LABEL_ATYPICAL
    if known.any() and 0 < y.sum() < y.size:
        curve = roc_curve(sim[known], y, lower_is_positive=True)
        thr = float(cfg.analysis.get("threshold", curve.best_threshold()))
        pred = classify_beats(ccm, ref, thr)[known]
        report.update({"auc": curve.auc, "threshold": thr,
                       "accuracy": float((pred == y).mean())})
        _write_roc_csv(out / "roc.csv", curve)
    else:
        report["auc"] = None
        atomic_write_text(out / "roc.csv", "threshold,fpr,tpr\n")
    atomic_write_text(out / "report.json", _dump(report))
    return 0


def _write_roc_csv(path, curve):
    rows = ["threshold,fpr,tpr"]
    rows += [f"{float(t)!r},{float(f)!r},{float(p)!r}"
             for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)]
    atomic_write_text(path, "\n".join(rows) + "\n")


def _read_scores(path):
    rows = Path(path).read_text().strip().splitlines()
    header = rows[0].split(",") if rows else []
    if "score" not in header or "label" not in header:
        raise DataError(f"{path}: needs 'score' and 'label' columns")
    si, li = header.index("score"), header.index("label")
    table = [r.split(",") for r in rows[1:]]
    try:
        scores = np.array([float(r[si]) for r in table])
        labels = np.array([int(r[li]) for r in table])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return scores, labels


def cmd_roc(cfg, args):
    path = _need_file(args.scores or (Path(cfg.data) / "scores.csv" if cfg.data else None), "scores")
    out = _out_dir(cfg)
    scores, labels = _read_scores(path)
    keep = labels != LABEL_UNLABELED
    curve = roc_curve(scores[keep], labels[keep] == LABEL_ATYPICAL,
                      lower_is_positive=not args.higher_is_positive)
    _write_roc_csv(out / "roc.csv", curve)
    atomic_write_text(out / "roc.json", _dump({"auc": curve.auc,
                                                "best_threshold": curve.best_threshold()}))
    return 0


def cmd_plot(cfg, args):
    from . import plots

    data = _need_dir(cfg.data, "data")
    out = _out_dir(cfg)
    jobs = []  # validated before anything is written
    metrics = data / "metrics.json"
    if metrics.exists():
        report = MetricsReport.from_json(metrics.read_text())
        if not report.per_patient:
            raise DataError(f"{metrics}: report has no patients")
        jobs.append(lambda: plots.correlation_bars(report.per_patient, out / "correlation_bars"))
        for pid in sorted(report.per_patient):
            est_p = data / "estimates" / f"{pid}.est.nrcd"
            tru_p = data / "estimates" / f"{pid}.true.nrcd"
            if est_p.exists() and tru_p.exists():
                est, _, _ = read_beat_tensors(est_p)
                tru, _, _ = read_beat_tensors(tru_p)
                rho = np.array([np.corrcoef(a.ravel(), b.ravel())[0, 1] for a, b in zip(est, tru)])
                i = int(np.argsort(rho)[len(rho) // 2])  # the median beat
                names = ECG_LEADS if est.shape[1] == len(ECG_LEADS) else EGM_LEADS[:est.shape[1]]
                jobs.append(lambda e=est[i, :, 0], t=tru[i, :, 0], n=names, p=pid, j=i:
                            plots.lead_overlay(t, e, n, out / f"overlay_{p}", title=f"{p} beat {j}"))
    betas = data / "betas.nrcd-beta"
    if betas.exists():
        b = read_beat_tensors(betas)[0][:, 0, 0, :]
        jobs.append(lambda: plots.matrix_heatmap(b, out / "beta_heatmap", "ridge coefficients",
                                                 xlabel="coefficient", ylabel="beat"))
    ccm = data / "ccm.csv"
    if ccm.exists():
        c = np.loadtxt(ccm, delimiter=",", ndmin=2)
        jobs.append(lambda: plots.matrix_heatmap((c + 1) / 2, out / "ccm_heatmap",
                                                 "rescaled cross-correlation", cmap="magma",
                                                 xlabel="beat", ylabel="beat"))
    roc = data / "roc.csv"
    if roc.exists():
        rows = roc.read_text().strip().splitlines()[1:]
        if rows:
            arr = np.array([[float(v) for v in r.split(",")] for r in rows])
            from .basis import RocCurve
            fpr, tpr = arr[:, 1], arr[:, 2]
            auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
            curve = RocCurve(arr[:, 0], fpr, tpr, auc)
            jobs.append(lambda: plots.roc_plot(curve, out / "roc"))
    if cfg.checkpoint:
        ck = _need_file(cfg.checkpoint, "checkpoint")
        w = extract_last_layer(_checkpoints(ck)[0][1])
        jobs.append(lambda: plots.matrix_heatmap(w, out / "weight_heatmap", "|W_L| (log scale)",
                                                 log_scale=True, cmap="gray_r"))
    if not jobs:
        raise DataError(f"nothing to plot in {data}")
    for job in jobs:
        job()
    return 0


HANDLERS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "reconstruct": cmd_reconstruct, "analyze": cmd_analyze,
            "roc": cmd_roc, "plot": cmd_plot}


# ------------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--data", default=argparse.SUPPRESS, help="input directory")
    common.add_argument("--checkpoint", default=argparse.SUPPRESS, help="checkpoint file or directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap on BLAS threads")

    parser = _Parser(prog="nrced", parents=[common],
                     description="EGM to ECG encoder-decoder pipeline.")
    parser.add_argument("--version", action="version", version=f"nrced {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic cohort (CSV recordings + labels)",
        "preprocess": "filter, segment and transform recordings into beat tensors",
        "train": "train models for the configured experiment",
        "eval": "time-domain evaluation of trained checkpoints",
        "reconstruct": "ridge reconstruction of every beat with the final-layer basis",
        "analyze": "ridge coefficients, cross-correlation and atypical-beat ROC",
        "roc": "ROC curve from a scores CSV",
        "plot": "SVG figures with sibling CSVs",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "roc":
            p.add_argument("--scores", help="CSV with score and label columns")
            p.add_argument("--higher-is-positive", action="store_true",
                           help="treat high scores as atypical (default: low similarity)")
    return parser


def _configure_logging():
    level = os.environ.get("NRCED_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be positive")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError as exc:
        raise UsageError("--threads needs threadpoolctl (pip install nrced[threads])") from exc
    return threadpool_limits(limits=n)


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        for name in ("config", "seed", "out", "data", "checkpoint", "threads"):
            if not hasattr(args, name):
                setattr(args, name, None)
        for name in ("scores", "higher_is_positive"):
            if not hasattr(args, name):
                setattr(args, name, None)
        with _thread_limit(args.threads):
            cfg = _build_config(args)
            return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(f"nrced: error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except (DataError, PreprocessError, FormatError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"nrced: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
