"""Experiment orchestration: cross-domain runs, persisted metrics and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import demix, meta, sigproc, tscan
from .dataset import load_dataset
from .tensorcore import load_params, save_params
from .tscan import TsCanConfig

log = logging.getLogger(__name__)

MODES = ("supervised", "unsupervised", "no-pretrain", "finetune", "pretrained-only", "pos", "chrom", "ica")
NETWORK_MODES = MODES[:5]
WINDOW_FIELDS = ("subject", "skin_type", "window", "start", "end", "est_hr", "gold_hr", "abs_err", "snr")
INCOMPLETE = "INCOMPLETE"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one run.  ``seed`` has no default on purpose."""

    test: str
    mode: str
    seed: int
    out_dir: str
    pretrain: str | None = None
    meta_train: str | None = None
    meta: dict = field(default_factory=dict)
    pretrain_config: dict = field(default_factory=dict)
    net: dict = field(default_factory=dict)
    eval_start: int | None = None
    finetune_steps: int = 1
    finetune_lr: float = 0.005
    checkpoint_dir: str | None = None
    allow_same_dataset: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ValueError("seed must be an integer")
        if self.mode in ("supervised", "unsupervised", "finetune", "pretrained-only") and not self.pretrain:
            raise ValueError(f"mode {self.mode!r} needs a pretrain dataset")
        if self.mode in ("supervised", "unsupervised", "no-pretrain") and not self.meta_train:
            raise ValueError(f"mode {self.mode!r} needs a meta-train dataset")
        if not self.allow_same_dataset:
            for other in (self.meta_train, self.pretrain):
                if other and Path(other).resolve() == Path(self.test).resolve():
                    raise ValueError(f"test dataset {self.test} is also used for training; "
                                     "set allow_same_dataset to override")
        self.meta_config()
        self.net_config()

    def meta_config(self):
        overrides = dict(self.meta)
        # the fine-tuning baseline is the supervised personalization reference
        overrides.setdefault("supervised", self.mode in ("supervised", "finetune"))
        return meta.MetaConfig(**overrides)

    def net_config(self):
        base = dataclasses.asdict(meta.default_net())
        base.update(self.net)
        base["channels"] = tuple(base["channels"])
        return TsCanConfig(**base)

    def pretrain_settings(self):
        return meta.PretrainConfig(**self.pretrain_config)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_disjoint(train, test):
    """Cross-dataset guard: no subject id may appear on both sides."""
    shared = {s.id for s in train} & {s.id for s in test}
    if shared:
        raise ValueError(f"subjects shared between training and test data: {sorted(shared)}")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True)


def _digest(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(_jsonable(p), sort_keys=True).encode())
    return h.hexdigest()[:16]


def pretrained_params(dataset, net, settings, seed, cache_dir=None):
    """Pretrain, reusing a cached checkpoint keyed on data, configs and seed."""
    path = None
    if cache_dir:
        key = _digest((dataset.root / "manifest.json").read_bytes(), dataclasses.asdict(net),
                      dataclasses.asdict(settings), int(seed))
        path = Path(cache_dir) / f"pretrain-{key}.pbp"
        if path.exists():
            curve = json.loads(path.with_suffix(".json").read_text())
            return load_params(path), curve
    params, curve = meta.pretrain(dataset, net, settings, seed=seed)
    if path:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_params(params, path)
        path.with_suffix(".json").write_text(json.dumps(curve))
    return params, curve


@dataclass
class RunResult:
    report: sigproc.MetricsReport
    out_dir: Path
    metrics: dict


class _Run:
    """Stage bookkeeping: every failure is re-raised tagged with the stage name."""

    def __init__(self):
        self.stage = None
        self.timings = {}

    def __call__(self, stage):
        self.stage = stage
        return self

    def __enter__(self):
        self._t = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.stage] = round(time.perf_counter() - self._t, 3)
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.stage, ev) from ev
        return False


def _network_outputs(spec, mc, net, test, run, out):
    """Train (as the mode requires), then personalize and predict per test subject."""
    seed = spec.seed
    params = None
    if spec.mode != "no-pretrain":
        with run("load-pretrain"):
            pre = load_dataset(spec.pretrain)
            if not spec.allow_same_dataset:
                check_disjoint(pre, test)
        with run("pretrain"):
            params, curve = pretrained_params(pre, net, spec.pretrain_settings(), seed, spec.checkpoint_dir)
            (out / "pretrain_curve.json").write_text(json.dumps(curve))
    else:
        params = tscan.init_tscan(net, seed)

    adapt = spec.mode in ("supervised", "unsupervised", "no-pretrain")
    if adapt:
        with run("load-meta-train"):
            mt = load_dataset(spec.meta_train)
            if not spec.allow_same_dataset:
                check_disjoint(mt, test)
        with run("meta-train"):
            tasks = meta.make_tasks(mt, mc, net)
            params, mlog = meta.meta_train(tasks, params, mc, net, seed=seed)
            mlog.write(out / "meta_log.jsonl")
    save_params(params, out / "global.pbp")

    start = meta.evaluation_start(mc, spec.eval_start)
    outputs = {}
    with run("adapt"):
        for s in test:
            frames = s.frames
            p = params
            gold = s.gold if mc.supervised else None
            if adapt:
                p = meta.test_adapt(params, frames, mc, net, gold=gold)
            elif spec.mode == "finetune":
                clips, rows = meta.support_set(frames, mc, net, gold)
                p = meta.fine_tune_baseline(params, clips, rows, net, spec.finetune_steps, spec.finetune_lr)
            outputs[s.id] = tscan.predict_derivative(p, frames[start:], net)
    return outputs, start, True


def _demixer_outputs(spec, mc, test, run):
    start = meta.evaluation_start(mc, spec.eval_start)
    outputs = {}
    with run("demix"):
        for s in test:
            trace = demix.spatial_average(s.frames[start:])
            outputs[s.id] = demix.DEMIXERS[spec.mode](trace).values
    return outputs, start, False


def run_experiment(spec):
    """Execute ``spec`` end to end and persist per-window metrics and summaries."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("run in progress or failed\n")
    run = _Run()
    mc = spec.meta_config()
    net = spec.net_config()
    with run("load-test"):
        test = load_dataset(spec.test)
        if spec.meta_train and not spec.allow_same_dataset:
            check_disjoint(load_dataset(spec.meta_train), test)
    if spec.mode in NETWORK_MODES:
        outputs, start, is_deriv = _network_outputs(spec, mc, net, test, run, out)
    else:
        outputs, start, is_deriv = _demixer_outputs(spec, mc, test, run)

    with run("evaluate"):
        windows = []
        for s in test:
            gold = s.gold
            if gold is None:
                raise ValueError(f"subject {s.id}: evaluation needs a gold trace")
            windows += sigproc.evaluate_windows(outputs[s.id], gold.values[start:], test.fps,
                                                is_derivative=is_deriv, offset=start,
                                                skin_type=s.skin_type, subject=s.id)
        report = sigproc.MetricsReport(windows)

    with run("write"):
        metrics = write_artifacts(out, spec, report, mc, net)
        manifest = {"spec": spec.to_dict(), "meta_config": dataclasses.asdict(mc),
                    "net_config": dataclasses.asdict(net),
                    "pretrain_config": dataclasses.asdict(spec.pretrain_settings()),
                    "seed": spec.seed, "evaluation_start": start,
                    "datasets": {"test": test.name, "pretrain": spec.pretrain, "meta_train": spec.meta_train},
                    "timings_s": run.timings, "status": "complete"}
        (out / "run_manifest.json").write_text(_dumps(manifest))
    marker.unlink()
    return RunResult(report, out, metrics)


def _summary(report):
    if not report.windows:
        return {"n_windows": 0}
    return report.summary()


def metrics_dict(spec, report):
    return {"mode": spec.mode, "seed": spec.seed, "overall": _summary(report),
            "by_skin_type": {k: _summary(v) for k, v in sorted(report.by_skin_type().items())}}


def write_artifacts(out, spec, report, mc=None, net=None):
    out = Path(out)
    metrics = _jsonable(metrics_dict(spec, report))
    (out / "metrics.json").write_text(_dumps(metrics))
    with open(out / "windows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WINDOW_FIELDS)
        for hw in report.windows:
            w.writerow([hw.subject, hw.skin_type, hw.index, hw.frames[0], hw.frames[1],
                        repr(hw.est_hr), repr(hw.gold_hr), repr(abs(hw.est_hr - hw.gold_hr)), repr(hw.snr)])
    with open(out / "bland_altman.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "window", "mean_hr", "diff_hr"])
        for hw in report.windows:
            w.writerow([hw.subject, hw.index, repr((hw.est_hr + hw.gold_hr) / 2), repr(hw.est_hr - hw.gold_hr)])
    write_skin_table(out / "skin_types.csv", report)
    return metrics


def write_skin_table(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["skin_type", "n_windows", "mae", "rmse", "rho", "snr"])
        for k, r in sorted(report.by_skin_type().items()):
            s = r.summary()
            w.writerow([k, s["n_windows"], repr(s["mae"]), repr(s["rmse"]), repr(s["rho"]), repr(s["snr"])])


# -- reporting ---------------------------------------------------------------

def read_windows(run_dir):
    path = Path(run_dir) / "windows.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [sigproc.HrWindow(int(r["window"]), float(r["est_hr"]), float(r["gold_hr"]), float(r["snr"]),
                             (int(r["start"]), int(r["end"])), r["skin_type"] or None, r["subject"])
            for r in rows]


def load_run(run_dir):
    run_dir = Path(run_dir)
    missing = [n for n in ("windows.csv", "metrics.json", "run_manifest.json") if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir}: missing artifacts {missing}")
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    return manifest["spec"]["mode"], sigproc.MetricsReport(read_windows(run_dir))


def _fmt(x):
    return "   nan" if x is None or (isinstance(x, float) and not math.isfinite(x)) else f"{x:6.2f}"


def report(run_dirs, csv_path=None):
    """Summary table recomputed from each run's per-window CSV.

    With several runs, also prints each run's deltas against the first.
    """
    if isinstance(run_dirs, (str, Path)):
        run_dirs = [run_dirs]
    runs = [(Path(d), *load_run(d)) for d in run_dirs]
    buf = io.StringIO()
    rows = []
    buf.write(f"{'run':24s} {'mode':16s} {'n':>4s} {'MAE':>6s} {'RMSE':>6s} {'rho':>6s} {'SNR':>6s}\n")
    for d, mode, rep in runs:
        s = rep.summary()
        rows.append({"run": d.name, "mode": mode, "skin_type": "all", **s})
        buf.write(f"{d.name[:24]:24s} {mode:16s} {s['n_windows']:4d} {_fmt(s['mae'])} {_fmt(s['rmse'])} "
                  f"{_fmt(s['rho'])} {_fmt(s['snr'])}\n")
        for k, r in sorted(rep.by_skin_type().items()):
            ks = r.summary()
            rows.append({"run": d.name, "mode": mode, "skin_type": k, **ks})
            buf.write(f"{'':24s} {'  ' + str(k):16s} {ks['n_windows']:4d} {_fmt(ks['mae'])} "
                      f"{_fmt(ks['rmse'])} {_fmt(ks['rho'])} {_fmt(ks['snr'])}\n")
    if len(runs) > 1:
        base = runs[0][2].summary()
        buf.write(f"\ndeltas vs {runs[0][0].name} ({runs[0][1]}):\n")
        for d, mode, rep in runs[1:]:
            s = rep.summary()
            buf.write(f"{d.name[:24]:24s} {mode:16s} dMAE {s['mae'] - base['mae']:+.2f} "
                      f"dRMSE {s['rmse'] - base['rmse']:+.2f} dSNR {s['snr'] - base['snr']:+.2f}\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["run", "mode", "skin_type", "n_windows", "mae", "rmse", "rho", "snr"])
            w.writeheader()
            w.writerows(rows)
    return buf.getvalue()
