"""Command-line entry point: ``pulsebench <command> ...``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import demix, harness, meta, sigproc, synth, tscan
from .dataset import load_dataset
from .tensorcore import load_params, save_params


def _add_net(p):
    g = p.add_argument_group("network")
    g.add_argument("--resolution", type=int, help="input resolution (pixels)")
    g.add_argument("--channels", type=int, nargs="+", help="conv channels per stage")
    g.add_argument("--hidden", type=int, help="dense head width")


def _add_meta(p):
    g = p.add_argument_group("meta-learning")
    g.add_argument("--inner-lr", type=float)
    g.add_argument("--outer-lr", type=float)
    g.add_argument("--inner-steps", type=int)
    g.add_argument("--meta-epochs", type=int, dest="epochs")
    g.add_argument("--support-frames", type=int)
    g.add_argument("--meta-batch", type=int)
    g.add_argument("--query-clips", type=int)
    g.add_argument("--inner-loss-scale", type=float, help="multiplier on the support MSE in the inner step")
    g.add_argument("--supervised", action="store_true", default=None)
    g.add_argument("--freeze-motion", action="store_true", default=None)
    g.add_argument("--pseudo-method", choices=sorted(demix.DEMIXERS))


def _add_pretrain(p):
    g = p.add_argument_group("pretraining")
    g.add_argument("--pretrain-epochs", type=int)
    g.add_argument("--pretrain-lr", type=float)
    g.add_argument("--batch-clips", type=int)


def _net_overrides(a):
    out = {}
    if a.resolution is not None:
        out["input_resolution"] = a.resolution
    if a.channels:
        out["channels"] = tuple(a.channels)
    if a.hidden is not None:
        out["hidden"] = a.hidden
    return out


def _meta_overrides(a):
    keys = ("inner_lr", "outer_lr", "inner_steps", "epochs", "support_frames", "meta_batch",
            "query_clips", "inner_loss_scale", "supervised", "freeze_motion", "pseudo_method")
    return {k: getattr(a, k) for k in keys if getattr(a, k, None) is not None}


def _pretrain_overrides(a):
    pairs = {"pretrain_epochs": "epochs", "pretrain_lr": "lr", "batch_clips": "batch_clips"}
    return {v: getattr(a, k) for k, v in pairs.items() if getattr(a, k, None) is not None}


def _net(a):
    base = dataclasses.asdict(meta.default_net())
    base.update(_net_overrides(a))
    base["channels"] = tuple(base["channels"])
    return tscan.TsCanConfig(**base)


def cmd_synth(a):
    path = synth.generate_dataset(a.out, a.seed, a.subjects, a.duration, a.domain, a.fps, a.size)
    print(path)


def cmd_pretrain(a):
    ds = load_dataset(a.dataset)
    params, curve = meta.pretrain(ds, _net(a), meta.PretrainConfig(**_pretrain_overrides(a)), seed=a.seed)
    save_params(params, a.out)
    print(json.dumps({"checkpoint": str(a.out), "loss_curve": curve}))


def cmd_meta_train(a):
    ds = load_dataset(a.dataset)
    net = _net(a)
    cfg = meta.MetaConfig(**_meta_overrides(a))
    init = load_params(a.init) if a.init else tscan.init_tscan(net, a.seed)
    tasks = meta.make_tasks(ds, cfg, net)
    params, mlog = meta.meta_train(tasks, init, cfg, net, seed=a.seed)
    save_params(params, a.out)
    if a.log:
        mlog.write(a.log)
    print(json.dumps({"checkpoint": str(a.out), "epoch_query_loss": mlog.epoch_query_loss}))


def cmd_adapt(a):
    ds = load_dataset(a.dataset)
    net = _net(a)
    cfg = meta.MetaConfig(**_meta_overrides(a))
    subject = ds.subject(a.subject)
    gold = subject.gold if cfg.supervised else None
    params = meta.test_adapt(load_params(a.checkpoint), subject.frames, cfg, net, gold=gold)
    save_params(params, a.out)
    print(a.out)


def _spec_from_args(a):
    if a.spec:
        d = json.loads(Path(a.spec).read_text())
    else:
        d = {}
    cli = {"test": a.test, "mode": a.mode, "seed": a.seed, "out_dir": a.out_dir, "pretrain": a.pretrain_data,
           "meta_train": a.meta_train_data, "eval_start": a.eval_start, "checkpoint_dir": a.checkpoint_dir,
           "finetune_steps": a.finetune_steps}
    d.update({k: v for k, v in cli.items() if v is not None})
    if a.allow_same_dataset:
        d["allow_same_dataset"] = True
    for key, overrides in (("meta", _meta_overrides(a)), ("net", _net_overrides(a)),
                           ("pretrain_config", _pretrain_overrides(a))):
        if overrides:
            d[key] = {**d.get(key, {}), **overrides}
    missing = [k for k in ("test", "mode", "seed", "out_dir") if k not in d]
    if missing:
        raise ValueError(f"missing experiment fields: {missing} (give flags or --spec)")
    return harness.ExperimentSpec.from_dict(d)


def cmd_evaluate(a):
    spec = _spec_from_args(a)
    result = harness.run_experiment(spec)
    print(harness.report([result.out_dir]), end="")


def cmd_demix(a):
    ds = load_dataset(a.dataset)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in ds:
        pulse = demix.demix(s.frames, a.method)
        with open(out / f"{s.id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "value"])
            w.writerows((i, repr(v)) for i, v in enumerate(pulse.values.tolist()))
        hrs = [sigproc.estimate_hr(pulse.values[s0:e0], pulse.fps)
               for s0, e0 in sigproc.split_windows(len(pulse.values))]
        print(f"{s.id}\t" + " ".join(f"{h:.1f}" for h in hrs))


def cmd_report(a):
    print(harness.report(a.runs, csv_path=a.csv), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="pulsebench", description="Camera pulse estimation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--duration", type=float, default=60.0, help="seconds per subject")
    s.add_argument("--domain", default="A", choices=sorted(synth.DOMAINS))
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="supervised pretraining")
    s.add_argument("--dataset", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    _add_net(s)
    _add_pretrain(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("meta-train", help="meta-train from a checkpoint (or from scratch)")
    s.add_argument("--dataset", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--init", help="starting checkpoint; random init when omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="JSON-lines training log")
    _add_net(s)
    _add_meta(s)
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("adapt", help="personalize a checkpoint on one subject's support frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--subject", required=True)
    s.add_argument("--out", required=True)
    _add_net(s)
    _add_meta(s)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("evaluate", help="run a full experiment and score it")
    s.add_argument("--spec", help="ExperimentSpec JSON; flags override its fields")
    s.add_argument("--test")
    s.add_argument("--mode", choices=harness.MODES)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--pretrain-data")
    s.add_argument("--meta-train-data")
    s.add_argument("--eval-start", type=int)
    s.add_argument("--checkpoint-dir")
    s.add_argument("--finetune-steps", type=int)
    s.add_argument("--allow-same-dataset", action="store_true")
    _add_net(s)
    _add_meta(s)
    _add_pretrain(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("demix", help="run a demixer over every subject")
    s.add_argument("--dataset", required=True)
    s.add_argument("--method", default="pos", choices=sorted(demix.DEMIXERS))
    s.add_argument("--out", required=True, help="directory for per-subject pulse CSVs")
    s.set_defaults(func=cmd_demix)

    s = sub.add_parser("report", help="summarize one or more run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--csv", help="write the table as CSV")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.func(a)
    except harness.StageError as exc:
        print(f"pulsebench {a.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes a tagged message
        print(f"pulsebench {a.command}: [{a.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
