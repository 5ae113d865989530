"""The cross-domain comparison battery: one pretraining per seed, every mode
and ablation evaluated on the same held-out windows of domain B."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synth
from .harness import ExperimentSpec, run_experiment

log = logging.getLogger(__name__)

# name -> (mode, MetaConfig overrides)
VARIANTS = {
    "pos": ("pos", {}),
    "chrom": ("chrom", {}),
    "ica": ("ica", {}),
    "pretrained-only": ("pretrained-only", {}),
    "unsupervised": ("unsupervised", {}),
    "supervised": ("supervised", {}),
    "no-pretrain": ("no-pretrain", {}),
    "finetune": ("finetune", {}),
    "unsupervised-12s": ("unsupervised", {"support_frames": 360}),
    "unsupervised-6s": ("unsupervised", {"support_frames": 180}),
    "unsupervised-frozen": ("unsupervised", {"freeze_motion": True}),
}


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple = (0, 1, 2)
    train_subjects: int = 20
    train_duration: float = 60.0
    test_subjects: int = 10
    test_duration: float = 80.0
    eval_start: int = 540
    query_clips: int | None = 16
    pretrain_epochs: int = 5
    variants: tuple = tuple(VARIANTS)
    meta: dict = field(default_factory=dict)


def datasets_for_seed(root, seed, cfg):
    """Render (or reuse) the training domain A and test domain B for one seed."""
    root = Path(root)
    a = root / f"data/A-{seed}"
    b = root / f"data/B-{seed}"
    if not (a / "manifest.json").exists():
        synth.generate_dataset(a, seed, cfg.train_subjects, cfg.train_duration, "A")
    if not (b / "manifest.json").exists():
        synth.generate_dataset(b, 1000 + seed, cfg.test_subjects, cfg.test_duration, "B")
    return a, b


def variant_spec(root, seed, name, cfg, a, b):
    mode, overrides = VARIANTS[name]
    meta = {"query_clips": cfg.query_clips, **cfg.meta, **overrides}
    return ExperimentSpec(test=str(b), mode=mode, seed=seed, out_dir=str(Path(root) / f"runs/{seed}/{name}"),
                          pretrain=str(a), meta_train=str(a), meta=meta,
                          pretrain_config={"epochs": cfg.pretrain_epochs}, eval_start=cfg.eval_start,
                          checkpoint_dir=str(Path(root) / "checkpoints"))


def run_study(root, cfg=StudyConfig()):
    """Returns {seed: {variant: RunResult}} and writes ``study.json`` under ``root``."""
    results = {}
    timings = {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        a, b = datasets_for_seed(root, seed, cfg)
        results[seed] = {}
        for name in cfg.variants:
            t = time.perf_counter()
            results[seed][name] = run_experiment(variant_spec(root, seed, name, cfg, a, b))
            log.info("seed %d %-20s MAE %.3f (%.1fs)", seed, name, results[seed][name].report.mae,
                     time.perf_counter() - t)
        timings[seed] = round(time.perf_counter() - t0, 1)
    summary = {"config": dataclasses.asdict(cfg), "timings_s": timings,
               "mae": {s: {n: r.report.mae for n, r in v.items()} for s, v in results.items()}}
    Path(root, "study.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return results


def median_over_seeds(results, variant, metric="mae", skin_type=None):
    vals = []
    for per_seed in results.values():
        rep = per_seed[variant].report
        if skin_type is not None:
            rep = rep.by_skin_type().get(skin_type)
            if rep is None:
                continue
        vals.append(getattr(rep, metric))
    return float(np.median(vals))
