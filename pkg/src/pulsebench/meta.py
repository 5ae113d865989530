"""Per-subject meta-learning for the pulse network.

The global parameters are first trained with gold labels, then meta-trained
so that a single SGD step on a subject's first K frames personalizes them.
Labels come either from the reference trace or from a demixer (pseudo labels).
The outer update is first-order: the query gradient at the adapted weights is
applied to the global weights.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tscan
from .demix import make_pseudo_labels
from .tensorcore import OptimizerState, optimizer_step
from .tscan import ClipBatch, TsCanConfig

log = logging.getLogger(__name__)

SUPPORT_PRESETS = {"6s": 180, "12s": 360, "18s": 540}
# The inner MSE is multiplied by this many frames so one step at inner_lr has a
# usable size for this small network, independent of the support length.
INNER_LOSS_SCALE = 180.0


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.005
    outer_lr: float = 0.001
    inner_steps: int = 1
    epochs: int = 10
    support_frames: int = 540
    supervised: bool = False
    freeze_motion: bool = False
    pseudo_method: str = "pos"
    first_order: bool = True
    meta_batch: int = 4
    query_clips: int | None = None  # random subset of query clips per task visit; None = all
    inner_loss_scale: float = INNER_LOSS_SCALE

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if not self.first_order:
            raise ValueError("only the first-order outer gradient is implemented")
        if self.query_clips is not None and self.query_clips < 1:
            raise ValueError("query_clips must be >= 1 or None")
        if self.inner_loss_scale <= 0:
            raise ValueError("inner_loss_scale must be > 0")

    def check_against(self, net):
        if self.support_frames % net.window_frames:
            raise ValueError(
                f"support_frames {self.support_frames} is not a multiple of window_frames {net.window_frames}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    lr: float = 0.001
    batch_clips: int = 16


@dataclass
class Task:
    """One subject: chronological support frames [0, K) and query frames [K, N)."""

    subject: str
    support: ClipBatch
    support_labels: np.ndarray
    query: ClipBatch
    query_labels: np.ndarray
    label_source: str
    support_range: tuple = (0, 0)
    query_range: tuple = (0, 0)


def segment_labels(frames, start, end, *, gold=None, method="pos", fps=None):
    """Derivative labels for frames [start, end): label[t] ~ p[t+1] - p[t]."""
    seg = frames[start:end]
    if gold is not None:
        values = np.asarray(getattr(gold, "values", gold))[start:end]
        return make_pseudo_labels(seg, "gold", gold=values).values
    return make_pseudo_labels(seg, method, fps=fps or frames.fps).values


def _segment(frames, start, end, net, labels):
    clips = tscan.preprocess(frames[start:end], net)
    rows = tscan.clip_labels(labels, net)
    n = min(len(clips), len(rows))
    return clips[:n], rows[:n]


def make_task(subject, config, net):
    """Build a Task; in unsupervised mode the reference trace is never touched."""
    frames = subject.frames
    n = len(frames)
    k = config.support_frames
    gold = subject.gold if config.supervised else None
    source = "gold" if config.supervised else config.pseudo_method
    sup_lab = segment_labels(frames, 0, k, gold=gold, method=config.pseudo_method)
    qry_lab = segment_labels(frames, k, n, gold=gold, method=config.pseudo_method)
    sup, sup_rows = _segment(frames, 0, k, net, sup_lab)
    qry, qry_rows = _segment(frames, k, n, net, qry_lab)
    return Task(subject.id, sup, sup_rows, qry, qry_rows, source, (0, k), (k, n))


def make_tasks(dataset, config, net):
    """One task per subject; subjects without a full support plus one query clip are skipped."""
    config.check_against(net)
    need = config.support_frames + net.window_frames + 1
    tasks = []
    for subject in dataset:
        n = subject.n_frames if hasattr(subject, "n_frames") else len(subject.frames)
        if n < need:
            warnings.warn(f"subject {subject.id}: {n} frames < {need} needed; excluded from meta-training",
                          stacklevel=2)
            continue
        tasks.append(make_task(subject, config, net))
    return tasks


def pretrain(dataset, net, config=PretrainConfig(), seed=0, init=None):
    """Supervised training on every clip of every subject; returns (params, per-epoch loss)."""
    subjects = list(dataset)
    missing = [s.id for s in subjects if getattr(s, "gold_path", True) is None]
    if missing:
        raise ValueError(f"pretraining needs gold labels; missing for {missing}")
    clips, rows = [], []
    for s in subjects:
        frames = s.frames
        lab = segment_labels(frames, 0, len(frames), gold=s.gold)
        c, r = _segment(frames, 0, len(frames), net, lab)
        clips.append(c)
        rows.append(r)
    data = ClipBatch(np.concatenate([c.motion for c in clips]), np.concatenate([c.appearance for c in clips]))
    labels = np.concatenate(rows)
    params = init if init is not None else tscan.init_tscan(net, seed)
    rng = np.random.default_rng(seed)
    state = OptimizerState("adam", config.lr)
    curve = []
    bs = config.batch_clips
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        losses = []
        for i in range(0, len(order), bs):
            idx = np.sort(order[i:i + bs])
            loss, grads = tscan.loss_and_grads(params, data[idx], labels[idx], net, rng=rng)
            params = optimizer_step(params, grads, state)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return params.with_tensors(params.tensors, role="global"), curve


def _sgd_steps(params, clips, labels, net, lr, steps, scale, rng=None):
    """Full-batch SGD on ``scale`` times the support MSE; returns (params, MSE per step)."""
    state = OptimizerState("sgd", lr)
    losses = []
    for _ in range(steps):
        loss, grads = tscan.loss_and_grads(params, clips, labels, net, rng=rng)
        grads = {k: v * np.float32(scale) for k, v in grads.items()}
        params = optimizer_step(params, grads, state)
        losses.append(loss)
    return params, losses


def _adapt(params, clips, labels, config, net, rng=None):
    if len(clips) < 1:
        raise ValueError("support must contain at least one clip")
    if config.freeze_motion:
        params = tscan.freeze_motion_branch(params)
    adapted, losses = _sgd_steps(params, clips, labels, net, config.inner_lr, config.inner_steps,
                                 config.inner_loss_scale, rng)
    return adapted.with_tensors(adapted.tensors, role="personalized"), losses[0]


def inner_adapt(params, clips, labels, config, net, rng=None):
    """``inner_steps`` SGD steps at ``inner_lr`` on the support loss; ``params`` is untouched."""
    return _adapt(params, clips, labels, config, net, rng)[0]


@dataclass
class MetaLog:
    records: list = field(default_factory=list)
    epoch_query_loss: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _query_subset(task, config, rng):
    if config.query_clips is None or config.query_clips >= len(task.query):
        return task.query, task.query_labels
    idx = np.sort(rng.choice(len(task.query), config.query_clips, replace=False))
    return task.query[idx], task.query_labels[idx]


def meta_train(tasks, params, config, net, seed=0):
    """First-order meta-training; returns (updated params, MetaLog).

    Each epoch shuffles the tasks into meta-batches.  For every task the
    global weights are adapted on the support set, the query loss gradient is
    taken at the adapted weights, and the batch mean drives one Adam step.
    """
    if not tasks:
        raise ValueError("meta_train needs at least one task")
    rng = np.random.default_rng(seed)
    if config.freeze_motion:
        params = tscan.freeze_motion_branch(params)
    state = OptimizerState("adam", config.outer_lr)
    mlog = MetaLog()
    for epoch in range(config.epochs):
        order = rng.permutation(len(tasks))
        epoch_losses = []
        for b in range(0, len(order), config.meta_batch):
            batch = [tasks[i] for i in order[b:b + config.meta_batch]]
            total = None
            for task in batch:
                adapted, s_loss = _adapt(params, task.support, task.support_labels, config, net, rng=rng)
                q_clips, q_labels = _query_subset(task, config, rng)
                q_loss, grads = tscan.loss_and_grads(adapted, q_clips, q_labels, net, rng=rng)
                total = grads if total is None else {k: total[k] + grads[k] for k in total}
                epoch_losses.append(q_loss)
                mlog.records.append({"epoch": epoch, "task": task.subject,
                                     "support_loss": s_loss, "query_loss": q_loss})
            mean = {k: v / len(batch) for k, v in total.items()}
            params = optimizer_step(params, mean, state)
        mlog.epoch_query_loss.append(float(np.mean(epoch_losses)))
        log.info("meta epoch %d mean query loss %.4f", epoch, mlog.epoch_query_loss[-1])
    return params.with_tensors(params.tensors, role="updated"), mlog


def support_set(frames, config, net, gold=None):
    """Clips and labels for frames [0, K): reference-trace labels if ``gold`` is given, else pseudo labels."""
    labels = segment_labels(frames, 0, config.support_frames, gold=gold, method=config.pseudo_method)
    return _segment(frames, 0, config.support_frames, net, labels)


def test_adapt(params, frames, config, net, gold=None):
    """Personalize on the first ``support_frames`` frames of a held-out subject.

    ``gold`` given gives the supervised variant; otherwise pseudo labels are used.
    Scoring must start at or after ``support_frames``.
    """
    k = config.support_frames
    if len(frames) < k + net.window_frames + 1:
        raise ValueError(f"need more than {k} frames to adapt and still evaluate; got {len(frames)}")
    clips, rows = support_set(frames, config, net, gold)
    return inner_adapt(params, clips, rows, config, net)


test_adapt.__test__ = False  # keep pytest from collecting it when imported by name


def fine_tune_baseline(params, clips, labels, net, steps=1, lr=0.005, loss_scale=INNER_LOSS_SCALE):
    """Plain full-batch SGD on the support set; ``steps=1`` matches one inner step."""
    if steps and len(clips) < 1:
        raise ValueError("support must contain at least one clip")
    return _sgd_steps(params, clips, labels, net, lr, steps, loss_scale)[0]


def evaluation_start(config, eval_start=None):
    """First scored frame; never inside the support segment."""
    start = config.support_frames if eval_start is None else eval_start
    if start < config.support_frames:
        raise ValueError("evaluation may not overlap the support segment")
    return start


def default_net():
    return TsCanConfig(input_resolution=8, channels=(8, 16), hidden=32)


__all__ = [
    "MetaConfig", "PretrainConfig", "Task", "MetaLog", "SUPPORT_PRESETS", "make_task", "make_tasks",
    "pretrain", "inner_adapt", "meta_train", "test_adapt", "fine_tune_baseline", "segment_labels",
    "support_set",
    "evaluation_start", "default_net",
]
