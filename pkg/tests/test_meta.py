import warnings

import numpy as np
import pytest

from conftest import TINY_META, TINY_NET
from pulsebench import meta, tscan
from pulsebench.dataset import load_dataset
from pulsebench.meta import MetaConfig, PretrainConfig
from pulsebench.tscan import TsCanConfig

NET = TsCanConfig(**TINY_NET)
CFG = MetaConfig(**TINY_META)


@pytest.fixture
def train(tiny_data):
    return load_dataset(tiny_data[0])


@pytest.fixture
def tasks(train):
    return meta.make_tasks(train, CFG, NET)


@pytest.fixture
def params():
    return tscan.init_tscan(NET, 0)


def test_unsupervised_tasks_never_read_gold(train):
    tasks = meta.make_tasks(train, CFG, NET)
    assert train.gold_reads == 0
    assert all(t.label_source == "pos" for t in tasks)
    meta.meta_train(tasks, tscan.init_tscan(NET, 0), CFG, NET, seed=0)
    assert train.gold_reads == 0


def test_supervised_tasks_use_gold(train):
    tasks = meta.make_tasks(train, MetaConfig(**{**TINY_META, "supervised": True}), NET)
    assert train.gold_reads > 0 and tasks[0].label_source == "gold"


def test_support_and_query_are_chronological_and_disjoint(tasks):
    k, w = CFG.support_frames, NET.window_frames
    for t in tasks:
        assert t.support_range == (0, k) and t.query_range[0] == k
        assert len(t.support) == k // w - 1  # K frames give K-1 differences
        assert len(t.query) >= 1 and len(t.query_labels) == len(t.query)


def test_short_subjects_are_excluded_with_warning(train):
    cfg = MetaConfig(**{**TINY_META, "support_frames": 470})
    with pytest.warns(UserWarning, match="excluded"):
        tasks = meta.make_tasks(train, cfg, NET)
    assert tasks == []


def test_support_must_fit_window():
    with pytest.raises(ValueError, match="multiple"):
        MetaConfig(support_frames=55).check_against(NET)


@pytest.mark.parametrize("bad", [{"inner_lr": -1}, {"inner_steps": 0}, {"epochs": -1}, {"meta_batch": 0},
                                 {"first_order": False}, {"query_clips": 0},
                                 {"inner_loss_scale": 0.0}])
def test_meta_config_validation(bad):
    with pytest.raises(ValueError):
        MetaConfig(**bad)


def test_zero_inner_rate_is_identity(tasks, params):
    t = tasks[0]
    out = meta.inner_adapt(params, t.support, t.support_labels, MetaConfig(inner_lr=0.0), NET)
    assert out.equals(params) and out.role == "personalized"


def test_inner_step_matches_hand_computation(tasks, params):
    t = tasks[0]
    cfg = MetaConfig(inner_lr=0.003)
    _, grads = tscan.loss_and_grads(params, t.support, t.support_labels, NET)
    out = meta.inner_adapt(params, t.support, t.support_labels, cfg, NET)
    for k, v in params.tensors.items():
        np.testing.assert_allclose(out[k], v - 0.003 * cfg.inner_loss_scale * grads[k], rtol=1e-5, atol=1e-7)


def test_inner_step_size_does_not_grow_with_support(train, params):
    """Same clips repeated: the mean loss is unchanged, so the step must be too."""
    t = meta.make_tasks(train, CFG, NET)[0]
    idx = np.concatenate([np.arange(len(t.support))] * 3)
    once = meta.inner_adapt(params, t.support, t.support_labels, CFG, NET)
    thrice = meta.inner_adapt(params, t.support[idx], t.support_labels[idx], CFG, NET)
    for k in params.tensors:
        np.testing.assert_allclose(thrice[k], once[k], rtol=1e-4, atol=1e-6)


def test_inner_adapt_leaves_global_params_untouched(tasks, params):
    before = params.copy()
    meta.inner_adapt(params, tasks[0].support, tasks[0].support_labels, MetaConfig(inner_steps=3), NET)
    assert params.equals(before)


def test_one_step_fine_tune_equals_inner_adapt(tasks, params):
    t = tasks[1]
    a = meta.inner_adapt(params, t.support, t.support_labels, MetaConfig(inner_lr=0.005), NET)
    b = meta.fine_tune_baseline(params, t.support, t.support_labels, NET, steps=1, lr=0.005)
    assert a.equals(b)


def test_zero_outer_rate_is_identity(tasks, params):
    out, log = meta.meta_train(tasks, params, MetaConfig(**{**TINY_META, "outer_lr": 0.0}), NET)
    assert out.equals(params) and len(log.records) == len(tasks) * CFG.epochs


def test_zero_epochs_returns_initial_params(tasks, params):
    out, log = meta.meta_train(tasks, params, MetaConfig(**{**TINY_META, "epochs": 0}), NET)
    assert out.equals(params) and log.records == [] and out.role == "updated"


def test_meta_train_is_reproducible(tasks, params):
    a, la = meta.meta_train(tasks, params, CFG, NET, seed=4)
    b, lb = meta.meta_train(tasks, params, CFG, NET, seed=4)
    assert a.equals(b) and la.records == lb.records
    c, _ = meta.meta_train(tasks, params, CFG, NET, seed=5)
    assert not a.equals(c)


def test_frozen_motion_branch_does_not_move(tasks, params):
    out, _ = meta.meta_train(tasks, params, MetaConfig(**{**TINY_META, "freeze_motion": True}), NET)
    for k in params.tensors:
        same = np.array_equal(out[k], params[k])
        assert same == k.startswith(tscan.MOTION_PREFIXES)


def test_meta_train_needs_tasks(params):
    with pytest.raises(ValueError):
        meta.meta_train([], params, CFG, NET)


def test_meta_log_jsonl(tasks, params, tmp_path):
    _, log = meta.meta_train(tasks, params, CFG, NET)
    log.write(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(log.records) and '"query_loss"' in lines[0]
    assert len(log.epoch_query_loss) == CFG.epochs


def test_pretrain_reduces_loss(train):
    _, curve = meta.pretrain(train, NET, PretrainConfig(epochs=4, lr=0.01, batch_clips=8), seed=0)
    assert curve[-1] < curve[0]


def test_pretrain_zero_epochs_is_init(train):
    params, curve = meta.pretrain(train, NET, PretrainConfig(epochs=0), seed=2)
    assert curve == [] and params.equals(tscan.init_tscan(NET, 2))


def test_test_adapt_refuses_short_video(train, params):
    frames = train.subjects[0].frames[:65]
    with pytest.raises(ValueError, match="adapt"):
        meta.test_adapt(params, frames, CFG, NET)


def test_test_adapt_unsupervised_ignores_gold(train, params):
    s = train.subjects[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        meta.test_adapt(params, s.frames, CFG, NET)
    assert s.gold_reads == 0


def test_evaluation_never_overlaps_support():
    assert meta.evaluation_start(CFG) == 60
    assert meta.evaluation_start(CFG, 90) == 90
    with pytest.raises(ValueError):
        meta.evaluation_start(CFG, 30)
