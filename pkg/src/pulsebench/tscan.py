"""Two-branch convolutional attention network with temporal shifting.

The appearance branch sees standardized raw frames and emits soft attention
masks; the motion branch sees normalized frame differences, exchanges
information across time with temporal shifts, and is gated by those masks.
The network predicts the first derivative of the pulse for every frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensorcore import DTYPE, Graph, ModelParams, backward, forward, init_params

EPS = 1e-7
MOTION_PREFIXES = ("motion.", "head.")


@dataclass(frozen=True)
class TsCanConfig:
    window_frames: int = 20
    input_resolution: int = 36
    channels: tuple = (16, 32)
    hidden: int = 64
    shift_fraction: float = 0.25
    dropout: float = 0.25

    def __post_init__(self):
        if self.window_frames < 2:
            raise ValueError("window_frames must be >= 2")
        if not 0 < self.shift_fraction <= 0.5:
            raise ValueError("shift_fraction must be in (0, 1/2]")
        if self.input_resolution % (2 ** len(self.channels)):
            raise ValueError("input_resolution must be divisible by the pooling factors")

    @property
    def head_resolution(self):
        return self.input_resolution // 2 ** len(self.channels)


@dataclass
class ClipBatch:
    """``motion``/``appearance``: [n_clips, T, R, R, 3] (channels-last)."""

    motion: np.ndarray
    appearance: np.ndarray

    def __len__(self):
        return self.motion.shape[0]

    def __getitem__(self, idx):
        return ClipBatch(self.motion[idx], self.appearance[idx])


# -- preprocessing -----------------------------------------------------------

def _area_matrix(src, dst):
    """Row-stochastic [dst, src] matrix averaging fractional pixel overlaps."""
    edges = np.linspace(0, src, dst + 1)
    a = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
    return a / a.sum(axis=1, keepdims=True)


def downsample(frames, resolution):
    """Area-average [T, H, W, 3] frames to [T, R, R, 3]."""
    t, h, w, _ = frames.shape
    ah = _area_matrix(h, resolution).astype(DTYPE)
    aw = _area_matrix(w, resolution).astype(DTYPE)
    x = np.asarray(frames, dtype=DTYPE)
    out = np.einsum("ih,thwc,jw->tijc", ah, x, aw, optimize=True)
    return np.ascontiguousarray(out, dtype=DTYPE)


def normalized_difference(c):
    """(c[t+1] - c[t]) / (c[t+1] + c[t] + eps) along axis 0."""
    return (c[1:] - c[:-1]) / (c[1:] + c[:-1] + DTYPE(EPS))


def _standardize_clips(x):
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    return ((x - mu) / (sd + DTYPE(EPS))).astype(DTYPE)


def preprocess(frames, config):
    """Cut a video into non-overlapping ClipBatch windows; the tail remainder is dropped.

    ``frames`` is a FrameSequence or a [T, H, W, 3] array.  Motion clip ``k``
    covers frame pairs (t, t+1) for t in [k*W, (k+1)*W).
    """
    arr = getattr(frames, "frames", frames)
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected [T, H, W, 3] frames, got {arr.shape}")
    win = config.window_frames
    if arr.shape[0] < win + 1:
        raise ValueError(f"need at least {win + 1} frames, got {arr.shape[0]}")
    if arr.dtype == np.uint8:
        arr = arr.astype(DTYPE) / DTYPE(255)
    c = downsample(arr, config.input_resolution)
    n = (c.shape[0] - 1) // win
    motion = normalized_difference(c)[: n * win]
    app = c[: n * win]
    r = config.input_resolution
    motion = _standardize_clips(motion.reshape(n, win, r, r, 3))
    app = _standardize_clips(app.reshape(n, win, r, r, 3))
    return ClipBatch(motion, app)


def clip_labels(deriv, config):
    """Cut a derivative label trace into standardized [n_clips, T] rows."""
    d = np.asarray(getattr(deriv, "values", deriv), dtype=np.float64)
    win = config.window_frames
    n = len(d) // win
    rows = d[: n * win].reshape(n, win)
    rows = rows - rows.mean(axis=1, keepdims=True)
    rows = rows / (rows.std(axis=1, keepdims=True) + 1e-12)
    return rows.astype(DTYPE)


# -- network -----------------------------------------------------------------

def param_shapes(config):
    shapes = {}
    cin = 3
    for s, cout in enumerate(config.channels, start=1):
        shapes[f"appearance.conv{s}.w"] = (3, 3, cin, cout)
        shapes[f"appearance.conv{s}.b"] = (cout,)
        shapes[f"attention{s}.w"] = (1, 1, cout, 1)
        shapes[f"attention{s}.b"] = (1,)
        shapes[f"motion.conv{s}.w"] = (3, 3, cin, cout)
        shapes[f"motion.conv{s}.b"] = (cout,)
        cin = cout
    flat = cin * config.head_resolution ** 2
    shapes["head.dense1.w"] = (flat, config.hidden)
    shapes["head.dense1.b"] = (config.hidden,)
    shapes["head.dense2.w"] = (config.hidden, 1)
    shapes["head.dense2.b"] = (1,)
    return shapes


def init_tscan(config, seed):
    return init_params(param_shapes(config), seed)


def zero_params(config):
    return ModelParams({k: np.zeros(s, dtype=DTYPE) for k, s in param_shapes(config).items()})


def attention_gate(g, feats, w, b, size):
    """sigmoid(1x1 conv) rescaled so each frame's mask has mean one."""
    s = g.sigmoid(g.conv2d(feats, w, b))
    total = g.sum(s, axes=(1, 2), keepdims=True)
    return g.scalar_mul(g.div(s, total), size * size)


@lru_cache(maxsize=32)
def build_graph(config, n_clips):
    """Graph over ``n_clips`` clips; inputs ``motion``, ``appearance``, ``target``.

    Outputs: ``pred`` [n_clips, T], ``loss`` (per-clip standardized MSE) and
    one ``mask{s}`` per stage.
    """
    g = Graph()
    t, r = config.window_frames, config.input_resolution
    nt = n_clips * t
    p = {name: g.param(name, shape) for name, shape in param_shapes(config).items()}
    m = g.reshape(g.input("motion", (n_clips, t, r, r, 3)), (nt, r, r, 3))
    a = g.reshape(g.input("appearance", (n_clips, t, r, r, 3)), (nt, r, r, 3))
    size = r
    for s in range(1, len(config.channels) + 1):
        a = g.tanh(g.conv2d(a, p[f"appearance.conv{s}.w"], p[f"appearance.conv{s}.b"]))
        mask = attention_gate(g, a, p[f"attention{s}.w"], p[f"attention{s}.b"], size)
        g.output(f"mask{s}", mask)
        m = g.temporal_shift(m, t, config.shift_fraction)
        m = g.tanh(g.conv2d(m, p[f"motion.conv{s}.w"], p[f"motion.conv{s}.b"]))
        m = g.mul(m, mask)
        m = g.dropout(g.avg_pool2d(m, 2), config.dropout)
        a = g.avg_pool2d(a, 2)
        size //= 2
    flat = g.reshape(m, (nt, config.channels[-1] * size * size))
    h = g.dropout(g.tanh(g.dense(flat, p["head.dense1.w"], p["head.dense1.b"])), config.dropout)
    out = g.reshape(g.dense(h, p["head.dense2.w"], p["head.dense2.b"]), (n_clips, t))
    g.output("pred", out)
    target = g.input("target", (n_clips, t))
    g.output("loss", g.mse_loss(g.standardize(out), target))
    return g


def _feed(clips, target=None):
    n, t = clips.motion.shape[:2]
    if target is None:
        target = np.zeros((n, t), dtype=DTYPE)
    return {"motion": clips.motion, "appearance": clips.appearance, "target": target}


def forward_clips(params, clips, config, rng=None):
    """Per-frame derivative predictions, shape [n_clips, T]."""
    g = build_graph(config, len(clips))
    return forward(g, _feed(clips), params, rng=rng)["pred"]


def forward_clip(params, clip, config):
    """Single-clip eval-mode forward; ``clip`` has [T, R, R, 3] members."""
    batch = ClipBatch(clip.motion[None], clip.appearance[None])
    return forward_clips(params, batch, config)[0]


def attention_masks(params, clips, config):
    g = build_graph(config, len(clips))
    out = forward(g, _feed(clips), params)
    return [out[f"mask{s}"] for s in range(1, len(config.channels) + 1)]


def loss_and_grads(params, clips, labels, config, rng=None, need_grads=True):
    """Standardized-MSE loss over a clip batch and its gradients (trainable leaves)."""
    g = build_graph(config, len(clips))
    out = forward(g, _feed(clips, labels), params, rng=rng)
    loss = float(out["loss"])
    if not need_grads:
        return loss, None
    trainable = set(params.trainable) if isinstance(params, ModelParams) else None
    return loss, backward(g, "loss", trainable)


def predict_derivative(params, frames, config, batch_clips=64):
    """Run the network over a whole video; returns derivative values for
    ``n_clips * window_frames`` frame pairs."""
    clips = preprocess(frames, config)
    outs = [forward_clips(params, clips[i:i + batch_clips], config)
            for i in range(0, len(clips), batch_clips)]
    return np.concatenate(outs, axis=0).reshape(-1).astype(np.float64)


def freeze_motion_branch(params):
    names = [n for n in params.tensors if n.startswith(MOTION_PREFIXES)]
    return params.freeze(names)
