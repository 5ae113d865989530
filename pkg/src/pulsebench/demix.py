"""Unsupervised pulse extraction from spatially averaged RGB traces.

POS and CHROM are windowed projections with overlap-add; ICA is a FastICA
decomposition followed by an in-band spectral selection rule.  POS also serves
as the pseudo-label generator for unsupervised adaptation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from . import sigproc
from .sigproc import PulseTrace

POS_WINDOW_S = 1.6
SIGMA_GUARD = 1e-9


class DegenerateInputError(ValueError):
    """Input carries no usable signal (flat video, rank-deficient channels)."""


class FlatLabelError(DegenerateInputError):
    pass


@dataclass
class RgbTrace:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray
    fps: float

    def __post_init__(self):
        self.r, self.g, self.b = (np.asarray(c, dtype=np.float64) for c in (self.r, self.g, self.b))
        if not len(self.r) == len(self.g) == len(self.b) or len(self.r) < 2:
            raise ValueError("RGB channels must have equal length >= 2")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def matrix(self):
        """[3, T] array of channel means."""
        return np.stack([self.r, self.g, self.b])

    def __len__(self):
        return len(self.r)

    @classmethod
    def from_matrix(cls, m, fps):
        return cls(m[0], m[1], m[2], fps)


@dataclass
class PseudoLabel:
    values: np.ndarray
    source: str


def spatial_average(frames, mask=None, fps=None):
    """Per-frame channel means over ``mask`` (all pixels when None)."""
    arr = np.asarray(getattr(frames, "frames", frames))
    fps = fps or getattr(frames, "fps", None)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError("expected nonempty [T, H, W, 3] frames")
    scale = 1.0 / 255 if arr.dtype == np.uint8 else 1.0
    if mask is None:
        means = arr.reshape(arr.shape[0], -1, 3).mean(axis=1, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("skin mask selects no pixels")
        means = arr[:, mask, :].mean(axis=1, dtype=np.float64)
    return RgbTrace.from_matrix(means.T * scale, fps)


def _window_length(trace):
    return int(round(POS_WINDOW_S * trace.fps))


def _overlap_add(trace, project):
    c = trace.matrix
    n = c.shape[1]
    win = _window_length(trace)
    if n < win:
        raise ValueError(f"trace of {n} samples shorter than one {win}-sample window")
    blocks = sliding_window_view(c, win, axis=1)  # [3, n_windows, win]
    mu = blocks.mean(axis=2, keepdims=True)
    if np.any(mu <= 0):
        raise DegenerateInputError("non-positive channel mean inside a window")
    h = project(blocks / mu)
    h = h - h.mean(axis=1, keepdims=True)
    out = np.zeros(n)
    nw = h.shape[0]
    for k in range(win):
        out[k:k + nw] += h[:, k]
    return out


def _ratio(a, b):
    return a.std(axis=-1, keepdims=True) / np.maximum(b.std(axis=-1, keepdims=True), SIGMA_GUARD)


def _pos_project(cn):
    s1 = cn[1] - cn[2]
    s2 = -2 * cn[0] + cn[1] + cn[2]
    return s1 + _ratio(s1, s2) * s2


def _chrom_project(cn, fps):
    xs = 3 * cn[0] - 2 * cn[1]
    ys = 1.5 * cn[0] + cn[1] - 1.5 * cn[2]
    # both chrominance signals are band-passed inside each window before mixing
    b, a = sigproc.butter_bandpass(fps)
    xs = signal.filtfilt(b, a, xs, axis=-1)
    ys = signal.filtfilt(b, a, ys, axis=-1)
    return xs - _ratio(xs, ys) * ys


def pos(trace, filtered=True):
    """Plane-orthogonal-to-skin projection with 1.6 s sliding windows."""
    out = _overlap_add(trace, _pos_project)
    if filtered:
        out = sigproc.bandpass(out, trace.fps)
    return PulseTrace(out, trace.fps)


def chrom(trace, filtered=True):
    """Chrominance projection (3R-2G, 1.5R+G-1.5B) with 1.6 s sliding windows."""
    out = _overlap_add(trace, lambda cn: _chrom_project(cn, trace.fps))
    if filtered:
        out = sigproc.bandpass(out, trace.fps)
    return PulseTrace(out, trace.fps)


# -- ICA ---------------------------------------------------------------------

def whiten(x):
    """Whiten rows of zero-mean ``x`` [k, T] via covariance eigendecomposition."""
    cov = x @ x.T / x.shape[1]
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 1e-10 * max(vals.max(), 1e-300):
        raise DegenerateInputError("rank-deficient channel covariance")
    w = vecs @ np.diag(vals ** -0.5) @ vecs.T
    return w @ x, w


def _sym_decorrelate(w):
    vals, vecs = np.linalg.eigh(w @ w.T)
    return vecs @ np.diag(vals ** -0.5) @ vecs.T @ w


def fastica(x, max_iter=200, tol=1e-6, seed=0):
    """Symmetric FastICA with tanh contrast on whitened rows; returns sources [k, T]."""
    k, n = x.shape
    w = _sym_decorrelate(np.random.default_rng(seed).standard_normal((k, k)))
    for _ in range(max_iter):
        y = np.tanh(w @ x)
        w_new = _sym_decorrelate(y @ x.T / n - np.diag((1 - y ** 2).mean(axis=1)) @ w)
        converged = np.max(np.abs(np.abs(np.diag(w_new @ w.T)) - 1)) < tol
        w = w_new
        if converged:
            break
    return w @ x


def band_power_ratio(x, fps, lo=sigproc.LO_HZ, hi=sigproc.HI_HZ):
    """Largest in-band periodogram bin over total power."""
    spec = np.abs(np.fft.rfft(x - x.mean())) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / fps)
    band = (freqs >= lo) & (freqs <= hi)
    total = spec[1:].sum()
    if total <= 0 or not band.any():
        return 0.0
    return float(spec[band].max() / total)


def ica(trace, filtered=True, return_all=False):
    """FastICA on z-scored channels; picks the component with the strongest
    in-band peak and signs it to agree with band-passed negated green."""
    fps = trace.fps
    c = trace.matrix
    if c.shape[1] < 3 * fps:
        raise ValueError("ICA needs at least 3 s of samples")
    sd = c.std(axis=1, keepdims=True)
    if np.any(sd <= 0):
        raise DegenerateInputError("constant channel")
    z = (c - c.mean(axis=1, keepdims=True)) / sd
    xw, _ = whiten(z)
    sources = fastica(xw)
    ratios = [band_power_ratio(s, fps) for s in sources]
    best = int(np.argmax(ratios))
    comp = sources[best]
    ref = -sigproc.bandpass(z[1], fps)
    if np.dot(sigproc.bandpass(comp, fps), ref) < 0:
        comp = -comp
    out = sigproc.bandpass(comp, fps) if filtered else comp
    if return_all:
        return PulseTrace(out, fps), sources, ratios
    return PulseTrace(out, fps)


DEMIXERS = {"pos": pos, "chrom": chrom, "ica": ica}


def demix(frames, method="pos", mask=None, fps=None):
    trace = spatial_average(frames, mask, fps)
    return DEMIXERS[method](trace)


def make_pseudo_labels(frames, method="pos", window=20, gold=None, fps=None):
    """Derivative labels aligned with motion inputs: label[t] ~ p[t+1] - p[t].

    ``method='gold'`` differences the supplied reference trace instead.
    Values are standardized per ``window``-sample training window.
    """
    if method == "gold":
        if gold is None:
            raise ValueError("gold labels requested but no reference trace given")
        pulse = np.asarray(getattr(gold, "values", gold), dtype=np.float64)
    else:
        pulse = demix(frames, method, fps=fps).values
    if pulse.std() < 1e-9:
        raise FlatLabelError(f"{method} produced a flat signal (std < 1e-9)")
    deriv = np.diff(pulse)
    return PseudoLabel(standardize_windows(deriv, window), method)


def standardize_windows(x, window):
    """Zero-mean/unit-std per consecutive ``window`` block; a short tail is standardized on its own."""
    out = np.empty_like(x, dtype=np.float64)
    for s in range(0, len(x), window):
        seg = x[s:s + window]
        sd = seg.std()
        out[s:s + window] = (seg - seg.mean()) / (sd if sd > 0 else 1.0)
    return out
