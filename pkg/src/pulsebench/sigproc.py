"""Filtering, spectral heart-rate estimation and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.ndimage import uniform_filter1d

LO_HZ, HI_HZ = 0.75, 2.5
HR_BAND = (45.0, 150.0)
SNR_RANGE = (30.0, 240.0)
SNR_CAP_DB = 60.0
WINDOW_FRAMES = 360


@dataclass
class PulseTrace:
    values: np.ndarray
    fps: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return len(self.values)


@dataclass
class FrameSequence:
    """[T, H, W, 3] RGB frames (float in [0, 1] or uint8) at ``fps``."""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected [T, H, W, 3] frames, got {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, idx):
        return FrameSequence(self.frames[idx], self.fps)

    def as_float(self):
        if self.frames.dtype == np.uint8:
            return self.frames.astype(np.float32) / np.float32(255)
        return np.asarray(self.frames, dtype=np.float32)


def _values(trace):
    return np.asarray(getattr(trace, "values", trace), dtype=np.float64)


def butter_bandpass(fps, lo=LO_HZ, hi=HI_HZ, order=2):
    if fps <= 2 * hi:
        raise ValueError(f"fps {fps} too low for a {hi} Hz upper cutoff")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fps)


def bandpass(trace, fps=None, lo=LO_HZ, hi=HI_HZ):
    """Zero-phase (forward-backward) 2nd-order Butterworth band-pass."""
    fps = fps or trace.fps
    b, a = butter_bandpass(fps, lo, hi)
    x = _values(trace)
    padlen = 3 * max(len(a), len(b))
    if len(x) <= padlen:
        raise ValueError(f"trace of {len(x)} samples too short to filter (need > {padlen})")
    y = signal.filtfilt(b, a, x, padlen=padlen)
    return PulseTrace(y, fps) if isinstance(trace, PulseTrace) else y


def _spectrum(x, fps, min_bins_per_hz=120.0):
    """Hann-windowed magnitude spectrum zero-padded to <= 0.5 BPM bins."""
    n = len(x)
    nfft = max(n, int(math.ceil(fps * min_bins_per_hz)))
    nfft = 1 << (nfft - 1).bit_length()
    spec = np.abs(np.fft.rfft(x * np.hanning(n), nfft))
    freqs = np.fft.rfftfreq(nfft, 1.0 / fps)
    return freqs * 60.0, spec


def estimate_hr(trace, fps=None, band=HR_BAND):
    """Frequency (BPM) of the largest in-band spectral bin; ties go to the lower bin."""
    fps = fps or trace.fps
    x = _values(trace)
    if len(x) < 2 * fps:
        raise ValueError("need at least 2 s of samples to estimate HR")
    bpm, spec = _spectrum(x - x.mean(), fps)
    lo, hi = band[0], min(band[1], 30.0 * fps)
    sel = np.flatnonzero((bpm >= lo) & (bpm <= hi))
    if sel.size == 0:
        raise ValueError(f"HR band {band} empty at fps {fps}")
    return float(bpm[sel[np.argmax(spec[sel])]])


def snr(pulse, gold_hr, fps=None):
    """Template SNR in dB: power within HR +-6 BPM and 2*HR +-12 BPM versus the
    rest of the 30-240 BPM range.  Capped at +-60 dB when one side is empty."""
    fps = fps or pulse.fps
    if not SNR_RANGE[0] <= gold_hr <= SNR_RANGE[1]:
        raise ValueError(f"gold HR {gold_hr} outside {SNR_RANGE}")
    x = _values(pulse)
    bpm, spec = _spectrum(x - x.mean(), fps)
    power = spec ** 2
    rng = (bpm >= SNR_RANGE[0]) & (bpm <= SNR_RANGE[1])
    tmpl = (np.abs(bpm - gold_hr) <= 6) | (np.abs(bpm - 2 * gold_hr) <= 12)
    sig = power[rng & tmpl].sum()
    noise = power[rng & ~tmpl].sum()
    if noise <= 0:
        return SNR_CAP_DB
    if sig <= 0:
        return -SNR_CAP_DB
    return float(np.clip(10 * np.log10(sig / noise), -SNR_CAP_DB, SNR_CAP_DB))


def _pair(gold, est):
    g = np.asarray(gold, dtype=np.float64)
    e = np.asarray(est, dtype=np.float64)
    if g.shape != e.shape or g.size == 0:
        raise ValueError("gold and estimate must be equal-length and nonempty")
    return g, e


def mae(gold, est):
    g, e = _pair(gold, est)
    return float(np.mean(np.abs(g - e)))


def rmse(gold, est):
    g, e = _pair(gold, est)
    return float(np.sqrt(np.mean((g - e) ** 2)))


def pearson(gold, est):
    """Pearson correlation; NaN when either side has zero variance."""
    g, e = _pair(gold, est)
    gc, ec = g - g.mean(), e - e.mean()
    denom = np.sqrt((gc * gc).sum() * (ec * ec).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((gc * ec).sum() / denom, -1.0, 1.0))


def split_windows(x, window=WINDOW_FRAMES):
    """Non-overlapping [start, end) ranges; the tail remainder is dropped."""
    n = len(x) if not isinstance(x, int) else x
    if n < window:
        raise ValueError(f"input of length {n} shorter than one {window}-frame window")
    return [(i * window, (i + 1) * window) for i in range(n // window)]


def detrend_moving_average(x, width):
    return x - uniform_filter1d(x, size=max(int(width), 1), mode="nearest")


def derivative_to_pulse(deriv, fps=None, filtered=True):
    """Integrate a derivative trace, remove a 1 s moving-average trend, band-pass."""
    fps = fps or deriv.fps
    d = _values(deriv)
    pulse = detrend_moving_average(np.cumsum(d), round(fps))
    if filtered:
        pulse = bandpass(pulse, fps)
    return PulseTrace(pulse, fps) if isinstance(deriv, PulseTrace) else pulse


@dataclass
class HrWindow:
    index: int
    est_hr: float
    gold_hr: float
    snr: float
    frames: tuple
    skin_type: str | None = None
    subject: str | None = None


@dataclass
class MetricsReport:
    windows: list = field(default_factory=list)

    @property
    def gold(self):
        return [w.gold_hr for w in self.windows]

    @property
    def est(self):
        return [w.est_hr for w in self.windows]

    @property
    def mae(self):
        return mae(self.gold, self.est)

    @property
    def rmse(self):
        return rmse(self.gold, self.est)

    @property
    def rho(self):
        return pearson(self.gold, self.est)

    @property
    def mean_snr(self):
        return float(np.mean([w.snr for w in self.windows]))

    def by_skin_type(self):
        groups = {}
        for w in self.windows:
            groups.setdefault(w.skin_type, []).append(w)
        return {k: MetricsReport(v) for k, v in groups.items()}

    def summary(self):
        return {"n_windows": len(self.windows), "mae": self.mae, "rmse": self.rmse,
                "rho": self.rho, "snr": self.mean_snr}


def evaluate_windows(signal_values, gold_values, fps, *, is_derivative=False,
                     window=WINDOW_FRAMES, offset=0, skin_type=None, subject=None):
    """Score one subject: split into windows, post-process each, compare HR.

    ``signal_values`` is the method output aligned with ``gold_values``;
    ``offset`` shifts the reported frame ranges (e.g. past a support segment).
    """
    n = min(len(signal_values), len(gold_values))
    out = []
    for idx, (s, e) in enumerate(split_windows(n, window)):
        seg = np.asarray(signal_values[s:e], dtype=np.float64)
        pulse = derivative_to_pulse(seg, fps) if is_derivative else bandpass(seg, fps)
        gold = bandpass(np.asarray(gold_values[s:e], dtype=np.float64), fps)
        ghr = estimate_hr(gold, fps)
        out.append(HrWindow(idx, estimate_hr(pulse, fps), ghr, snr(pulse, ghr, fps),
                            (s + offset, e + offset), skin_type, subject))
    return out
