"""Synthetic skin-reflection videos with known pulse ground truth.

A centered ellipse of "skin" carries a pulse along a fixed chrominance
direction on top of a textured diffuse tone and a white specular highlight.
Global illumination flicker multiplies the whole frame, translation jitter
moves the ellipse and Gaussian sensor noise is added per pixel.  Darker skin
classes scale down both the diffuse tone and the pulse amplitude.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .sigproc import FrameSequence, PulseTrace

SKIN_CLASSES = ("II", "III", "IV", "V+VI")
MELANIN_FACTOR = {"II": 1.0, "III": 0.85, "IV": 0.7, "V+VI": 0.4}
CHROM_GAIN = np.array([0.33, 0.77, 0.53])
ELLIPSE_AXES = (0.3125, 0.40625)  # semi-axes as a fraction of width/height, ~40% coverage
HR_LIMITS = (45.0, 150.0)


@dataclass
class SubjectProfile:
    id: str
    skin_tone: tuple = (0.85, 0.65, 0.55)
    melanin_level: str = "II"
    hr_bpm: float = 72.0
    hr_drift: tuple = (0.0, 30.0)  # (depth BPM, period s)
    pulse_strength: float = 0.02
    noise_sigma: float = 0.0
    flicker_amp: float = 0.0
    flicker_hz: float = 0.1
    motion_amp: float = 0.0
    specular_amp: float = 0.0
    background_motion: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.skin_tone = tuple(float(c) for c in self.skin_tone)
        self.hr_drift = tuple(float(c) for c in self.hr_drift)
        if self.melanin_level not in MELANIN_FACTOR:
            raise ValueError(f"unknown skin class {self.melanin_level!r}")
        if not all(0 < c <= 1 for c in self.skin_tone):
            raise ValueError("skin_tone components must lie in (0, 1]")
        depth = self.hr_drift[0]
        if self.hr_bpm - depth < HR_LIMITS[0] or self.hr_bpm + depth > HR_LIMITS[1]:
            raise ValueError("hr_bpm +- drift depth must stay within [45, 150] BPM")
        for name in ("pulse_strength", "noise_sigma", "flicker_amp", "motion_amp", "specular_amp",
                     "background_motion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def melanin_factor(self):
        return MELANIN_FACTOR[self.melanin_level]

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthSample:
    frames: FrameSequence
    gold: PulseTrace
    mask: np.ndarray
    profile: SubjectProfile


def instantaneous_hr(profile, t):
    depth, period = profile.hr_drift
    return profile.hr_bpm + depth * np.sin(2 * np.pi * t / period)


def generate_pulse(profile, duration, fps=30.0):
    """sin(phi) + 0.3 sin(2 phi + pi/4) with phi' = 2 pi HR(t)/60, unit-standardized."""
    n = int(round(duration * fps))
    if n < 2:
        raise ValueError("duration * fps must be >= 2")
    t = np.arange(n) / fps
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(instantaneous_hr(profile, t)[:-1])]) / 60.0 / fps
    p = np.sin(phase) + 0.3 * np.sin(2 * phase + np.pi / 4)
    p = (p - p.mean()) / p.std()
    return PulseTrace(p, fps)


def _smooth_noise(rng, n, fps, sigma_s):
    x = gaussian_filter1d(rng.standard_normal(n + int(6 * sigma_s * fps)), sigma_s * fps)
    x = x[-n:]
    return (x - x.mean()) / (x.std() + 1e-12)


def _waves(rng, n_waves):
    ky, kx = rng.uniform(-0.35, 0.35, size=(2, n_waves))
    return ky, kx, rng.uniform(0, 2 * np.pi, size=n_waves)


def _moving_field(waves, yy, xx, dy, dx, scale):
    """Wave texture translated by per-frame offsets, via the sin(a - b) expansion."""
    ky, kx, ph = waves
    static = ky * yy[..., None] + kx * xx[..., None] + ph  # [h, w, n]
    shift = ky * dy[:, None] + kx * dx[:, None]  # [t, n]
    sa, ca = np.sin(static).astype(np.float32), np.cos(static).astype(np.float32)
    out = np.einsum("hwn,tn->thw", sa, np.cos(shift).astype(np.float32))
    out -= np.einsum("hwn,tn->thw", ca, np.sin(shift).astype(np.float32))
    return 1 + np.float32(scale / np.sqrt(len(ph))) * out


def skin_mask(size=64):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = np.hypot((xx - w / 2) / (ELLIPSE_AXES[0] * w), (yy - h / 2) / (ELLIPSE_AXES[1] * h))
    return r <= 1


def render_video(profile, pulse, size=64, chunk=256):
    """Render frames for ``pulse`` (PulseTrace); returns a SynthSample."""
    rng = np.random.default_rng(profile.seed)
    fps = pulse.fps
    p = np.asarray(pulse.values)
    n = len(p)
    h = w = size
    f32 = np.float32
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    ax, ay = ELLIPSE_AXES[0] * w, ELLIPSE_AXES[1] * h

    tone = (np.asarray(profile.skin_tone) * profile.melanin_factor).astype(f32)
    strength = profile.pulse_strength * profile.melanin_factor
    bg_color = rng.uniform(0.25, 0.6, size=3).astype(f32)
    bg_waves = _waves(rng, 4)
    tex_rng = np.random.default_rng(rng.integers(2 ** 32))
    t = np.arange(n) / fps
    flicker = 1 + profile.flicker_amp * np.sin(2 * np.pi * profile.flicker_hz * t + rng.uniform(0, 2 * np.pi))
    dx = profile.motion_amp * _smooth_noise(rng, n, fps, 0.4)
    dy = profile.motion_amp * _smooth_noise(rng, n, fps, 0.4)
    spec_t = profile.specular_amp * (1 + 0.5 * _smooth_noise(rng, n, fps, 0.25))
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))
    bdx = profile.background_motion * _smooth_noise(rng, n, fps, 0.2)
    bdy = profile.background_motion * _smooth_noise(rng, n, fps, 0.2)
    # texture is anchored to the skin, so it moves with the ellipse
    tex_waves = _waves(tex_rng, 3)
    gain = (strength * CHROM_GAIN).astype(f32)

    frames = np.empty((n, h, w, 3), dtype=f32)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        k = e - s
        u = (xx[None] - (w / 2 + dx[s:e, None, None])).astype(f32)
        v = (yy[None] - (h / 2 + dy[s:e, None, None])).astype(f32)
        r = np.hypot(u / f32(ax), v / f32(ay))
        alpha = np.clip((1 - r) * f32(min(ax, ay)) + f32(0.5), 0, 1)[..., None]
        tex = _moving_field(tex_waves, yy - h / 2, xx - w / 2, dy[s:e], dx[s:e], 0.08)[..., None]
        highlight = np.exp(-((u + f32(0.15 * ax)) ** 2 + (v + f32(0.35 * ay)) ** 2)
                           / f32(2 * (0.25 * ax) ** 2))[..., None]
        background = bg_color * _moving_field(bg_waves, yy, xx, bdy[s:e], bdx[s:e], 0.15)[..., None]
        pulse_term = 1 + p[s:e, None, None, None].astype(f32) * gain
        skin = tone * tex * pulse_term + spec_t[s:e, None, None, None].astype(f32) * highlight
        img = (alpha * skin + (1 - alpha) * background) * flicker[s:e, None, None, None].astype(f32)
        if profile.noise_sigma > 0:
            img += f32(profile.noise_sigma) * noise_rng.standard_normal(size=(k, h, w, 3), dtype=f32)
        frames[s:e] = np.clip(img, 0, 1)
    return SynthSample(FrameSequence(frames, fps), pulse, skin_mask(size), profile)


def simulate(profile, duration, fps=30.0, size=64):
    return render_video(profile, generate_pulse(profile, duration, fps), size=size)


@dataclass
class DomainPreset:
    """Sampling ranges for subject profiles (uniform within each range)."""

    name: str
    tones: tuple
    classes: tuple
    hr: tuple = (55.0, 110.0)
    drift_depth: tuple = (0.0, 4.0)
    drift_period: tuple = (20.0, 40.0)
    pulse_strength: tuple = (0.015, 0.025)
    noise_sigma: tuple = (0.01, 0.03)
    flicker_amp: tuple = (0.0, 0.0)
    flicker_hz: tuple = (0.05, 0.2)
    motion_amp: tuple = (0.0, 0.5)
    specular_amp: tuple = (0.0, 0.05)
    background_motion: tuple = (0.0, 0.0)
    tone_jitter: float = 0.05
    extra: dict = field(default_factory=dict)


DOMAINS = {
    "A": DomainPreset(
        name="A",
        tones=((0.88, 0.68, 0.58), (0.82, 0.62, 0.5), (0.9, 0.72, 0.62)),
        classes=("II", "III", "II", "III", "IV"),
    ),
    "B": DomainPreset(
        name="B",
        tones=((0.62, 0.44, 0.34), (0.55, 0.38, 0.28), (0.7, 0.5, 0.4)),
        classes=("V+VI", "IV", "III", "V+VI", "II"),
        hr=(55.0, 120.0),
        noise_sigma=(0.04, 0.07),
        flicker_amp=(0.02, 0.05),
        motion_amp=(0.5, 1.5),
        specular_amp=(0.04, 0.1),
        background_motion=(1.0, 3.0),
    ),
    "clean": DomainPreset(
        name="clean",
        tones=((0.88, 0.68, 0.58), (0.62, 0.44, 0.34)),
        classes=("II", "III", "IV", "V+VI"),
        noise_sigma=(0.0, 0.0),
        motion_amp=(0.2, 0.5),
        specular_amp=(0.02, 0.05),
        drift_depth=(0.0, 0.0),
    ),
}


def sample_profiles(domain, n_subjects, seed, id_prefix=None):
    """Deterministic profiles; subject ``i`` gets its own seed substream."""
    preset = DOMAINS[domain] if isinstance(domain, str) else domain
    root = np.random.SeedSequence([seed, sum(map(ord, preset.name))])
    children = root.spawn(n_subjects)
    prefix = id_prefix or f"{preset.name}{seed}_"
    profiles = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        u = lambda lo_hi: float(rng.uniform(*lo_hi)) if lo_hi[1] > lo_hi[0] else float(lo_hi[0])
        base = np.asarray(preset.tones[int(rng.integers(len(preset.tones)))])
        tone = np.clip(base * (1 + rng.uniform(-preset.tone_jitter, preset.tone_jitter, 3)), 0.05, 1.0)
        depth = u(preset.drift_depth)
        hr = float(np.clip(u(preset.hr), HR_LIMITS[0] + depth, HR_LIMITS[1] - depth))
        profiles.append(SubjectProfile(
            id=f"{prefix}{i:03d}",
            skin_tone=tuple(tone),
            melanin_level=preset.classes[i % len(preset.classes)],
            hr_bpm=hr,
            hr_drift=(depth, u(preset.drift_period)),
            pulse_strength=u(preset.pulse_strength),
            noise_sigma=u(preset.noise_sigma),
            flicker_amp=u(preset.flicker_amp),
            flicker_hz=u(preset.flicker_hz),
            motion_amp=u(preset.motion_amp),
            specular_amp=u(preset.specular_amp),
            background_motion=u(preset.background_motion),
            seed=int(child.generate_state(1, dtype=np.uint32)[0]),
        ))
    return profiles


def generate_dataset(out_dir, seed, n_subjects, duration, domain="A", fps=30.0, size=64, name=None):
    """Render a domain to disk in the dataset format; returns the manifest path."""
    from .dataset import write_dataset

    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    preset = DOMAINS[domain] if isinstance(domain, str) else domain
    profiles = sample_profiles(preset, n_subjects, seed)
    samples = (simulate(p, duration, fps, size) for p in profiles)
    return write_dataset(out_dir, samples, name=name or f"synth-{preset.name}-{seed}", fps=fps)
