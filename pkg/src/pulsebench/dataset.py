"""On-disk dataset format: a JSON manifest plus one binary video and one
gold CSV per subject.

Video file (little-endian): magic ``PBVID1``, float64 fps, uint32 frame
count, uint32 height, uint32 width, then frames as uint8 RGB, row-major.
Gold file: CSV with header ``frame_index,value``.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sigproc import FrameSequence, PulseTrace

VIDEO_MAGIC = b"PBVID1"
_HEADER = struct.Struct("<dIII")
MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


def write_video(path, frames, fps):
    arr = np.asarray(getattr(frames, "frames", frames))
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    t, h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(_HEADER.pack(float(fps), t, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_video_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(VIDEO_MAGIC))
        if magic != VIDEO_MAGIC:
            raise DatasetError(f"{path}: bad video magic {magic!r}")
        raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    return _HEADER.unpack(raw)


def open_video(path):
    """Memory-map a video file as a uint8 FrameSequence."""
    fps, t, h, w = read_video_header(path)
    offset = len(VIDEO_MAGIC) + _HEADER.size
    expected = offset + t * h * w * 3
    size = Path(path).stat().st_size
    if size != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {size}")
    data = np.memmap(path, dtype=np.uint8, mode="r", offset=offset, shape=(t, h, w, 3))
    return FrameSequence(data, fps)


def write_gold(path, values):
    with open(path, "w", newline="") as fh:
        fh.write("frame_index,value\n")
        for i, v in enumerate(np.asarray(values, dtype=np.float64).tolist()):
            fh.write(f"{i},{v!r}\n")


def read_gold(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "value"]:
        raise DatasetError(f"{path}: missing 'frame_index,value' header")
    try:
        idx = np.array([int(r[0]) for r in rows[1:]])
        vals = np.array([float(r[1]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: unparseable row ({exc})") from None
    if not np.array_equal(idx, np.arange(len(idx))):
        raise DatasetError(f"{path}: frame indices are not 0..N-1")
    return vals


@dataclass
class Subject:
    id: str
    skin_type: str | None
    profile: dict
    frames_path: Path
    gold_path: Path | None
    fps: float
    n_frames: int
    gold_reads: int = 0
    _gold: np.ndarray | None = field(default=None, repr=False)

    @property
    def frames(self):
        return open_video(self.frames_path)

    @property
    def has_gold(self):
        return self.gold_path is not None

    @property
    def gold(self):
        """Reference trace; every access is counted so label isolation is checkable."""
        if self.gold_path is None:
            return None
        self.gold_reads += 1
        if self._gold is None:
            self._gold = read_gold(self.gold_path)
        return PulseTrace(self._gold, self.fps)


@dataclass
class Dataset:
    name: str
    fps: float
    height: int
    width: int
    subjects: list
    root: Path

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def subject(self, sid):
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)

    @property
    def gold_reads(self):
        return sum(s.gold_reads for s in self.subjects)


def write_dataset(out_dir, samples, name, fps):
    """Write SynthSample-like objects (frames, gold, profile) and a manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    height = width = None
    for sample in samples:
        prof = sample.profile
        sid = prof.id
        sub = root / sid
        sub.mkdir(exist_ok=True)
        frames = sample.frames.frames
        height, width = frames.shape[1:3]
        write_video(sub / "frames.pbv", frames, fps)
        gold_rel = None
        if sample.gold is not None:
            write_gold(sub / "gold.csv", sample.gold.values)
            gold_rel = f"{sid}/gold.csv"
        entries.append({
            "id": sid,
            "frames": f"{sid}/frames.pbv",
            "gold": gold_rel,
            "skin_type": prof.melanin_level,
            "profile": prof.to_dict(),
        })
    manifest = {"name": name, "fps": float(fps), "height": height, "width": width, "subjects": entries}
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path):
    """Parse and validate a dataset directory (or its manifest path)."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from None
    fps = float(manifest["fps"])
    subjects = []
    for entry in manifest["subjects"]:
        sid = entry["id"]
        fpath = root / entry["frames"]
        if not fpath.exists():
            raise DatasetError(f"subject {sid}: frame file missing: {fpath}")
        try:
            vfps, t, h, w = read_video_header(fpath)
            open_video(fpath)
        except DatasetError as exc:
            raise DatasetError(f"subject {sid}: {exc}") from None
        if vfps != fps:
            raise DatasetError(f"subject {sid}: fps {vfps} differs from dataset fps {fps}")
        if (h, w) != (manifest["height"], manifest["width"]):
            raise DatasetError(f"subject {sid}: frame size {(h, w)} differs from manifest")
        gpath = None
        gold = None
        if entry.get("gold"):
            gpath = root / entry["gold"]
            if not gpath.exists():
                raise DatasetError(f"subject {sid}: gold file missing: {gpath}")
            try:
                gold = read_gold(gpath)
            except DatasetError as exc:
                raise DatasetError(f"subject {sid}: {exc}") from None
            if len(gold) != t:
                raise DatasetError(
                    f"subject {sid}: gold trace has {len(gold)} samples, expected {t} (frame count)")
        subjects.append(Subject(sid, entry.get("skin_type"), entry.get("profile", {}),
                                fpath, gpath, fps, t, _gold=gold))
    return Dataset(manifest["name"], fps, manifest["height"], manifest["width"], subjects, root)
