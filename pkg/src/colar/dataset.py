"""Per-frame feature datasets: on-disk format, validation and a synthetic generator.

On disk a dataset is a JSON manifest plus one binary feature file per video::

    {"C": 3, "D": 16, "videos": [{"id": "v000", "features": "v000.clrf",
                                  "spans": [[class, start, end], ...]}]}

Feature files are little-endian: ``b"CLRF"``, u32 version (1), u32 D, u32 L,
then ``L*D`` float32 values with frames as rows.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ValidationError

FEATURE_MAGIC = b"CLRF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# Class means are shared by every split built with the same (C, D, separation).
_MEANS_SEED = 0x5EED


@dataclass(frozen=True)
class FeatureSequence:
    video_id: str
    frames: np.ndarray  # (L, D) float64
    labels: np.ndarray  # (L, C + 1) one-hot float64
    instance_spans: tuple[tuple[int, int, int], ...] = ()

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def classes(self) -> np.ndarray:
        """Integer class index per frame."""
        return np.argmax(self.labels, axis=1)


@dataclass(frozen=True)
class FeatureDataset:
    C: int
    D: int
    sequences: tuple[FeatureSequence, ...]
    split: str = "train"
    class_means: np.ndarray | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_frames(self) -> int:
        return sum(s.length for s in self.sequences)

    def class_frames(self, c: int) -> np.ndarray:
        """All frames labelled ``c``, stacked in video order."""
        parts = [s.frames[s.classes == c] for s in self.sequences]
        return np.concatenate(parts, axis=0) if parts else np.empty((0, self.D))


def labels_from_spans(length: int, C: int, spans) -> np.ndarray:
    """One-hot labels for a video; later-starting spans win where spans overlap."""
    cls = np.zeros(length, dtype=np.int64)
    for c, start, end in sorted(spans, key=lambda s: (s[1], s[2])):
        cls[start : end + 1] = c
    return np.eye(C + 1)[cls]


def make_sequence(video_id: str, frames, C: int, spans) -> FeatureSequence:
    frames = np.asarray(frames, dtype=np.float64)
    spans = tuple((int(c), int(s), int(e)) for c, s, e in spans)
    L = frames.shape[0]
    _validate_spans(video_id, spans, L, C)
    return FeatureSequence(video_id, frames, labels_from_spans(L, C, spans), spans)


def _validate_spans(video_id: str, spans, L: int, C: int) -> None:
    for c, start, end in spans:
        if not 1 <= c <= C:
            raise ValidationError(f"{video_id}: span class {c} outside 1..{C}")
        if not 0 <= start <= end < L:
            raise ValidationError(f"{video_id}: span [{start}, {end}] outside [0, {L})")


def validate_sequence(seq: FeatureSequence, C: int) -> None:
    """Check one-hot labels and label/span agreement."""
    L = seq.length
    if seq.labels.shape != (L, C + 1):
        raise ValidationError(f"{seq.video_id}: labels shape {seq.labels.shape} != {(L, C + 1)}")
    if not np.all(np.isfinite(seq.frames)):
        raise ValidationError(f"{seq.video_id}: non-finite feature values")
    ones = seq.labels == 1.0
    if not (np.all(ones.sum(axis=1) == 1) and np.all((seq.labels == 0.0) | ones)):
        raise ValidationError(f"{seq.video_id}: labels are not one-hot")
    _validate_spans(seq.video_id, seq.instance_spans, L, C)
    expected = labels_from_spans(L, C, seq.instance_spans)
    if not np.array_equal(expected, seq.labels):
        raise ValidationError(f"{seq.video_id}: labels disagree with instance spans")


# ----------------------------------------------------------------------------
# binary feature files


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    L, D = frames.shape
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, D, L))
        fh.write(payload)


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, D, L = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * L * D:
        raise FormatError(f"{path}: header says {L}x{D} floats, payload has {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(L, D).astype(np.float64)


# ----------------------------------------------------------------------------
# manifests


def load_dataset(manifest_path, split: str = "train") -> FeatureDataset:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    try:
        C, D, videos = int(doc["C"]), int(doc["D"]), doc["videos"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: missing or malformed field {exc}") from exc
    if C < 1 or D < 1:
        raise ValidationError(f"{manifest_path}: C and D must be positive")

    base = manifest_path.parent
    sequences = []
    for entry in videos:
        vid = str(entry["id"])
        frames = read_features(base / entry["features"])
        if frames.shape[1] != D:
            raise FormatError(f"{vid}: feature dim {frames.shape[1]} != manifest D={D}")
        seq = make_sequence(vid, frames, C, entry.get("spans", []))
        validate_sequence(seq, C)
        sequences.append(seq)
    return FeatureDataset(C, D, tuple(sequences), split)


def save_dataset(dataset: FeatureDataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write feature files and a manifest into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = []
    for seq in dataset.sequences:
        fname = f"{seq.video_id}.clrf"
        write_features(out_dir / fname, seq.frames)
        videos.append(
            {"id": seq.video_id, "features": fname, "spans": [list(s) for s in seq.instance_spans]}
        )
    manifest = out_dir / manifest_name
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text(json.dumps({"C": dataset.C, "D": dataset.D, "videos": videos}, indent=1))
    os.replace(tmp, manifest)
    return manifest


# ----------------------------------------------------------------------------
# synthetic data


def class_means(C: int, D: int, separation: float) -> np.ndarray:
    """Fixed ``(C+1, D)`` means whose closest pair is exactly ``separation`` apart."""
    raw = np.random.Generator(np.random.PCG64(_MEANS_SEED)).standard_normal((C + 1, D))
    diff = raw[:, None, :] - raw[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    closest = dist[np.triu_indices(C + 1, k=1)].min()
    return raw * (separation / closest)


def _instance_layout(L: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    k = int(rng.integers(1, 4))
    while k > 1 and 10 * k > L:
        k -= 1
    longest = max(5, L // (2 * k))
    lengths = rng.integers(5, longest + 1, size=k)
    gap_total = L - int(lengths.sum())
    cuts = np.sort(rng.integers(0, gap_total + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, pos = [], 0
    for gap, n in zip(gaps, lengths):
        start = pos + int(gap)
        spans.append((start, start + int(n) - 1))
        pos = start + int(n)
    return spans


def gen_synthetic(
    C: int,
    D: int,
    n_videos: int,
    frames_per_video: int,
    separation: float,
    rng: np.random.Generator,
    split: str = "train",
    prefix: str = "v",
) -> FeatureDataset:
    """Background-dominated videos with 1-3 embedded action instances each.

    Frame features are the class mean plus unit Gaussian noise. The class
    means depend only on ``(C, D, separation)`` so a train split and a
    held-out split drawn with different generators share the same classes.
    """
    if C < 1 or D < 2 or n_videos < 1 or frames_per_video < 10:
        raise ParameterError("need C >= 1, D >= 2, n_videos >= 1, frames_per_video >= 10")
    if not separation >= 0:
        raise ParameterError(f"separation must be >= 0, got {separation}")
    means = class_means(C, D, separation)
    L = frames_per_video
    sequences = []
    for v in range(n_videos):
        spans = [(int(rng.integers(1, C + 1)), s, e) for s, e in _instance_layout(L, rng)]
        labels = labels_from_spans(L, C, spans)
        cls = np.argmax(labels, axis=1)
        # Round through float32 so the in-memory data equals what a save/load yields.
        frames = (means[cls] + rng.standard_normal((L, D))).astype(np.float32).astype(np.float64)
        sequences.append(FeatureSequence(f"{prefix}{v:03d}", frames, labels, tuple(spans)))
    return FeatureDataset(C, D, tuple(sequences), split, class_means=means)
