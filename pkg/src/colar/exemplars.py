"""Per-category exemplar banks built with K-means.

Bank files are little-endian: ``b"CLRB"``, u32 version (1), u32 C, u32 M,
u32 D, then ``(C+1)*M*D`` float32 values ordered class, exemplar, feature.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset
from .errors import DataError, FormatError, NumericError, ParameterError

BANK_MAGIC = b"CLRB"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class ExemplarBank:
    exemplars: np.ndarray  # (C + 1, M, D)

    def __post_init__(self):
        ex = self.exemplars
        if ex.ndim != 3 or ex.shape[0] < 2 or ex.shape[1] < 1:
            raise ParameterError(f"exemplars must be (C+1, M, D) with C, M >= 1, got {ex.shape}")
        if not np.all(np.isfinite(ex)):
            raise NumericError("exemplar bank contains non-finite values")

    @property
    def C(self) -> int:
        return self.exemplars.shape[0] - 1

    @property
    def M(self) -> int:
        return self.exemplars.shape[1]

    @property
    def D(self) -> int:
        return self.exemplars.shape[2]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float]
    n_repaired: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # Direct differences keep a point's distance to itself exactly zero.
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def _kmeans_pp(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    N = points.shape[0]
    chosen = [int(rng.integers(N))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, M):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            idx = int(rng.integers(N))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _update(points: np.ndarray, labels: np.ndarray, M: int) -> tuple[np.ndarray, int]:
    D = points.shape[1]
    counts = np.bincount(labels, minlength=M)
    sums = np.zeros((M, D))
    np.add.at(sums, labels, points)
    centroids = np.zeros((M, D))
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    labels = labels.copy()
    taken = np.zeros(points.shape[0], dtype=bool)
    repaired = 0
    for j in np.flatnonzero(~nonempty):
        own = np.einsum("nd,nd->n", points - centroids[labels], points - centroids[labels])
        own[taken] = -1.0
        far = int(np.argmax(own))
        centroids[j] = points[far]
        labels[far] = j
        taken[far] = True
        repaired += 1
    return centroids, repaired


def kmeans(
    points,
    M: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are reseeded at the point farthest from its centroid.
    The objective is recorded after every assignment step and must never
    increase; a violation raises ``NumericError``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ParameterError(f"points must be N x D, got shape {points.shape}")
    N = points.shape[0]
    if M < 1 or N < M:
        raise ParameterError(f"need N >= M >= 1, got N={N}, M={M}")

    centroids = _kmeans_pp(points, M, rng)
    history: list[float] = []
    labels = None
    repaired = 0

    def assign(c):
        d2 = _sq_dists(points, c)
        lab = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(N), lab].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise NumericError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        return lab, obj

    for _ in range(max_iter):
        new_labels, obj = assign(centroids)
        done = labels is not None and (
            np.array_equal(new_labels, labels)
            or abs(history[-2] - obj) <= tol * max(history[-2], np.finfo(float).tiny)
        )
        labels = new_labels
        if done:
            break
        centroids, n = _update(points, labels, M)
        repaired += n
    else:
        labels, obj = assign(centroids)
    return KMeansResult(centroids, labels, obj, history, repaired)


def build_bank(train: FeatureDataset, M: int, rng: np.random.Generator, **kmeans_kw) -> ExemplarBank:
    """Cluster each class's training frames (background included) into ``M`` exemplars."""
    if M < 1:
        raise ParameterError(f"M must be >= 1, got {M}")
    per_class = []
    for c in range(train.C + 1):
        frames = train.class_frames(c)
        if frames.shape[0] < M:
            raise DataError(f"class {c} has {frames.shape[0]} training frames, fewer than M={M}")
        per_class.append(kmeans(frames, M, rng, **kmeans_kw).centroids)
    # Stored as float32 on disk; keep the in-memory bank identical to a reloaded one.
    bank = np.stack(per_class).astype(np.float32).astype(np.float64)
    return ExemplarBank(bank)


def save_bank(bank: ExemplarBank, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.C, bank.M, bank.D))
        fh.write(np.ascontiguousarray(bank.exemplars, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_bank(path) -> ExemplarBank:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated bank header")
    magic, version, C, M, D = _HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise FormatError(f"{path}: bad bank magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    body = raw[_HEADER.size :]
    n = (C + 1) * M * D
    if len(body) != 4 * n:
        raise FormatError(f"{path}: expected {n} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(C + 1, M, D).astype(np.float64)
    return ExemplarBank(data)
