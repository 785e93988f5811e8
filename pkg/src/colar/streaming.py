"""Online per-frame inference over a sliding history window."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureSequence
from .dynamic import dynamic_forward_batch
from .errors import DimensionError, FormatError, ParameterError
from .exemplars import ExemplarBank
from .model import ModelParams
from .numeric import softmax
from .static import static_forward_batch


@dataclass
class StepResult:
    scores: np.ndarray  # fused, sums to 1
    s_d: np.ndarray  # dynamic softmax
    s_s: np.ndarray  # static softmax


@dataclass
class StreamState:
    """Holds the last ``T+1`` frames of one stream. Never shared between videos."""

    model: ModelParams
    bank: ExemplarBank
    beta: float | None = None
    buffer: deque = field(init=False)
    frame_index: int = field(init=False, default=-1)

    def __post_init__(self):
        self.buffer = deque(maxlen=self.model.hyper.T + 1)
        if self.beta is None:
            self.beta = self.model.hyper.beta
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")


def fuse(s_s: np.ndarray, s_d: np.ndarray, beta: float) -> np.ndarray:
    return beta * s_s + (1.0 - beta) * s_d


def step(state: StreamState, f0) -> StepResult:
    """Push the newest frame and score it from the frames seen so far."""
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.shape != (state.model.D,):
        raise DimensionError(f"frame shape {f0.shape} != ({state.model.D},)")
    state.buffer.append(f0)
    state.frame_index += 1
    window = np.stack(state.buffer)[None]
    ld, _ = dynamic_forward_batch(window, state.model.dynamic)
    ls, _ = static_forward_batch(f0[None], state.bank, state.model.static)
    s_d = softmax(ld[0])
    s_s = softmax(ls[0])
    return StepResult(fuse(s_s, s_d, state.beta), s_d, s_s)


def detect_video(sequence: FeatureSequence, model: ModelParams, bank: ExemplarBank, beta: float | None = None):
    """Stream a whole video from a fresh state.

    Returns ``(scores, s_d, s_s)``, each ``L x (C+1)``.
    """
    state = StreamState(model, bank, beta)
    rows = [step(state, f) for f in sequence.frames]
    return tuple(np.stack([getattr(r, k) for r in rows]) for k in ("scores", "s_d", "s_s"))


def prediction_records(video_id: str, scores, s_d, s_s):
    for t in range(scores.shape[0]):
        yield {
            "video_id": video_id,
            "frame": t,
            "scores": scores[t].tolist(),
            "s_d": s_d[t].tolist(),
            "s_s": s_s[t].tolist(),
        }


def write_predictions(records, path) -> None:
    """JSON-lines dump, one frame per line."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    tmp.replace(path)


def read_predictions(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: invalid JSON ({exc})") from exc
    return records
