"""Frame-level online action detection metrics.

Scores from every frame of every test video are pooled before ranking.
Ranking is by descending score with ties broken by ascending pooled frame
index (videos in dataset order, frames in time order).

* ``average_precision``: all-point interpolated AP.
* ``calibrated_ap``: mean calibrated precision at the positives, where true
  positives are reweighted by ``w`` (background frames / action frames).
* per-portion mcAP: each ground-truth instance is cut into ten equal
  portions; for portion ``p`` the positives are the class frames in that
  portion of any instance and the negatives are all background frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import FeatureDataset
from .errors import FormatError, ParameterError, UndefinedMetricError, ValidationError

N_PORTIONS = 10


def _ranked_hits(scores, positives) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValidationError(f"scores {scores.shape} and positives {positives.shape} must be equal-length vectors")
    if np.isnan(scores).any():
        raise ValidationError("scores contain NaN")
    if not positives.any():
        raise UndefinedMetricError("metric undefined without positives")
    order = np.lexsort((np.arange(scores.size), -scores))
    return positives[order]


def average_precision(scores, positives) -> float:
    hits = _ranked_hits(scores, positives)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(envelope[hits]) / int(tp[-1])


def noninterpolated_ap(scores, positives) -> float:
    """Mean precision at the rank of each positive."""
    hits = _ranked_hits(scores, positives)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return math.fsum(precision[hits]) / int(tp[-1])


def calibrated_ap(scores, positives, w: float) -> float:
    if not w > 0:
        raise ParameterError(f"w must be > 0, got {w}")
    hits = _ranked_hits(scores, positives)
    tp = np.cumsum(hits)
    fp = np.arange(1, hits.size + 1) - tp
    cprec = w * tp / (w * tp + fp)
    return math.fsum(cprec[hits]) / int(tp[-1])


@dataclass
class EvalReport:
    per_class_ap: list[float]
    map: float
    per_class_cap: list[float]
    cmap: float
    portion_mcap: list[float]
    w: float

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, list):
                return [clean(x) for x in v]
            return None if isinstance(v, float) and math.isnan(v) else v

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=1)

    def table(self) -> str:
        def pct(v):
            return "   n/a" if math.isnan(v) else f"{100 * v:6.2f}"

        lines = ["class      AP     cAP"]
        for c, (ap, cap) in enumerate(zip(self.per_class_ap, self.per_class_cap), start=1):
            lines.append(f"{c:>5}  {pct(ap)}  {pct(cap)}")
        lines.append(f"  mean {pct(self.map)}  {pct(self.cmap)}")
        lines.append("portion mcAP: " + " ".join(pct(v) for v in self.portion_mcap))
        return "\n".join(lines)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def pool_predictions(predictions, dataset: FeatureDataset, key: str = "scores") -> np.ndarray:
    """Stack per-frame records into a pooled ``(N, C+1)`` matrix in dataset order."""
    table = {}
    for rec in predictions:
        try:
            k = (str(rec["video_id"]), int(rec["frame"]))
            row = rec[key]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed prediction record: {exc}") from exc
        if k in table:
            raise ValidationError(f"duplicate prediction for video {k[0]} frame {k[1]}")
        table[k] = row
    rows = []
    for seq in dataset.sequences:
        for t in range(seq.length):
            try:
                rows.append(table.pop((seq.video_id, t)))
            except KeyError:
                raise ValidationError(f"missing prediction for video {seq.video_id} frame {t}") from None
    if table:
        extra = next(iter(table))
        raise ValidationError(f"prediction for unknown frame: video {extra[0]} frame {extra[1]}")
    scores = np.asarray(rows, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != dataset.C + 1:
        raise ValidationError(f"score rows must have {dataset.C + 1} entries")
    return scores


def portion_index(dataset: FeatureDataset) -> np.ndarray:
    """Pooled per-frame portion (0..9) within its instance, or -1 outside instances."""
    parts = []
    for seq in dataset.sequences:
        portion = np.full(seq.length, -1, dtype=np.int64)
        cls = seq.classes
        for c, start, end in seq.instance_spans:
            n = end - start + 1
            frames = np.arange(start, end + 1)
            keep = cls[frames] == c
            portion[frames[keep]] = (N_PORTIONS * (frames[keep] - start)) // n
        parts.append(portion)
    return np.concatenate(parts)


def evaluate_scores(scores: np.ndarray, dataset: FeatureDataset) -> EvalReport:
    """Metrics for a pooled ``(N, C+1)`` score matrix aligned with ``dataset``."""
    cls = np.concatenate([s.classes for s in dataset.sequences])
    if scores.shape != (cls.size, dataset.C + 1):
        raise ValidationError(f"scores shape {scores.shape} != {(cls.size, dataset.C + 1)}")
    n_bg = int(np.sum(cls == 0))
    n_act = cls.size - n_bg
    if n_act == 0 or n_bg == 0:
        raise UndefinedMetricError("need both background and action frames")
    w = n_bg / n_act

    aps, caps = [], []
    for c in range(1, dataset.C + 1):
        pos = cls == c
        if not pos.any():
            aps.append(math.nan)
            caps.append(math.nan)
            continue
        aps.append(average_precision(scores[:, c], pos))
        caps.append(calibrated_ap(scores[:, c], pos, w))
    if all(math.isnan(v) for v in aps):
        raise UndefinedMetricError("no action class has positives")

    portion = portion_index(dataset)
    bg = cls == 0
    portion_mcap = []
    for p in range(N_PORTIONS):
        vals = []
        for c in range(1, dataset.C + 1):
            pos = (portion == p) & (cls == c)
            if not pos.any():
                continue
            keep = pos | bg
            vals.append(calibrated_ap(scores[keep, c], pos[keep], w))
        portion_mcap.append(_nanmean(vals))

    return EvalReport(aps, _nanmean(aps), caps, _nanmean(caps), portion_mcap, w)


def evaluate(predictions, dataset: FeatureDataset, key: str = "scores") -> EvalReport:
    """Metrics for a prediction dump (iterable of per-frame records)."""
    return evaluate_scores(pool_predictions(predictions, dataset, key), dataset)
