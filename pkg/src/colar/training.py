"""Joint training of both branches with cross-entropy plus a symmetric-KL consistency term."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset
from .dynamic import dynamic_backward_batch, dynamic_forward_batch
from .errors import DataError, DimensionError, FormatError, NumericError, ParameterError, ValidationError
from .exemplars import ExemplarBank
from .model import Hyper, ModelParams, init_model
from .numeric import softmax, softmax_backward, spawn_rngs
from .static import static_backward_batch, static_forward_batch

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 3e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 5
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ParameterError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("lr_decay_every and batch_size must be >= 1, epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def read_run_config(path) -> tuple[TrainConfig, dict]:
    """Split a JSON config into a TrainConfig and the model hyperparameters (T, H, lambda, beta)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {"T", "H", "lambda", "beta"}
    unknown = set(doc) - train_keys - model_keys
    if unknown:
        raise FormatError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = TrainConfig(**{k: v for k, v in doc.items() if k in train_keys})
    model = {("lam" if k == "lambda" else k): v for k, v in doc.items() if k in model_keys}
    return cfg, model


# ----------------------------------------------------------------------------
# loss


def _log_clamped(p):
    return np.log(np.maximum(p, PROB_CLAMP))


def _loss_terms(logits_d, logits_s, y):
    pd = softmax(logits_d, axis=-1)
    ps = softmax(logits_s, axis=-1)
    lpd, lps = _log_clamped(pd), _log_clamped(ps)
    ce_d = -np.sum(y * lpd, axis=-1)
    ce_s = -np.sum(y * lps, axis=-1)
    cons = np.sum(pd * (lpd - lps), axis=-1) + np.sum(ps * (lps - lpd), axis=-1)
    return pd, ps, lpd, lps, ce_d, ce_s, cons


def loss_terms(s_d, s_s, y):
    """Per-sample ``(L_cls_d, L_cls_s, L_cons)`` for batched logits, without validation."""
    return _loss_terms(s_d, s_s, y)[-3:]


def _check_onehot(y):
    y = np.asarray(y, dtype=np.float64)
    ones = y == 1.0
    if not (np.all(ones.sum(axis=-1) == 1) and np.all(ones | (y == 0.0))):
        raise ValidationError("target is not one-hot")
    return y


def loss(s_d, s_s, y, lam: float) -> tuple[float, dict[str, float]]:
    """Total loss for one frame and its parts ``L_cls_d``, ``L_cls_s``, ``L_cons``."""
    y = _check_onehot(y)
    s_d = np.asarray(s_d, dtype=np.float64)
    s_s = np.asarray(s_s, dtype=np.float64)
    if not (np.all(np.isfinite(s_d)) and np.all(np.isfinite(s_s))):
        raise NumericError("non-finite logits")
    *_, ce_d, ce_s, cons = _loss_terms(s_d, s_s, y)
    total = ce_d + ce_s + lam * cons
    return float(total), {"L_cls_d": float(ce_d), "L_cls_s": float(ce_s), "L_cons": float(cons)}


def loss_backward(s_d, s_s, y, lam: float, use_static: bool = True):
    """Per-sample loss parts and gradients of the batch-mean loss w.r.t. both logit sets.

    With ``use_static=False`` only the dynamic cross-entropy is used and the
    static logits are ignored.
    """
    B = s_d.shape[0]
    pd = softmax(s_d, axis=-1)
    lpd = _log_clamped(pd)
    live_d = pd > PROB_CLAMP
    ce_d = -np.sum(y * lpd, axis=-1)
    g_d = -y * np.divide(1.0, pd, out=np.zeros_like(pd), where=live_d)
    if not use_static:
        zero = np.zeros(B)
        return (ce_d, zero, zero), softmax_backward(pd, g_d) / B, None

    ps = softmax(s_s, axis=-1)
    lps = _log_clamped(ps)
    live_s = ps > PROB_CLAMP
    inv_d = np.divide(1.0, pd, out=np.zeros_like(pd), where=live_d)
    inv_s = np.divide(1.0, ps, out=np.zeros_like(ps), where=live_s)
    ce_s = -np.sum(y * lps, axis=-1)
    cons = np.sum(pd * (lpd - lps), axis=-1) + np.sum(ps * (lps - lpd), axis=-1)
    g_s = -y * inv_s
    if lam != 0:
        g_d = g_d + lam * ((lpd - lps) + live_d - ps * inv_d)
        g_s = g_s + lam * ((lps - lpd) + live_s - pd * inv_s)
    return (ce_d, ce_s, cons), softmax_backward(pd, g_d) / B, softmax_backward(ps, g_s) / B


def model_loss_and_grads(model: ModelParams, bank, windows, valid, y, relu: bool = True):
    """Batch-mean total loss and gradients for both branches (used by tests and training)."""
    lam = model.hyper.lam
    ld, cd = dynamic_forward_batch(windows, model.dynamic, valid, relu)
    ls, cs = static_forward_batch(windows[:, -1], bank, model.static)
    (ce_d, ce_s, cons), gd, gs = loss_backward(ld, ls, y, lam)
    gdyn, _ = dynamic_backward_batch(cd, model.dynamic, gd)
    gsta, _ = static_backward_batch(cs, model.static, gs)
    total = float(np.mean(ce_d + ce_s + lam * cons))
    return total, gdyn, gsta


# ----------------------------------------------------------------------------
# windows


def frame_windows(frames: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``T+1``-frame windows of a video, left-padded with zeros at the start.

    Returns windows ``(L, T+1, D)`` and the validity mask ``(L, T+1)``.
    """
    L, D = frames.shape
    padded = np.concatenate([np.zeros((T, D)), frames])
    win = np.lib.stride_tricks.sliding_window_view(padded, T + 1, axis=0)
    win = np.moveaxis(win, -1, 1)
    offs = np.arange(L)[:, None] - T + np.arange(T + 1)[None, :]
    return win, offs >= 0


class _Adam:
    def __init__(self, params, b1, b2, eps):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params}
        self.v = {k: np.zeros_like(v) for k, v in params}
        self.t = 0

    def step(self, params, grads, lr: float, frozen=()) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for (name, p), (_, g) in zip(params, grads):
            if name in frozen:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    dataset: FeatureDataset,
    bank: ExemplarBank,
    config: TrainConfig,
    hyper: Hyper | None = None,
    *,
    use_static: bool = True,
    frozen: tuple[str, ...] = (),
    init: ModelParams | None = None,
    relu: bool = True,
) -> tuple[ModelParams, list[dict]]:
    """Optimise both branches with Adam; returns the model and the per-epoch loss curve.

    Every epoch visits each labelled frame once in a freshly shuffled order,
    supervising the last frame of its window. ``frozen`` lists parameter
    names (``"dynamic.cls_w"``, ``"static.cls_b"``, ...) that are not
    updated. ``use_static=False`` trains the dynamic branch alone on its
    cross-entropy.
    """
    if len(dataset) == 0 or dataset.n_frames == 0:
        raise DataError("training dataset is empty")
    hyper = hyper or Hyper(M=bank.M)
    if bank.D != dataset.D or bank.C != dataset.C:
        raise DimensionError(
            f"bank (C={bank.C}, D={bank.D}) does not match dataset (C={dataset.C}, D={dataset.D})"
        )
    model = init.copy() if init is not None else init_model(dataset.C, dataset.D, hyper, config.seed)
    T = model.hyper.T
    lam = model.hyper.lam

    per_video = [frame_windows(s.frames, T) for s in dataset.sequences]
    windows = np.concatenate([w for w, _ in per_video])
    valid = np.concatenate([v for _, v in per_video])
    targets = np.concatenate([s.labels for s in dataset.sequences])
    N = windows.shape[0]

    shuffle_rng = spawn_rngs(config.seed, 3)[2]
    params = [("dynamic." + k, v) for k, v in model.dynamic.items()]
    if use_static:
        params += [("static." + k, v) for k, v in model.static.items()]
    adam = _Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    curve = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(N)
        sums = np.zeros(3)
        for start in range(0, N, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, m, y = windows[idx], valid[idx], targets[idx]
            ld, cd = dynamic_forward_batch(x, model.dynamic, m, relu)
            if use_static:
                ls, cs = static_forward_batch(x[:, -1], bank, model.static)
            else:
                ls = None
            parts, gd, gs = loss_backward(ld, ls, y, lam, use_static)
            sums += [p.sum() for p in parts]
            grads = [("dynamic." + k, g) for k, g in dynamic_backward_batch(cd, model.dynamic, gd, False)[0].items()]
            if use_static:
                grads += [("static." + k, g) for k, g in static_backward_batch(cs, model.static, gs)[0].items()]
            adam.step(params, grads, lr, frozen)
        ce_d, ce_s, cons = sums / N
        total = ce_d + ce_s + (lam * cons if use_static else 0.0)
        if not math.isfinite(total):
            raise NumericError(f"loss became non-finite in epoch {epoch}")
        curve.append(
            {"epoch": epoch, "L_cls_d": ce_d, "L_cls_s": ce_s, "L_cons": cons, "total": total, "lr": lr}
        )
        log.info("epoch %d  total %.5f  lr %.2e", epoch, total, lr)
    return model, curve


def write_loss_log(curve: list[dict], path) -> None:
    Path(path).write_text(json.dumps(curve, indent=1))
