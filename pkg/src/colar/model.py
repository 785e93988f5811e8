"""Learnable parameters of both branches, initialisation and checkpoint files.

Checkpoint layout (little-endian)::

    b"CLRC"  u32 version=1
    u32 C, D, T, H, M
    f64 lambda, beta
    every tensor of DynamicParams then StaticParams, in field order, as f64

Tensor shapes follow from the header, so none are stored.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, ParameterError
from .numeric import spawn_rngs

CKPT_MAGIC = b"CLRC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIdd")


class _Tensors:
    """Mixin for dataclasses whose fields are all float64 arrays."""

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.items()})

    def zeros_like(self):
        return self.map(np.zeros_like)

    def copy(self):
        return self.map(np.copy)

    def scaled(self, alpha: float):
        return self.map(lambda v: alpha * v)

    def equal(self, other) -> bool:
        return all(np.array_equal(v, getattr(other, k)) for k, v in self.items())


@dataclass
class DynamicParams(_Tensors):
    """Key/value conv stacks (two kernel-3 layers each) and the dynamic classifier."""

    k1_w: np.ndarray  # (H, D, 3)
    k1_b: np.ndarray
    k2_w: np.ndarray  # (H, H, 3)
    k2_b: np.ndarray
    v1_w: np.ndarray
    v1_b: np.ndarray
    v2_w: np.ndarray
    v2_b: np.ndarray
    cls_w: np.ndarray  # (C + 1, H)
    cls_b: np.ndarray


@dataclass
class StaticParams(_Tensors):
    """Exemplar/frame projections, category attention vector and the static classifier.

    ``attn_w`` scores each category feature; a bias would cancel in the
    softmax across categories so there is none.
    """

    psi_k_w: np.ndarray  # (H, D)
    psi_k_b: np.ndarray
    psi_v_w: np.ndarray
    psi_v_b: np.ndarray
    gamma_k_w: np.ndarray
    gamma_k_b: np.ndarray
    gamma_v_w: np.ndarray
    gamma_v_b: np.ndarray
    attn_w: np.ndarray  # (H,)
    cls_w: np.ndarray  # (C + 1, H)
    cls_b: np.ndarray


@dataclass(frozen=True)
class Hyper:
    T: int = 64
    H: int = 1024
    M: int = 8
    lam: float = 1.0
    beta: float = 0.3

    def __post_init__(self):
        if self.T < 1 or self.H < 1 or self.M < 1:
            raise ParameterError(f"T, H, M must be positive: {self}")
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class ModelParams:
    C: int
    D: int
    hyper: Hyper
    dynamic: DynamicParams
    static: StaticParams

    def copy(self) -> "ModelParams":
        return replace(self, dynamic=self.dynamic.copy(), static=self.static.copy())

    def equal(self, other: "ModelParams") -> bool:
        return (
            (self.C, self.D, self.hyper) == (other.C, other.D, other.hyper)
            and self.dynamic.equal(other.dynamic)
            and self.static.equal(other.static)
        )


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_dynamic(C: int, D: int, H: int, rng: np.random.Generator) -> DynamicParams:
    z = np.zeros
    return DynamicParams(
        k1_w=_kaiming(rng, (H, D, 3), 3 * D), k1_b=z(H),
        k2_w=_kaiming(rng, (H, H, 3), 3 * H), k2_b=z(H),
        v1_w=_kaiming(rng, (H, D, 3), 3 * D), v1_b=z(H),
        v2_w=_kaiming(rng, (H, H, 3), 3 * H), v2_b=z(H),
        cls_w=_kaiming(rng, (C + 1, H), H), cls_b=z(C + 1),
    )  # fmt: skip


def init_static(C: int, D: int, H: int, rng: np.random.Generator) -> StaticParams:
    z = np.zeros
    return StaticParams(
        psi_k_w=_kaiming(rng, (H, D), D), psi_k_b=z(H),
        psi_v_w=_kaiming(rng, (H, D), D), psi_v_b=z(H),
        gamma_k_w=_kaiming(rng, (H, D), D), gamma_k_b=z(H),
        gamma_v_w=_kaiming(rng, (H, D), D), gamma_v_b=z(H),
        attn_w=_kaiming(rng, (H,), H),
        cls_w=_kaiming(rng, (C + 1, H), H), cls_b=z(C + 1),
    )  # fmt: skip


def init_model(C: int, D: int, hyper: Hyper, seed: int) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases.

    Each branch draws from its own child stream of ``seed``, so the dynamic
    initialisation does not depend on whether the static branch is built.
    """
    rng_dyn, rng_sta = spawn_rngs(seed, 2)
    return ModelParams(
        C, D, hyper, init_dynamic(C, D, hyper.H, rng_dyn), init_static(C, D, hyper.H, rng_sta)
    )


def _shapes(C, D, H):
    conv_in, conv_hid, cls = [(H, D, 3), (H,)], [(H, H, 3), (H,)], [(C + 1, H), (C + 1,)]
    dyn = conv_in + conv_hid + conv_in + conv_hid + cls
    sta = [(H, D), (H,)] * 4 + [(H,)] + cls
    return dyn, sta


def save_checkpoint(model: ModelParams, path) -> None:
    """Atomic write (temp file then rename)."""
    h = model.hyper
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(
            _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.C, model.D, h.T, h.H, h.M, h.lam, h.beta)
        )
        for part in (model.dynamic, model.static):
            for _, arr in part.items():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, C, D, T, H, M, lam, beta = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    dyn_shapes, sta_shapes = _shapes(C, D, H)
    need = 8 * sum(int(np.prod(s)) for s in dyn_shapes + sta_shapes)
    body = raw[_HEADER.size :]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = flat[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    names_d = [f.name for f in fields(DynamicParams)]
    names_s = [f.name for f in fields(StaticParams)]
    dyn = DynamicParams(**{k: take(s) for k, s in zip(names_d, dyn_shapes)})
    sta = StaticParams(**{k: take(s) for k, s in zip(names_s, sta_shapes)})
    return ModelParams(C, D, Hyper(T, H, M, lam, beta), dyn, sta)
