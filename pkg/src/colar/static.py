"""Static branch: consult each category's K-means exemplars.

The current frame and every exemplar are projected to key and value
space. Within each category, cosine similarity between the frame key and
the exemplar keys is softmaxed over the M exemplars and used to pool the
exemplar values into one feature per category. A shared linear score per
category feature, softmaxed across categories, pools those into a single
exemplary feature; it is added to the frame's value feature and classified.

Exemplars are constants: no gradient flows into the bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .exemplars import ExemplarBank
from .model import StaticParams
from .numeric import cosine_backward, cosine_forward, softmax, softmax_backward


@dataclass
class StaticOutput:
    logits: np.ndarray  # (C + 1,)
    per_category_attention: np.ndarray  # (C + 1, M)
    category_features: np.ndarray  # (C + 1, H)
    category_weights: np.ndarray  # (C + 1,)
    aggregated: np.ndarray  # (H,)
    value_feature: np.ndarray  # (H,)


@dataclass
class _Cache:
    f0: np.ndarray
    bank: np.ndarray
    ek: np.ndarray
    ev: np.ndarray
    e0k: np.ndarray
    nu_hat: np.ndarray
    ec: np.ndarray
    a: np.ndarray
    z: np.ndarray


def _bank_array(bank) -> np.ndarray:
    return bank.exemplars if isinstance(bank, ExemplarBank) else np.asarray(bank, dtype=np.float64)


def static_forward_batch(f0, bank, params: StaticParams):
    """Logits ``(B, C+1)`` for frames ``f0`` of shape ``(B, D)``, plus a backward cache."""
    p = params
    f0 = np.asarray(f0, dtype=np.float64)
    E = _bank_array(bank)
    D = p.psi_k_w.shape[1]
    if f0.ndim != 2 or f0.shape[1] != D or E.ndim != 3 or E.shape[2] != D:
        raise DimensionError(f"frames {f0.shape} / bank {E.shape} do not match input dim {D}")
    if E.shape[0] != p.cls_w.shape[0]:
        raise DimensionError(f"bank has {E.shape[0]} classes, classifier has {p.cls_w.shape[0]}")

    ek = E @ p.psi_k_w.T + p.psi_k_b  # (C+1, M, H)
    ev = E @ p.psi_v_w.T + p.psi_v_b
    e0k = f0 @ p.gamma_k_w.T + p.gamma_k_b  # (B, H)
    e0v = f0 @ p.gamma_v_w.T + p.gamma_v_b

    nu = cosine_forward(e0k[:, None, None, :], ek[None])  # (B, C+1, M)
    nu_hat = softmax(nu, axis=-1)
    ec = np.einsum("bcm,cmh->bch", nu_hat, ev)
    a = softmax(ec @ p.attn_w, axis=-1)
    e = np.einsum("bc,bch->bh", a, ec)
    z = e0v + e
    logits = z @ p.cls_w.T + p.cls_b
    return logits, _Cache(f0, E, ek, ev, e0k, nu_hat, ec, a, z)


def static_backward_batch(cache: _Cache, params: StaticParams, dlogits):
    """Returns ``(StaticParams of gradients, gradient w.r.t. the frames)``."""
    c, p = cache, params
    H = p.attn_w.shape[0]
    D = c.f0.shape[1]
    dz = dlogits @ p.cls_w
    dcls_w = dlogits.T @ c.z
    dcls_b = dlogits.sum(axis=0)

    # z = e0v + sum_c a_c ec_c
    de0v = dz
    da = np.einsum("bh,bch->bc", dz, c.ec)
    dec = c.a[..., None] * dz[:, None, :]
    draw = softmax_backward(c.a, da)
    dattn_w = np.einsum("bc,bch->h", draw, c.ec)
    dec += draw[..., None] * p.attn_w

    # ec = sum_m nu_hat ev
    dnu_hat = np.einsum("bch,cmh->bcm", dec, c.ev)
    dev = np.einsum("bcm,bch->cmh", c.nu_hat, dec)
    dnu = softmax_backward(c.nu_hat, dnu_hat)
    dq, dkeys = cosine_backward(c.e0k[:, None, None, :], c.ek[None], dnu)
    de0k = dq.sum(axis=(1, 2))
    dek = dkeys.sum(axis=0)

    E2 = c.bank.reshape(-1, D)
    grads = StaticParams(
        psi_k_w=dek.reshape(-1, H).T @ E2, psi_k_b=dek.reshape(-1, H).sum(axis=0),
        psi_v_w=dev.reshape(-1, H).T @ E2, psi_v_b=dev.reshape(-1, H).sum(axis=0),
        gamma_k_w=de0k.T @ c.f0, gamma_k_b=de0k.sum(axis=0),
        gamma_v_w=de0v.T @ c.f0, gamma_v_b=de0v.sum(axis=0),
        attn_w=dattn_w, cls_w=dcls_w, cls_b=dcls_b,
    )  # fmt: skip
    df0 = de0k @ p.gamma_k_w + de0v @ p.gamma_v_w
    return grads, df0


def forward_static(f0, bank, params: StaticParams) -> StaticOutput:
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim != 1:
        raise DimensionError(f"frame must be a vector, got shape {f0.shape}")
    logits, c = static_forward_batch(f0[None], bank, params)
    return StaticOutput(
        logits=logits[0],
        per_category_attention=c.nu_hat[0],
        category_features=c.ec[0],
        category_weights=c.a[0],
        aggregated=np.einsum("c,ch->h", c.a[0], c.ec[0]),
        value_feature=f0 @ params.gamma_v_w.T + params.gamma_v_b,
    )


def backward_static(f0, bank, params: StaticParams, upstream):
    """Gradients of ``upstream . logits`` w.r.t. every parameter and the frame."""
    f0 = np.asarray(f0, dtype=np.float64)
    _, cache = static_forward_batch(f0[None], bank, params)
    grads, df0 = static_backward_batch(cache, params, np.asarray(upstream, dtype=np.float64)[None])
    return grads, df0[0]
