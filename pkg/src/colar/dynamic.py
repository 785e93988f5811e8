"""Dynamic branch: consult the frame's own history.

Each frame of the window is projected to key and value space by two
kernel-3 temporal conv layers. The current frame's key is compared with
every key in the window by cosine similarity; the softmaxed similarities
weight the value features into a historical feature, which is added to the
current value feature and classified.

Windows are ``(L, D)`` arrays with frames as rows, oldest first, so the
current frame is the last row. The batched entry points take ``(B, L, D)``
and an optional ``valid`` mask for left-padded windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .model import DynamicParams
from .numeric import conv1d_backward, conv1d_forward, cosine_backward, cosine_forward, softmax, softmax_backward


@dataclass
class DynamicOutput:
    logits: np.ndarray  # (C + 1,)
    attention: np.ndarray  # (L,), oldest frame first
    historical_feature: np.ndarray  # (H,)
    value_feature: np.ndarray  # (H,)


@dataclass
class _Cache:
    x: np.ndarray
    mask: np.ndarray
    relu: bool
    zk1: np.ndarray
    hk1: np.ndarray
    fk: np.ndarray
    zv1: np.ndarray
    hv1: np.ndarray
    fv: np.ndarray
    attn: np.ndarray
    z: np.ndarray


def _check(x: np.ndarray, p: DynamicParams) -> None:
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"window batch must be (B, L >= 1, D), got {x.shape}")
    if x.shape[2] != p.k1_w.shape[1]:
        raise DimensionError(f"window dim {x.shape[2]} != parameter input dim {p.k1_w.shape[1]}")


def _stack(x, w1, b1, w2, b2, m, relu):
    z1 = conv1d_forward(x, w1, b1)
    h1 = (np.maximum(z1, 0.0) if relu else z1) * m
    return z1, h1, conv1d_forward(h1, w2, b2)


def _stack_backward(c: _Cache, z1, h1, w1, w2, grad, input_grad):
    dh1, dw2, db2 = conv1d_backward(h1, w2, grad)
    dz1 = dh1 * c.mask
    if c.relu:
        dz1 = dz1 * (z1 > 0)
    dx, dw1, db1 = conv1d_backward(c.x, w1, dz1, input_grad)
    return dx, dw1, db1, dw2, db2


def dynamic_forward_batch(x, params: DynamicParams, valid=None, relu: bool = True):
    """Logits ``(B, C+1)`` for a window batch, plus a cache for the backward pass.

    ``valid`` marks real frames (a suffix of each row); padded frames must be
    zero so the first real frame sees the same zero padding as an unpadded
    window would.
    """
    x = np.asarray(x, dtype=np.float64)
    _check(x, params)
    if valid is None:
        valid = np.ones(x.shape[:2], dtype=bool)
    mask = valid[..., None].astype(np.float64)
    p = params
    zk1, hk1, fk = _stack(x, p.k1_w, p.k1_b, p.k2_w, p.k2_b, mask, relu)
    zv1, hv1, fv = _stack(x, p.v1_w, p.v1_b, p.v2_w, p.v2_b, mask, relu)

    sim = cosine_forward(fk[:, -1:, :], fk)
    attn = softmax(sim, axis=-1, mask=valid)
    hist = np.einsum("bl,blh->bh", attn, fv)
    z = fv[:, -1] + hist
    logits = z @ p.cls_w.T + p.cls_b
    cache = _Cache(x, mask, relu, zk1, hk1, fk, zv1, hv1, fv, attn, z)
    return logits, cache


def dynamic_backward_batch(cache: _Cache, params: DynamicParams, dlogits, input_grad: bool = True):
    """Returns ``(DynamicParams of gradients, gradient w.r.t. the window batch)``.

    The window gradient is None when ``input_grad`` is False.
    """
    c, p = cache, params
    dz = dlogits @ p.cls_w
    dcls_w = dlogits.T @ c.z
    dcls_b = dlogits.sum(axis=0)

    dfv = c.attn[..., None] * dz[:, None, :]
    dfv[:, -1] += dz
    dattn = np.einsum("bh,blh->bl", dz, c.fv)
    dsim = softmax_backward(c.attn, dattn)
    dq, dkeys = cosine_backward(c.fk[:, -1:, :], c.fk, dsim)
    dfk = dkeys
    dfk[:, -1] += dq.sum(axis=1)

    dxk, dk1_w, dk1_b, dk2_w, dk2_b = _stack_backward(c, c.zk1, c.hk1, p.k1_w, p.k2_w, dfk, input_grad)
    dxv, dv1_w, dv1_b, dv2_w, dv2_b = _stack_backward(c, c.zv1, c.hv1, p.v1_w, p.v2_w, dfv, input_grad)
    grads = DynamicParams(
        k1_w=dk1_w, k1_b=dk1_b, k2_w=dk2_w, k2_b=dk2_b,
        v1_w=dv1_w, v1_b=dv1_b, v2_w=dv2_w, v2_b=dv2_b,
        cls_w=dcls_w, cls_b=dcls_b,
    )  # fmt: skip
    return grads, (dxk + dxv if input_grad else None)


def forward_dynamic(window, params: DynamicParams, relu: bool = True) -> DynamicOutput:
    """Run the branch on one ``(L, D)`` window whose last row is the current frame."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise DimensionError(f"window must be (L, D), got shape {window.shape}")
    logits, c = dynamic_forward_batch(window[None], params, relu=relu)
    hist = np.einsum("l,lh->h", c.attn[0], c.fv[0])
    return DynamicOutput(logits[0], c.attn[0], hist, c.fv[0, -1])


def backward_dynamic(window, params: DynamicParams, upstream, relu: bool = True):
    """Gradients of ``upstream . logits`` w.r.t. every parameter and the window."""
    window = np.asarray(window, dtype=np.float64)
    _, cache = dynamic_forward_batch(window[None], params, relu=relu)
    grads, dx = dynamic_backward_batch(cache, params, np.asarray(upstream, dtype=np.float64)[None])
    return grads, dx[0]
