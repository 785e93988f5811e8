"""Dense float64 kernels with explicit forward/backward passes.

Every array here is a plain ``numpy.ndarray`` of dtype float64. Batched
helpers take a leading batch axis; the scalar/vector entry points
(``cosine_similarity``, ``softmax``, ``linear``, ``temporal_conv1d``) follow
the single-sample layouts used throughout the docs.

Randomness comes from ``make_rng``: numpy's PCG64 bit generator seeded with
an unsigned 64-bit integer. Child streams are derived with ``SeedSequence``
spawning so that independent consumers never share draws.
"""

from __future__ import annotations

from typing import Callable, Mapping, Union

import numpy as np

from .errors import DimensionError, NumericError

COS_EPS = 1e-12

Params = Union[np.ndarray, Mapping[str, np.ndarray]]


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` (must fit in an unsigned 64-bit int)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent PCG64 streams derived from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def _as_vec(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


# ----------------------------------------------------------------------------
# cosine similarity


def cosine_similarity(a, b) -> float:
    a = _as_vec(a, "a")
    b = _as_vec(b, "b")
    if a.size == 0 or a.shape != b.shape:
        raise DimensionError(f"cosine needs equal non-empty lengths, got {a.size} and {b.size}")
    return float(cosine_forward(a, b))


def cosine_forward(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine along the last axis; ``u`` and ``v`` broadcast against each other."""
    dot = np.sum(u * v, axis=-1)
    nu = np.sqrt(np.sum(u * u, axis=-1))
    nv = np.sqrt(np.sum(v * v, axis=-1))
    return dot / (nu * nv + COS_EPS)


def cosine_backward(u: np.ndarray, v: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the broadcast ``u`` and ``v`` (caller reduces broadcast axes)."""
    dot = np.sum(u * v, axis=-1, keepdims=True)
    nu = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    nv = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    den = nu * nv + COS_EPS
    g = grad[..., None]
    # d|u|/du is undefined at zero; treat it as zero there.
    u_hat = np.divide(u, nu, out=np.zeros(np.broadcast(u, nu).shape), where=nu > 0)
    v_hat = np.divide(v, nv, out=np.zeros(np.broadcast(v, nv).shape), where=nv > 0)
    du = g * (v / den - dot * nv * u_hat / den**2)
    dv = g * (u / den - dot * nu * v_hat / den**2)
    return du, dv


# ----------------------------------------------------------------------------
# softmax


def softmax(v, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-shifted softmax. Entries where ``mask`` is False get probability 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    if mask is None:
        z = v - np.max(v, axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        shifted = np.where(mask, v, -np.inf)
        z = np.where(mask, v - np.max(shifted, axis=axis, keepdims=True), 0.0)
        e = np.where(mask, np.exp(z), 0.0)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (grad - np.sum(p * grad, axis=axis, keepdims=True))


# ----------------------------------------------------------------------------
# linear


def linear(x, W, b) -> np.ndarray:
    """``W @ x + b`` for one vector, or row-wise for a batch ``x`` of shape (B, n)."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: x {x.shape}, W {W.shape}, b {b.shape} are incompatible")
    return x @ W.T + b


def linear_backward(x: np.ndarray, W: np.ndarray, grad: np.ndarray):
    """Returns (dx, dW, db) summed over every leading axis of ``x``."""
    dx = grad @ W
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return dx, g2.T @ x2, g2.sum(axis=0)


# ----------------------------------------------------------------------------
# kernel-3 temporal convolution


def temporal_conv1d(seq, kernel, bias) -> np.ndarray:
    """Kernel-3 convolution of a ``D_in x L`` sequence, zero-padded by one frame.

    ``kernel`` has shape ``(D_out, D_in, 3)``; tap 0 reads the previous frame,
    tap 1 the current one and tap 2 the next one. Returns ``D_out x L``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] < 1:
        raise DimensionError(f"sequence must be D_in x L with L >= 1, got {seq.shape}")
    _check_kernel(kernel, bias, seq.shape[0])
    return conv1d_forward(seq.T[None], kernel, bias)[0].T


def _check_kernel(kernel: np.ndarray, bias: np.ndarray, d_in: int) -> None:
    if kernel.ndim != 3 or kernel.shape[2] != 3:
        raise DimensionError(f"kernel must be D_out x D_in x 3, got {kernel.shape}")
    if kernel.shape[1] != d_in or bias.shape != (kernel.shape[0],):
        raise DimensionError(
            f"kernel {kernel.shape} / bias {bias.shape} do not match input dim {d_in}"
        )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, L, D) -> (B*L, 3*D) rows of [previous, current, next] frames."""
    B, L, D = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    return np.concatenate([xp[:, 0:L], xp[:, 1 : L + 1], xp[:, 2 : L + 2]], axis=-1).reshape(B * L, 3 * D)


def _kernel_matrix(W: np.ndarray) -> np.ndarray:
    """(D_out, D_in, 3) -> (3*D_in, D_out) matching ``_im2col`` columns."""
    return W.transpose(2, 1, 0).reshape(-1, W.shape[0])


def conv1d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched form: ``x`` is (B, L, D_in), result is (B, L, D_out)."""
    B, L, _ = x.shape
    out = _im2col(x) @ _kernel_matrix(W) + b
    return out.reshape(B, L, W.shape[0])


def conv1d_backward(x: np.ndarray, W: np.ndarray, grad: np.ndarray, input_grad: bool = True):
    """Returns (dx, dW, db) for ``conv1d_forward``; dx is None unless ``input_grad``."""
    B, L, d_in = x.shape
    d_out = W.shape[0]
    g2 = grad.reshape(B * L, d_out)
    dW = (_im2col(x).T @ g2).reshape(3, d_in, d_out).transpose(2, 1, 0)
    if not input_grad:
        return None, np.ascontiguousarray(dW), g2.sum(axis=0)
    dcols = (g2 @ _kernel_matrix(W).T).reshape(B, L, 3, d_in)
    dxp = np.zeros((B, L + 2, d_in))
    for k in range(3):
        dxp[:, k : k + L] += dcols[:, :, k]
    return dxp[:, 1 : L + 1], np.ascontiguousarray(dW), g2.sum(axis=0)


# ----------------------------------------------------------------------------
# finite-difference gradient check


def grad_check(
    f: Callable[[Params], tuple[float, Params]],
    theta: Params,
    h: float = 1e-5,
    value: Callable[[Params], float] | None = None,
) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(theta)`` must return ``(value, grad)`` where ``grad`` mirrors
    ``theta`` (a single array or a mapping of named arrays). The error for a
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``. ``value``,
    if given, computes the objective alone and is used for the perturbed
    evaluations, skipping the unused backward passes.
    """
    single = isinstance(theta, np.ndarray) or np.isscalar(theta)
    params = {"theta": np.array(theta, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in theta.items()
    }

    def objective(p, with_grad=False):
        arg = p["theta"] if single else p
        if with_grad or value is None:
            v, grad = f(arg)
        else:
            v, grad = value(arg), None
        v = float(v)
        if not np.isfinite(v):
            raise NumericError(f"objective is not finite: {v}")
        return v, ({"theta": grad} if single else grad)

    _, analytic = objective(params, with_grad=True)
    worst = 0.0
    for name, arr in params.items():
        g = np.asarray(analytic[name], dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, _ = objective(params)
            flat[i] = orig - h
            fm, _ = objective(params)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
