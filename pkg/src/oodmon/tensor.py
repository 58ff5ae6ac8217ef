"""Dense numeric kernels used by inference and by the feature-based monitors.

Tensors are plain ``numpy`` arrays; images and activations are stored as
``float32``. Statistics that feed matrix factorizations (covariance, Cholesky,
eigenvectors) are accumulated in ``float64`` because small input differences
are strongly amplified by an ill-conditioned covariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_triangular

RIDGE_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)
# A pivot this small relative to the mean diagonal is treated as a failed
# factorization so that near-singular covariances climb the ridge ladder.
_MIN_PIVOT_RATIO = 1e-12


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x[N,C,H,W]`` into ``[N, C*kh*kw, H'*W']`` patches."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    # N, C, kh, kw, oh, ow
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
           bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation with zero padding.

    ``x`` is ``C×H×W`` or a batch ``N×C×H×W``; ``kernel`` is ``F×C×kh×kw``.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and F×C×kh×kw kernel, got {x.shape}, {kernel.shape}")
    f, c, kh, kw = kernel.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {x.shape[2:]}")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(kernel.reshape(f, -1), cols).reshape(x.shape[0], f, oh, ow)
    if bias is not None:
        out = out + bias.reshape(1, f, 1, 1)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    stride: int, padding: int, need_weights: bool = False):
    """Gradients of a batched conv2d with respect to input (and optionally kernel/bias)."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    oh, ow = grad_out.shape[2:]
    g = grad_out.reshape(n, f, oh * ow)
    dcols = np.matmul(kernel.reshape(f, -1).T, g).reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.result_type(x, grad_out))
    # fixed loop order over kernel taps keeps the accumulation deterministic
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    if not need_weights:
        return dx, None, None
    cols, _, _ = _im2col(x, kh, kw, stride, padding)
    dw = np.einsum("nfp,nkp->fk", g, cols).reshape(kernel.shape)
    db = g.sum(axis=(0, 2))
    return dx, dw, db


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(win.shape[:4] + (k * k,))


def maxpool2d(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    """Window maximum with floor-division output size; accepts C×H×W or N×C×H×W."""
    stride = k if stride is None else stride
    if k <= 0 or stride <= 0:
        raise ValueError("pool kernel and stride must be positive")
    single = x.ndim == 3
    if single:
        x = x[None]
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool kernel {k} larger than input {x.shape[2:]}")
    out = _pool_windows(x, k, stride).max(axis=-1)
    return out[0] if single else out


def maxpool2d_backward(x: np.ndarray, grad_out: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Route each output gradient to the first maximal element of its window."""
    n, c, h, w = x.shape
    arg = _pool_windows(x, k, stride).argmax(axis=-1)  # first index on ties
    oh, ow = arg.shape[2:]
    rows = (np.arange(oh) * stride)[None, None, :, None] + arg // k
    cols = (np.arange(ow) * stride)[None, None, None, :] + arg % k
    dx = np.zeros_like(x, dtype=np.result_type(x, grad_out))
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), grad_out)
    return dx


def logsumexp(v, scale: float = 1.0, axis: int = -1):
    """``scale * log(sum(exp(v / scale)))`` with max subtraction.

    A 1-d input yields a float; higher-rank inputs reduce along ``axis``.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("logsumexp of an empty vector")
    u = v / scale
    m = u.max(axis=axis, keepdims=True)
    out = scale * (np.log(np.exp(u - m).sum(axis=axis)) + np.squeeze(m, axis=axis))
    return float(out) if v.ndim == 1 else out


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def covariance(rows: np.ndarray) -> np.ndarray:
    """Population covariance ``(1/n) Σ (x-μ)(x-μ)ᵀ`` in float64.

    The result stays in float64: it is consumed by the factorizations below
    and rounding it to float32 would discard exactly the precision that
    protects them.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"covariance expects n×d rows, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs at least 2 rows, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    return (cov + cov.T) / 2.0


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``m + ridge·I``."""
    lower: np.ndarray
    ridge: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _try_cholesky(m: np.ndarray, scale: float):
    try:
        low = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(low)) ** 2 < _MIN_PIVOT_RATIO * scale:
        return None
    return low


def cholesky_spd(m: np.ndarray, ridge: float = 0.0) -> SpdFactor:
    """Factor ``m + ridge·I``, climbing a ridge ladder if ``m`` is near-singular.

    Extra ridge values tried are ``{0, 1e-8, 1e-6, 1e-4, 1e-2} × mean(diag(m))``
    (mean diagonal replaced by 1 when it is zero); the first success wins.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"cholesky_spd expects a square matrix, got {m.shape}")
    d = m.shape[0]
    if d == 0:
        raise ValueError("cholesky_spd of a 0×0 matrix")
    if not np.allclose(m, m.T, rtol=1e-7, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    scale = float(np.mean(np.diag(m)))
    if scale <= 0:
        scale = 1.0
    eye = np.eye(d)
    for step in RIDGE_LADDER:
        total = ridge + step * scale
        low = _try_cholesky(m + total * eye, scale)
        if low is not None:
            return SpdFactor(low, total)
    raise np.linalg.LinAlgError("matrix is not positive definite even after the ridge ladder")


def solve_spd(factor: SpdFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``(m + ridge·I) x = b`` via two triangular solves; ``b`` may be ``d`` or ``d×k``."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.dim:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, factor has dim {factor.dim}")
    y = solve_triangular(factor.lower, b, lower=True)
    return solve_triangular(factor.lower.T, y, lower=False)


def whitened_sq_norm(factor: SpdFactor, v: np.ndarray) -> np.ndarray:
    """``vᵀ (LLᵀ)⁻¹ v`` for each row of ``v`` (shape ``n×d``)."""
    y = solve_triangular(factor.lower, np.asarray(v, dtype=np.float64).T, lower=True)
    return np.einsum("ij,ij->j", y, y)


def top_eigenvectors(m: np.ndarray, count: int) -> np.ndarray:
    """Orthonormal eigenvectors of the ``count`` largest eigenvalues, as rows.

    Each vector's first non-negligible component is made positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"top_eigenvectors expects a square matrix, got {m.shape}")
    d = m.shape[0]
    if not 1 <= count <= d:
        raise ValueError(f"count must be in [1, {d}], got {count}")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    order = np.argsort(-vals, kind="stable")[:count]
    out = vecs[:, order].T.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return out
