"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``VITAL_DISABLE_NUMBA`` is unset (or ``0``/``false``).  Both paths
share one public signature per kernel; ``numpy_kernels`` and
``numba_kernels`` expose each implementation explicitly so tests and the
benchmark can compare them side by side.
"""
from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


def _env_disabled() -> bool:
    flag = os.environ.get("VITAL_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("", "0", "false", "no")


USE_NUMBA = HAS_NUMBA and not _env_disabled()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy implementations


def _gelu_np(x):
    """Exact GELU and its derivative, ``(x * Phi(x), Phi(x) + x * phi(x))``."""
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf


def _layernorm_np(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[..., 0]


def _layernorm_grad_np(g, xhat, rstd, gamma):
    n = xhat.shape[-1]
    gx = g * gamma
    dx = (rstd[..., None] / n) * (
        n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
    )
    dgamma = (g * xhat).reshape(-1, n).sum(axis=0)
    dbeta = g.reshape(-1, n).sum(axis=0)
    return dx, dgamma, dbeta


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_grad_np(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def _dropout_infill_np(img, uniforms, noise, p, mu, sigma, n_valid):
    # noise holds one (channels,) draw per dropped pixel, in C order of the pixels
    out = img.copy()
    drop = uniforms[:, 1:, :n_valid] < p
    region = out[:, 1:, :n_valid, :]
    region[drop] = np.clip(mu + sigma * noise, 0.0, 1.0)
    return out


def _pairwise_sqdist_np(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


numpy_kernels = SimpleNamespace(
    gelu=_gelu_np,
    layernorm=_layernorm_np,
    layernorm_grad=_layernorm_grad_np,
    softmax=_softmax_np,
    softmax_grad=_softmax_grad_np,
    dropout_infill=_dropout_infill_np,
    pairwise_sqdist=_pairwise_sqdist_np,
)


# ---------------------------------------------------------------------------
# numba implementations; all operate on flat or 2-D contiguous views


@njit(cache=True)
def _gelu_nb_flat(x, out, deriv):
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        out[i] = v * cdf
        deriv[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)


@njit(cache=True)
def _layernorm_nb_2d(x, gamma, beta, eps, y, xhat, rstd):
    rows, n = x.shape
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += x[r, j]
        mean = s / n
        s2 = 0.0
        for j in range(n):
            d = x[r, j] - mean
            s2 += d * d
        inv = 1.0 / math.sqrt(s2 / n + eps)
        rstd[r] = inv
        for j in range(n):
            h = (x[r, j] - mean) * inv
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]


@njit(cache=True)
def _layernorm_grad_nb_2d(g, xhat, rstd, gamma, dx, dgamma, dbeta):
    rows, n = g.shape
    for j in range(n):
        dgamma[j] = 0.0
        dbeta[j] = 0.0
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gx = g[r, j] * gamma[j]
            s1 += gx
            s2 += gx * xhat[r, j]
            dgamma[j] += g[r, j] * xhat[r, j]
            dbeta[j] += g[r, j]
        scale = rstd[r] / n
        for j in range(n):
            gx = g[r, j] * gamma[j]
            dx[r, j] = scale * (n * gx - s1 - xhat[r, j] * s2)


@njit(cache=True)
def _softmax_nb_2d(x, out):
    rows, n = x.shape
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = x[r, 0] * 0  # accumulate in the input precision
        for j in range(n):
            e = math.exp(x[r, j] - m)
            out[r, j] = e
            s += e
        inv = 1 / s
        for j in range(n):
            out[r, j] *= inv


@njit(cache=True)
def _softmax_grad_nb_2d(y, g, out):
    rows, n = y.shape
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (g[r, j] - dot)


@njit(cache=True)
def _dropout_infill_nb_4d(img, uniforms, noise, p, mu, sigma, n_valid, out):
    b, rows, cols, ch = img.shape
    out[:] = img
    t = 0
    for i in range(b):
        for r in range(1, rows):
            for c in range(n_valid):
                if uniforms[i, r, c] < p:
                    for k in range(ch):
                        v = mu + sigma * noise[t, k]
                        if v < 0.0:
                            v = 0.0
                        elif v > 1.0:
                            v = 1.0
                        out[i, r, c, k] = v
                    t += 1


@njit(cache=True)
def _pairwise_sqdist_nb_2d(a, b, out):
    m, k = a.shape
    n = b.shape[0]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                d = a[i, t] - b[j, t]
                s += d * d
            out[i, j] = s


def _gelu_nb(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    deriv = np.empty_like(x)
    _gelu_nb_flat(x.reshape(-1), out.reshape(-1), deriv.reshape(-1))
    return out, deriv


def _layernorm_nb(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    n = x.shape[-1]
    x2 = x.reshape(-1, n)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=x.dtype)
    _layernorm_nb_2d(
        x2, np.ascontiguousarray(gamma, dtype=x.dtype), np.ascontiguousarray(beta, dtype=x.dtype),
        eps, y, xhat, rstd,
    )
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd.reshape(x.shape[:-1])


def _layernorm_grad_nb(g, xhat, rstd, gamma):
    n = xhat.shape[-1]
    g2 = np.ascontiguousarray(g, dtype=xhat.dtype).reshape(-1, n)
    xh2 = np.ascontiguousarray(xhat).reshape(-1, n)
    dx = np.empty_like(xh2)
    dgamma = np.empty(n, dtype=xhat.dtype)
    dbeta = np.empty(n, dtype=xhat.dtype)
    _layernorm_grad_nb_2d(
        g2, xh2, np.ascontiguousarray(rstd).reshape(-1), np.ascontiguousarray(gamma, dtype=xhat.dtype),
        dx, dgamma, dbeta,
    )
    return dx.reshape(xhat.shape), dgamma, dbeta


def _softmax_nb(x):
    if x.dtype == np.float32:
        # numpy's vectorised expf beats numba's scalar libm call here
        return _softmax_np(x)
    x = np.ascontiguousarray(x)
    x2 = x.reshape(-1, x.shape[-1])
    out = np.empty_like(x2)
    _softmax_nb_2d(x2, out)
    return out.reshape(x.shape)


def _softmax_grad_nb(y, g):
    y = np.ascontiguousarray(y)
    n = y.shape[-1]
    y2 = y.reshape(-1, n)
    out = np.empty_like(y2)
    _softmax_grad_nb_2d(y2, np.ascontiguousarray(g, dtype=y.dtype).reshape(-1, n), out)
    return out.reshape(y.shape)


def _dropout_infill_nb(img, uniforms, noise, p, mu, sigma, n_valid):
    img = np.ascontiguousarray(img)
    out = np.empty_like(img)
    _dropout_infill_nb_4d(
        img, np.ascontiguousarray(uniforms), np.ascontiguousarray(noise, dtype=np.float64).reshape(-1, img.shape[-1]),
        float(p), float(mu), float(sigma), int(n_valid), out,
    )
    return out


def _pairwise_sqdist_nb(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    _pairwise_sqdist_nb_2d(a, b, out)
    return out


numba_kernels = SimpleNamespace(
    gelu=_gelu_nb,
    layernorm=_layernorm_nb,
    layernorm_grad=_layernorm_grad_nb,
    softmax=_softmax_nb,
    softmax_grad=_softmax_grad_nb,
    dropout_infill=_dropout_infill_nb,
    pairwise_sqdist=_pairwise_sqdist_nb,
)

active = numba_kernels if USE_NUMBA else numpy_kernels

gelu = active.gelu
layernorm = active.layernorm
layernorm_grad = active.layernorm_grad
softmax = active.softmax
softmax_grad = active.softmax_grad
dropout_infill = active.dropout_infill
pairwise_sqdist = active.pairwise_sqdist


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
