"""Hot elementwise kernels with an optional numba path.

Set ``FATE_NUMBA=0`` in the environment to force the pure-numpy
implementations. The flag is read once at import time; both paths compute the
same quantities and are cross-checked in the test suite.
"""

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the dev environment
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("FATE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------

def np_layernorm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def np_layernorm_bwd(dxhat, xhat, rstd):
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[..., None]


def np_gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def np_gelu_bwd(dy, x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def np_softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_bwd(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def np_warp_nearest(img, inv, fill):
    """Inverse-map warp with nearest-neighbour sampling.

    ``inv`` is a 2x3 matrix taking output pixel centres (x, y) to input
    coordinates. Out-of-bounds samples take ``fill``.
    """
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    xo = xs - cx
    yo = ys - cy
    sx = inv[0, 0] * xo + inv[0, 1] * yo + inv[0, 2] + cx
    sy = inv[1, 0] * xo + inv[1, 1] * yo + inv[1, 2] + cy
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full(img.shape, fill, dtype=img.dtype)
    out[ok] = img[iy[ok], ix[ok]]
    return out


# ---------------------------------------------------------------------------
# numba kernels (2-D row-major views; callers reshape)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _nb_layernorm_fwd(x, eps):
        n, d = x.shape
        out = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[i, j] - mu
                v += c * c
            r = 1.0 / math.sqrt(v / d + eps)
            rstd[i] = r
            for j in range(d):
                out[i, j] = (x[i, j] - mu) * r
        return out, rstd

    @numba.njit(cache=True, fastmath=False)
    def _nb_layernorm_bwd(dxhat, xhat, rstd):
        n, d = dxhat.shape
        out = np.empty_like(dxhat)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                m1 += dxhat[i, j]
                m2 += dxhat[i, j] * xhat[i, j]
            m1 /= d
            m2 /= d
            r = rstd[i]
            for j in range(d):
                out[i, j] = (dxhat[i, j] - m1 - xhat[i, j] * m2) * r
        return out

    @numba.njit(cache=True, fastmath=False)
    def _nb_gelu_fwd(x):
        out = np.empty_like(x)
        flat = x.ravel()
        o = out.ravel()
        for i in range(flat.size):
            v = flat[i]
            o[i] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @numba.njit(cache=True, fastmath=False)
    def _nb_gelu_bwd(dy, x):
        out = np.empty_like(x)
        fx = x.ravel()
        fd = dy.ravel()
        o = out.ravel()
        for i in range(fx.size):
            v = fx[i]
            t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            o[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out

    @numba.njit(cache=True, fastmath=False)
    def _nb_softmax_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(d):
                out[i, j] /= s
        return out

    @numba.njit(cache=True, fastmath=False)
    def _nb_softmax_bwd(dy, y):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += dy[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (dy[i, j] - s)
        return out

    @numba.njit(cache=True)
    def _nb_warp_nearest(img, inv, fill):
        h = img.shape[0]
        w = img.shape[1]
        c = img.shape[2]
        out = np.empty_like(img)
        cx = (w - 1) / 2.0
        cy = (h - 1) / 2.0
        for y in range(h):
            for x in range(w):
                xo = x - cx
                yo = y - cy
                sx = inv[0, 0] * xo + inv[0, 1] * yo + inv[0, 2] + cx
                sy = inv[1, 0] * xo + inv[1, 1] * yo + inv[1, 2] + cy
                ix = int(math.floor(sx + 0.5))
                iy = int(math.floor(sy + 0.5))
                if 0 <= ix < w and 0 <= iy < h:
                    for k in range(c):
                        out[y, x, k] = img[iy, ix, k]
                else:
                    for k in range(c):
                        out[y, x, k] = fill
        return out


def _rows(a):
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def layernorm_fwd(x, eps=1e-5):
    if USE_NUMBA:
        xhat, rstd = _nb_layernorm_fwd(_rows(x), x.dtype.type(eps))
        return xhat.reshape(x.shape), rstd.reshape(x.shape[:-1])
    return np_layernorm_fwd(x, eps)


def layernorm_bwd(dxhat, xhat, rstd):
    if USE_NUMBA:
        out = _nb_layernorm_bwd(_rows(dxhat), _rows(xhat), np.ascontiguousarray(rstd).ravel())
        return out.reshape(xhat.shape)
    return np_layernorm_bwd(dxhat, xhat, rstd)


def gelu_fwd(x):
    if USE_NUMBA:
        return _nb_gelu_fwd(np.ascontiguousarray(x))
    return np_gelu_fwd(x)


def gelu_bwd(dy, x):
    if USE_NUMBA:
        return _nb_gelu_bwd(np.ascontiguousarray(dy), np.ascontiguousarray(x))
    return np_gelu_bwd(dy, x)


def softmax_fwd(x):
    if USE_NUMBA:
        return _nb_softmax_fwd(_rows(x)).reshape(x.shape)
    return np_softmax_fwd(x)


def softmax_bwd(dy, y):
    if USE_NUMBA:
        return _nb_softmax_bwd(_rows(dy), _rows(y)).reshape(y.shape)
    return np_softmax_bwd(dy, y)


def warp_nearest(img, inv, fill):
    if USE_NUMBA:
        return _nb_warp_nearest(np.ascontiguousarray(img), np.asarray(inv, dtype=np.float64), img.dtype.type(fill))
    return np_warp_nearest(img, inv, fill)
