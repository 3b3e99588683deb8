"""Hot inner loops of the autodiff engine.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version. The module-level names (``im2col3``, ``col2im3``,
``rownorm_forward``, ``rownorm_backward``) are bound to one of them at import
time according to :data:`deskdiff.backend.USE_NUMBA`. Both variants are kept
importable so tests and ``benchmarks/bench_kernels.py`` can compare them.

Layouts
-------
``im2col3`` turns ``x`` of shape ``(B, C, H, W)`` into ``(B, C*9, H*W)`` with
row index ``c*9 + 3*i + j`` holding the zero-padded pixel ``x[b, c, h+i-1,
w+j-1]``. ``col2im3`` is its adjoint.

``rownorm_*`` normalise each row of a 2-D array to zero mean and unit
variance; group norm and layer norm both reshape into rows and call these.
"""

import numpy as np

from .. import backend


# ---------------------------------------------------------------- numpy path


def im2col3_numpy(x):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(b, c * 9, h * w)


def col2im3_numpy(cols, shape):
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i : i + h, j : j + w] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def rownorm_forward_numpy(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std[:, 0]


def rownorm_backward_numpy(dxhat, xhat, inv_std):
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return inv_std[:, None] * (dxhat - m1 - xhat * m2)


# ---------------------------------------------------------------- numba path

if backend.HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _im2col3_loop(x, cols):
        b, c, h, w = x.shape
        for n in range(b):
            for ch in range(c):
                for i in range(3):
                    for j in range(3):
                        row = ch * 9 + i * 3 + j
                        for y in range(h):
                            sy = y + i - 1
                            if sy < 0 or sy >= h:
                                for xx in range(w):
                                    cols[n, row, y * w + xx] = 0.0
                                continue
                            for xx in range(w):
                                sx = xx + j - 1
                                if sx < 0 or sx >= w:
                                    cols[n, row, y * w + xx] = 0.0
                                else:
                                    cols[n, row, y * w + xx] = x[n, ch, sy, sx]

    @njit(cache=True)
    def _col2im3_loop(cols, out):
        b, c, h, w = out.shape
        for n in range(b):
            for ch in range(c):
                for i in range(3):
                    for j in range(3):
                        row = ch * 9 + i * 3 + j
                        for y in range(h):
                            sy = y + i - 1
                            if sy < 0 or sy >= h:
                                continue
                            for xx in range(w):
                                sx = xx + j - 1
                                if sx >= 0 and sx < w:
                                    out[n, ch, sy, sx] += cols[n, row, y * w + xx]

    @njit(cache=True)
    def _rownorm_forward_loop(x, eps, xhat, inv_std):
        n, m = x.shape
        for r in range(n):
            s = 0.0
            for k in range(m):
                s += x[r, k]
            mu = s / m
            ss = 0.0
            for k in range(m):
                d = x[r, k] - mu
                ss += d * d
            inv = 1.0 / np.sqrt(ss / m + eps)
            inv_std[r] = inv
            for k in range(m):
                xhat[r, k] = (x[r, k] - mu) * inv

    @njit(cache=True)
    def _rownorm_backward_loop(dxhat, xhat, inv_std, dx):
        n, m = dxhat.shape
        for r in range(n):
            s1 = 0.0
            s2 = 0.0
            for k in range(m):
                s1 += dxhat[r, k]
                s2 += dxhat[r, k] * xhat[r, k]
            m1 = s1 / m
            m2 = s2 / m
            inv = inv_std[r]
            for k in range(m):
                dx[r, k] = inv * (dxhat[r, k] - m1 - xhat[r, k] * m2)

    def im2col3_numba(x):
        x = np.ascontiguousarray(x)
        b, c, h, w = x.shape
        cols = np.empty((b, c * 9, h * w), dtype=x.dtype)
        _im2col3_loop(x, cols)
        return cols

    def col2im3_numba(cols, shape):
        out = np.zeros(shape, dtype=cols.dtype)
        _col2im3_loop(np.ascontiguousarray(cols), out)
        return out

    def rownorm_forward_numba(x, eps):
        x = np.ascontiguousarray(x)
        xhat = np.empty_like(x)
        inv_std = np.empty(x.shape[0], dtype=x.dtype)
        _rownorm_forward_loop(x, x.dtype.type(eps), xhat, inv_std)
        return xhat, inv_std

    def rownorm_backward_numba(dxhat, xhat, inv_std):
        dx = np.empty_like(xhat)
        _rownorm_backward_loop(np.ascontiguousarray(dxhat), xhat, inv_std, dx)
        return dx


IMPLEMENTATIONS = {"numpy": (im2col3_numpy, col2im3_numpy, rownorm_forward_numpy, rownorm_backward_numpy)}
if backend.HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = (im2col3_numba, col2im3_numba, rownorm_forward_numba, rownorm_backward_numba)

ACTIVE = "numba" if backend.USE_NUMBA else "numpy"
im2col3, col2im3, rownorm_forward, rownorm_backward = IMPLEMENTATIONS[ACTIVE]
