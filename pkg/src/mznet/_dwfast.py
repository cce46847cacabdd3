"""JIT depthwise convolution kernels (single-threaded, strict IEEE order).

Optional fast path for the engine's depthwise convolutions; the caller
falls back to the vectorized numpy loops when numba is unavailable.
Accumulation order is fixed, so results are deterministic for a given
backend; fastmath stays off to keep IEEE semantics.
"""

from __future__ import annotations

import numba as nb


@nb.njit(cache=True, fastmath=False)
def dw_forward(xp, w, dh, dw, sh, sw, out):
    n, c, _, _ = xp.shape
    _, kh, kw = w.shape
    _, _, oh, ow = out.shape
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for i in range(kh):
                    iy = oy * sh + i * dh
                    for j in range(kw):
                        wv = w[ci, i, j]
                        off = j * dw
                        for ox in range(ow):
                            out[ni, ci, oy, ox] += wv * xp[ni, ci, iy, ox * sw + off]


@nb.njit(cache=True, fastmath=False)
def dw_input_grad(gy, w, dh, dw, sh, sw, gxp):
    n, c, oh, ow = gy.shape
    _, kh, kw = w.shape
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for i in range(kh):
                    iy = oy * sh + i * dh
                    for j in range(kw):
                        wv = w[ci, i, j]
                        off = j * dw
                        for ox in range(ow):
                            gxp[ni, ci, iy, ox * sw + off] += wv * gy[ni, ci, oy, ox]


@nb.njit(cache=True, fastmath=False)
def dw_weight_grad(xp, gy, dh, dw, sh, sw, gw):
    n, c, oh, ow = gy.shape
    _, kh, kw = gw.shape
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for i in range(kh):
                    iy = oy * sh + i * dh
                    for j in range(kw):
                        off = j * dw
                        acc = 0.0
                        for ox in range(ow):
                            acc += xp[ni, ci, iy, ox * sw + off] * gy[ni, ci, oy, ox]
                        gw[ci, i, j] += acc
