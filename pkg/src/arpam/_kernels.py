"""Compiled inner loops."""

import numba
import numpy as np


@numba.njit(cache=True)
def saft_axis0(data, weights, src, count, use_cf):
    """Delay-and-sum along axis 0 of ``data[x, y, t]``.

    ``weights[k, t]`` and ``src[k, t]`` (fractional source index) describe
    the neighbours at lateral offsets ``+-k``; ``count[t]`` is the number
    of aperture taps used in the coherence factor.
    """
    nx, ny, nt = data.shape
    nk = weights.shape[0]
    i0 = np.floor(src).astype(np.int64)
    # interpolation weights with out-of-range samples folded to zero
    a0 = np.zeros((nk, nt))
    a1 = np.zeros((nk, nt))
    j0 = np.zeros((nk, nt), dtype=np.int64)
    j1 = np.zeros((nk, nt), dtype=np.int64)
    for k in range(nk):
        for t in range(nt):
            frac = src[k, t] - i0[k, t]
            lo = i0[k, t]
            if 0 <= lo < nt:
                a0[k, t] = weights[k, t] * (1.0 - frac)
                j0[k, t] = lo
            if 0 <= lo + 1 < nt:
                a1[k, t] = weights[k, t] * frac
                j1[k, t] = lo + 1

    acc = np.zeros_like(data)
    acc_sq = np.zeros_like(data)
    for x in range(nx):
        for k in range(nk):
            for side in range(2 if k > 0 else 1):
                xn = x + k if side == 0 else x - k
                if xn < 0 or xn >= nx:
                    continue
                for y in range(ny):
                    row = data[xn, y]
                    for t in range(nt):
                        c = a0[k, t] * row[j0[k, t]] + a1[k, t] * row[j1[k, t]]
                        acc[x, y, t] += c
                        acc_sq[x, y, t] += c * c
    if not use_cf:
        return acc
    out = np.zeros_like(data)
    for x in range(nx):
        for y in range(ny):
            for t in range(nt):
                s = acc[x, y, t]
                den = count[t] * acc_sq[x, y, t]
                if den > 0.0:
                    out[x, y, t] = s * s * s / den
    return out
