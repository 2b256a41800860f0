"""Pure numpy versions of the gather/scatter kernels.

Layout matches the compiled module exactly: one row per (channel, kx, ky, kz)
tap, one column per output voxel in (batch, x, y, z) order.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def vol2col(xp, k, stride, xo, yo, zo):
    n, c = xp.shape[:2]
    s = xp.strides
    view = as_strided(
        xp,
        shape=(c, k, k, k, n, xo, yo, zo),
        strides=(s[1], s[2], s[3], s[4], s[0], s[2] * stride, s[3] * stride, s[4] * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * k ** 3, n * xo * yo * zo)


def col2vol(cols, n_batch, n_chan, xp_, yp_, zp_, k, stride, xo, yo, zo):
    out = np.zeros((n_batch, n_chan, xp_, yp_, zp_), dtype=cols.dtype)
    # each tap is one strided slab add; taps run in ascending order so every
    # voxel sums its contributions in the same order as the compiled kernel
    taps = cols.reshape(n_chan, k, k, k, n_batch, xo, yo, zo)
    xe, ye, ze = stride * (xo - 1) + 1, stride * (yo - 1) + 1, stride * (zo - 1) + 1
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                out[:, :, kx:kx + xe:stride, ky:ky + ye:stride, kz:kz + ze:stride] += \
                    taps[:, kx, ky, kz].transpose(1, 0, 2, 3, 4)
    return out
