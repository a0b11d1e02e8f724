"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same tap order. Used when the extension is not built or
when ``UNROLLCAM_PURE_PYTHON=1`` is set.
"""

import numpy as np


def bank_forward(x, filters):
    C, H, W = x.shape
    m, kh, kw = filters.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros((C, m, H, W))
    for i in range(m):
        for a in range(kh):
            for b in range(kw):
                shifted = np.roll(x, (a - ch, b - cw), axis=(1, 2))
                out[:, i] = out[:, i] + filters[i, a, b] * shifted
    return out


def bank_adjoint(g, filters):
    C, m, H, W = g.shape
    _, kh, kw = filters.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros((C, H, W))
    for i in range(m):
        for a in range(kh):
            for b in range(kw):
                shifted = np.roll(g[:, i], (ch - a, cw - b), axis=(1, 2))
                out = out + filters[i, a, b] * shifted
    return out


def bank_filter_grad(x, g, kh, kw):
    ch, cw = kh // 2, kw // 2
    out = np.zeros((g.shape[1], kh, kw))
    for a in range(kh):
        for b in range(kw):
            shifted = np.roll(x, (a - ch, b - cw), axis=(1, 2))
            out[:, a, b] = np.einsum("cipq,cpq->i", g, shifted)
    return out


def poisson_inverse_cdf(rates, uniforms, max_count=1000):
    rates = np.asarray(rates, dtype=np.float64)
    uniforms = np.asarray(uniforms, dtype=np.float64)
    p = np.exp(-rates)
    cdf = p.copy()
    k = np.zeros(rates.shape)
    active = uniforms > cdf
    step = 0
    while active.any() and step < max_count:
        step += 1
        idx = np.flatnonzero(active)
        p[idx] = p[idx] * rates[idx] / step
        cdf[idx] = cdf[idx] + p[idx]
        k[idx] = step
        active[idx] = uniforms[idx] > cdf[idx]
    return k
