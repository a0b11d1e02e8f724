"""Dense image arrays, 2D DFTs and circular convolution.

Images are ``float64`` arrays of shape ``(H, W, C)``. Internally most code
works channel-first, ``(C, H, W)``, so the DFT helpers transform the last
two axes and broadcast over any leading ones.

Kernels are odd-sized with their origin at ``(kh // 2, kw // 2)``.
Boundaries are periodic everywhere.
"""

import numpy as np

from unrollcam._backend import kernels
from unrollcam.errors import InvalidArgumentError

# kernels with more taps than this go through the FFT path
DIRECT_MAX_AREA = 25


def as_image(x, name="image"):
    """Validate and return ``x`` as a finite float64 ``(H, W, C)`` array.

    2D input is promoted to a single channel.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidArgumentError(f"{name} must be HxWxC, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise InvalidArgumentError(f"{name} has a zero dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def to_channels_first(img):
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def to_channels_last(arr):
    return np.ascontiguousarray(np.moveaxis(arr, 0, -1))


def _check_field(u):
    u = np.asarray(u)
    if u.ndim < 2 or u.shape[-1] < 1 or u.shape[-2] < 1:
        raise InvalidArgumentError(f"field needs two non-zero trailing dims, got {u.shape}")
    return u


def fft2(u):
    """Unnormalised forward DFT over the last two axes."""
    return np.fft.fft2(_check_field(u), axes=(-2, -1))


def ifft2(U):
    """Inverse DFT over the last two axes, carrying the ``1/(H*W)`` factor."""
    return np.fft.ifft2(_check_field(U), axes=(-2, -1))


def check_kernel(kernel, odd=True):
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or min(k.shape) < 1:
        raise InvalidArgumentError(f"kernel must be a non-empty 2D array, got shape {k.shape}")
    if odd and (k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0):
        raise InvalidArgumentError(f"kernel dimensions must be odd, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise InvalidArgumentError("kernel contains non-finite values")
    return k


def pad_kernel(kernel, shape):
    """Embed ``kernel`` (..., kh, kw) in a periodic (..., H, W) field with its centre at (0, 0)."""
    kernel = np.asarray(kernel)
    kh, kw = kernel.shape[-2:]
    H, W = shape
    if kh > H or kw > W:
        raise InvalidArgumentError(f"kernel {kh}x{kw} larger than image {H}x{W}")
    field = np.zeros(kernel.shape[:-2] + (H, W), dtype=kernel.dtype)
    field[..., :kh, :kw] = kernel
    return np.roll(field, (-(kh // 2), -(kw // 2)), axis=(-2, -1))


def unpad_kernel(field, kshape):
    """Adjoint of :func:`pad_kernel`: gather the kernel-support entries back out."""
    kh, kw = kshape
    rolled = np.roll(field, (kh // 2, kw // 2), axis=(-2, -1))
    return np.ascontiguousarray(rolled[..., :kh, :kw])


def otf(kernel, shape):
    """Transfer function of ``kernel`` on an ``shape`` periodic grid."""
    return fft2(pad_kernel(kernel, shape))


def bank_forward(x, filters, method=None):
    """Convolve each channel of ``x`` (C, H, W) with each filter (m, kh, kw).

    Returns (C, m, H, W). ``method`` is ``"direct"``, ``"fft"`` or ``None``
    (pick by kernel area).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    if filters.shape[0] == 0:
        return np.zeros((x.shape[0], 0) + x.shape[1:])
    method = method or _pick(filters.shape)
    if method == "direct":
        return kernels.bank_forward(x, filters)
    F = otf(filters, x.shape[1:])
    return np.real(ifft2(fft2(x)[:, None] * F[None]))


def bank_adjoint(g, filters, method=None):
    """Transpose of :func:`bank_forward`: correlate and sum over filters. (C, m, H, W) -> (C, H, W)."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    filters = np.ascontiguousarray(filters, dtype=np.float64)
    if filters.shape[0] == 0:
        return np.zeros((g.shape[0],) + g.shape[2:])
    method = method or _pick(filters.shape)
    if method == "direct":
        return kernels.bank_adjoint(g, filters)
    F = otf(filters, g.shape[2:])
    return np.real(ifft2(np.sum(fft2(g) * np.conj(F)[None], axis=1)))


def bank_filter_grad(x, g, kshape, method=None):
    """Gradient of ``<g, bank_forward(x, f)>`` with respect to ``f``; returns (m, kh, kw)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    kh, kw = kshape
    method = method or _pick((g.shape[1], kh, kw))
    if method == "direct":
        return kernels.bank_filter_grad(x, g, kh, kw)
    # cross-correlation of g with x, read back on the kernel support
    corr = np.real(ifft2(np.sum(fft2(g) * np.conj(fft2(x))[:, None], axis=0)))
    return unpad_kernel(corr, kshape)


def _pick(fshape):
    return "direct" if fshape[-2] * fshape[-1] <= DIRECT_MAX_AREA else "fft"


def circ_conv(img, kernel, mode="forward", method=None):
    """Circular convolution of every channel of an (H, W, C) image with one kernel.

    ``mode="adjoint"`` applies the transpose (correlation).
    """
    img = as_image(img)
    k = check_kernel(kernel, odd=False)
    H, W, _ = img.shape
    if k.shape[0] > H or k.shape[1] > W:
        raise InvalidArgumentError(f"kernel {k.shape} larger than image {img.shape[:2]}")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        # even kernels keep the same origin convention, through the FFT path only
        method = "fft"
    x = to_channels_first(img)
    if mode == "forward":
        out = bank_forward(x, k[None], method)[:, 0]
    elif mode == "adjoint":
        out = bank_adjoint(x[:, None], k[None], method)
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    return to_channels_last(out)
