"""Generalized Anscombe transform for Poisson-Gaussian data.

``gat_forward`` maps ``y = alpha * Poisson(x / alpha) + N(0, sigma^2)`` to
values with approximately unit variance; ``gat_inverse`` is its exact
algebraic inverse (not the unbiased inverse). Both accept tape ``Var``
inputs and are differentiable.
"""

import numpy as np

from unrollcam import autodiff as ad
from unrollcam.errors import InvalidArgumentError


def _check(noise):
    if noise.alpha <= 0:
        raise InvalidArgumentError("GAT needs alpha > 0; bypass the transform for pure Gaussian noise")


def gat_forward(y, noise):
    """``(2/alpha) * sqrt(max(alpha*y + 3/8*alpha^2 + sigma^2, 0))``; zero gradient where clamped."""
    _check(noise)
    a, s = noise.alpha, noise.sigma
    radicand = ad.clamp_min0(ad.add(ad.mul(y, a), 0.375 * a * a + s * s))
    return ad.mul(_sqrt0(radicand), 2.0 / a)


def _sqrt0(r):
    # sqrt whose derivative is 0 at r == 0 rather than inf
    rv = ad.value(r)
    out = np.sqrt(rv)
    safe = np.where(out > 0, out, 1.0)
    return ad._op("gat_sqrt", out, (r,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


def gat_inverse(z, noise):
    """``alpha*z^2/4 - 3/8*alpha - sigma^2/alpha``. Raises on negative ``z``."""
    _check(noise)
    if np.any(np.asarray(ad.value(z)) < 0):
        raise InvalidArgumentError("gat_inverse needs z >= 0")
    a, s = noise.alpha, noise.sigma
    return ad.sub(ad.mul(ad.square(z), 0.25 * a), 0.375 * a + s * s / a)
