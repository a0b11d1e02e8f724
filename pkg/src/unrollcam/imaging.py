"""Camera image formation (blur, Poisson-Gaussian noise, clipping) and noise calibration.

A capture of a scene ``x`` in [0, 1] is simulated as::

    y = clip(alpha * Poisson((k * x) / alpha) + Normal(0, sigma**2), 0, 1)

per colour channel, where ``k`` is the lens PSF. ``fit_noise_curve``
inverts the noise half of that model from flat grey patches.
"""

import dataclasses
import logging
import math
import warnings

import numpy as np

from unrollcam import fileio, tensor_ops
from unrollcam._backend import kernels
from unrollcam.errors import InvalidArgumentError

log = logging.getLogger(__name__)

# rates at or above this use the normal approximation
POISSON_EXACT_MAX_RATE = 30.0


@dataclasses.dataclass(frozen=True)
class NoiseParams:
    """Poisson scale ``alpha`` and Gaussian read-noise std ``sigma``, both in [0, 1] intensity units."""

    alpha: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.sigma)):
            raise InvalidArgumentError("noise parameters must be finite")
        if self.alpha < 0 or self.sigma < 0:
            raise InvalidArgumentError(f"noise parameters must be >= 0, got {self}")

    def to_dict(self):
        return {"alpha": self.alpha, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(float(d["alpha"]), float(d["sigma"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"bad noise parameters {d!r}: {exc}") from None


@dataclasses.dataclass(frozen=True, eq=False)
class Psf:
    """Normalised, non-negative, odd-sized blur kernel."""

    kernel: np.ndarray
    label: str = ""

    def __post_init__(self):
        k = tensor_ops.check_kernel(self.kernel, odd=True)
        if np.any(k < 0):
            raise InvalidArgumentError("PSF entries must be non-negative")
        if abs(k.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"PSF must sum to 1, sums to {k.sum()!r}")
        k = k.copy()
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @classmethod
    def normalized(cls, kernel, label=""):
        k = np.asarray(kernel, dtype=np.float64)
        total = k.sum()
        if not total > 0:
            raise InvalidArgumentError("PSF must have positive total mass")
        return cls(k / total, label)


def identity_psf():
    return Psf(np.ones((1, 1)), "identity")


def gaussian_psf(sigma_y, sigma_x=None, angle=0.0, size=None, label="gaussian"):
    """Anisotropic Gaussian PSF, rotated by ``angle`` radians, truncated at ~3 sigma."""
    sigma_x = sigma_y if sigma_x is None else sigma_x
    if size is None:
        size = 2 * int(math.ceil(3 * max(sigma_x, sigma_y))) + 1
    r = size // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return Psf.normalized(k, label)


class Rng:
    """Counter-based random source keyed by ``(seed, image_index)``.

    Each image gets an independent Philox stream, so batches can be
    simulated in any order (or in parallel) and still reproduce exactly.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, image_index=0):
        return RngStream(self.seed, image_index)


class RngStream:
    """Sequential draws for one image; ``draws`` counts 64-bit words consumed."""

    def __init__(self, seed, image_index):
        key = np.array([seed, int(image_index) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)
        self.draws = 0

    def _raw(self, n):
        self.draws += n
        return self._bits.random_raw(n)

    def uniform(self, shape):
        """Uniform on [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape))
        return ((self._raw(n) >> np.uint64(11)) * (1.0 / 9007199254740992.0)).reshape(shape)

    def normal(self, shape):
        """Standard normal via Box-Muller (cosine branch)."""
        u1 = 1.0 - self.uniform(shape)
        u2 = self.uniform(shape)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def poisson(self, rates):
        """Poisson counts (as float64). Inverse-CDF below 30, normal approximation above."""
        rates = np.asarray(rates, dtype=np.float64)
        flat = rates.ravel()
        u = self.uniform(flat.shape)
        z = self.normal(flat.shape)
        out = np.empty_like(flat)
        small = flat < POISSON_EXACT_MAX_RATE
        if small.any():
            out[small] = kernels.poisson_inverse_cdf(np.ascontiguousarray(flat[small]), np.ascontiguousarray(u[small]))
        big = ~small
        if big.any():
            lam = flat[big]
            out[big] = np.maximum(np.floor(lam + np.sqrt(lam) * z[big] + 0.5), 0.0)
        return out.reshape(rates.shape)


def blur(x, psf):
    """Apply the PSF to every channel of an (H, W, C) image (circular boundary)."""
    if psf is None or psf.kernel.shape == (1, 1):
        return np.asarray(x, dtype=np.float64) * (1.0 if psf is None else psf.kernel[0, 0])
    return tensor_ops.circ_conv(x, psf.kernel)


def simulate_capture(x, psf, noise, rng, image_index=0):
    """Simulate one raw capture of scene ``x`` (H, W, C) in [0, 1].

    ``rng`` is an :class:`Rng` (the stream for ``image_index`` is used) or
    an :class:`RngStream`. ``psf=None`` means no blur. With
    ``noise.alpha == 0`` the Poisson term is the blurred scene itself.
    """
    x = tensor_ops.as_image(x, "scene")
    if x.min() < 0 or x.max() > 1:
        raise InvalidArgumentError("scene values must lie in [0, 1]")
    if not isinstance(noise, NoiseParams):
        raise InvalidArgumentError("noise must be NoiseParams")
    stream = rng.stream(image_index) if isinstance(rng, Rng) else rng
    clean = np.maximum(blur(x, psf), 0.0)  # FFT round-off can dip below zero
    if noise.alpha > 0:
        with np.errstate(over="ignore"):
            rates = clean / noise.alpha
        # a denormal alpha overflows the rate; shot noise is then negligible
        finite = np.isfinite(rates)
        counts = stream.poisson(np.where(finite, rates, 0.0))
        shot = np.where(finite, noise.alpha * counts, clean)
    else:
        shot = clean
    read = noise.sigma * stream.normal(x.shape) if noise.sigma > 0 else 0.0
    return np.clip(shot + read, 0.0, 1.0)


@dataclasses.dataclass
class NoiseCurve:
    """Per-patch (mean, variance) samples and the fitted noise parameters.

    ``slope`` and ``intercept`` are the raw regression coefficients of
    ``variance = slope * mean + intercept``; ``negative_slope`` flags a fit
    whose slope was clamped to zero.
    """

    samples: list
    fitted: NoiseParams
    slope: float
    intercept: float
    residual: float
    negative_slope: bool = False

    def report(self):
        return {
            "alpha": self.fitted.alpha,
            "sigma": self.fitted.sigma,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "negative_slope": self.negative_slope,
            "samples": [{"mean": m, "variance": v} for m, v in self.samples],
        }


def fit_noise_curve(patches, weighted=True, iterations=3):
    """Fit ``variance = alpha * mean + sigma**2`` to flat grey patches.

    Parameters
    ----------
    patches : list of (true_mean, image)
        Each image is a capture of a spatially constant scene. At least
        three patches are required. Keep true means away from 0 and 1 so
        clipping does not bias the variances.
    weighted : bool
        Iteratively reweight by the inverse squared predicted variance (the
        sampling variance of a variance estimate scales with its square).
        With ``False`` a plain least-squares line is fitted.

    Returns
    -------
    NoiseCurve
    """
    if len(patches) < 3:
        raise InvalidArgumentError(f"need at least 3 patches, got {len(patches)}")
    means, variances, sizes = [], [], []
    for true_mean, img in patches:
        img = tensor_ops.as_image(img, "patch")
        if not 0.0 <= float(true_mean) <= 1.0:
            raise InvalidArgumentError(f"patch true mean {true_mean} outside [0, 1]")
        means.append(float(img.mean()))
        # a perfectly flat patch has zero variance; var() can leave ~1e-33 of rounding
        flat = img.size < 2 or np.ptp(img) == 0
        variances.append(0.0 if flat else float(img.var(ddof=1)))
        sizes.append(img.size)
    m = np.array(means)
    v = np.array(variances)
    if np.ptp(m) == 0:
        raise InvalidArgumentError("patch means must not all be equal")

    design = np.column_stack([m, np.ones_like(m)])
    w = np.ones_like(m)
    coef = np.linalg.lstsq(design, v, rcond=None)[0]
    if weighted:
        for _ in range(iterations):
            pred = design @ coef
            floor = max(float(np.abs(v).max()) * 1e-3, 1e-30)
            w = 1.0 / np.maximum(pred, floor) ** 2
            sw = np.sqrt(w)
            coef = np.linalg.lstsq(design * sw[:, None], v * sw, rcond=None)[0]
    slope, intercept = float(coef[0]), float(coef[1])
    resid = v - design @ coef
    residual = float(np.sqrt(np.mean(resid**2)))

    negative = slope < 0
    if negative:
        log.warning("fitted noise slope %.3g < 0; clamping alpha to 0", slope)
    alpha = max(slope, 0.0)
    sigma = math.sqrt(max(intercept, 0.0))
    if np.all(v == 0):
        alpha, sigma = 0.0, 0.0
    return NoiseCurve(
        samples=list(zip(means, variances)),
        fitted=NoiseParams(alpha, sigma),
        slope=slope,
        intercept=intercept,
        residual=residual,
        negative_slope=negative,
    )


# -- files ----------------------------------------------------------------------


def load_psf(path, label=None):
    """Load a PSF from a greyscale PFM file and normalise it to unit sum.

    Warns when the stored kernel's sum was off by more than 1e-6.
    """
    try:
        k = fileio.read_pfm(path)
    except OSError as exc:
        raise InvalidArgumentError(f"{path}: cannot read PSF ({exc.strerror})") from None
    if k.ndim != 2:
        raise InvalidArgumentError(f"{path}: PSF must be a greyscale (Pf) PFM")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise InvalidArgumentError(f"{path}: PSF dimensions must be odd, got {k.shape}")
    if np.any(k < 0):
        raise InvalidArgumentError(f"{path}: PSF has negative entries")
    if not np.all(np.isfinite(k)):
        raise InvalidArgumentError(f"{path}: PSF has non-finite entries")
    total = k.sum()
    if not total > 0:
        raise InvalidArgumentError(f"{path}: PSF sums to zero")
    if abs(total - 1.0) > 1e-6:
        warnings.warn(f"{path}: PSF sums to {total:.6g}, renormalising", stacklevel=2)
    if label is None:
        label = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return Psf(k / total, label)


def save_psf(path, psf):
    fileio.write_pfm(path, psf.kernel)


def save_noise_params(path, noise):
    fileio.write_json(path, noise.to_dict())


def load_noise_params(path):
    return NoiseParams.from_dict(fileio.read_json(path))


def save_noise_table(path, table):
    """``table`` maps lux -> NoiseParams."""
    levels = [{"lux": float(lux), **p.to_dict()} for lux, p in sorted(table.items())]
    fileio.write_json(path, {"levels": levels})


def load_noise_table(path):
    doc = fileio.read_json(path)
    try:
        return {float(e["lux"]): NoiseParams.from_dict(e) for e in doc["levels"]}
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"{path}: bad noise table ({exc})") from None
