"""Unrolled half-quadratic splitting with a learned per-pixel proximal network.

Each stage takes the current estimate ``x``, computes filter responses
``Cx``, maps them through a small 1x1-convolution network (the learned
proximal operator) to get ``z``, then solves

    (r * A^T A + C^T C + eps) x = r * A^T y + C^T z,    r = lambda / beta

exactly by division in the Fourier domain (periodic boundaries). In denoise
mode ``A = I`` and the whole core is wrapped in the generalized Anscombe
transform; in deblur mode ``A`` is convolution with a known PSF and the
noise is treated as Gaussian.

Array layout inside this module is channel-first: images are (C, H, W),
filter responses are (G, m, H, W) with ``G = 1`` when colours are merged
and ``G = C`` otherwise. :func:`run_pipeline` takes and returns (H, W, C).

Every function takes an optional ``params`` mapping (name -> array or tape
``Var``) so the same code runs inference and records gradients.
"""

import dataclasses
import math

import numpy as np

from unrollcam import anscombe, tensor_ops
from unrollcam import autodiff as ad
from unrollcam.errors import InvalidArgumentError
from unrollcam.imaging import NoiseParams, Psf

RIDGE = 1e-9
FORMAT_VERSION = 1


def dct_filters(size=5, count=None):
    """Orthonormal 2D DCT-II atoms of ``size`` x ``size`` without the constant atom.

    Atoms are ordered by total frequency; ``count`` keeps the first ones.
    """
    n = np.arange(size)
    basis = np.array(
        [np.sqrt((1.0 if u == 0 else 2.0) / size) * np.cos(np.pi * (n + 0.5) * u / size) for u in range(size)]
    )
    order = sorted(((u, v) for u in range(size) for v in range(size) if (u, v) != (0, 0)), key=lambda t: (t[0] + t[1], t[0]))
    count = len(order) if count is None else count
    if count > len(order):
        raise InvalidArgumentError(f"at most {len(order)} non-constant DCT atoms for size {size}")
    return np.array([np.outer(basis[u], basis[v]) for u, v in order[:count]])


@dataclasses.dataclass
class FilterBank:
    """Filters c_1..c_m, shape (m, kh, kw), shared across colour channels."""

    filters: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.filters, dtype=np.float64)
        if f.ndim != 3:
            raise InvalidArgumentError(f"filter bank must be (m, kh, kw), got {f.shape}")
        if f.shape[0] and (f.shape[1] % 2 == 0 or f.shape[2] % 2 == 0):
            raise InvalidArgumentError("filter dimensions must be odd")
        if not np.all(np.isfinite(f)):
            raise InvalidArgumentError("filters must be finite")
        self.filters = f

    @property
    def count(self):
        return self.filters.shape[0]

    @classmethod
    def dct(cls, count=24, size=5):
        return cls(dct_filters(size, count))

    @classmethod
    def empty(cls, size=1):
        return cls(np.zeros((0, size, size)))


@dataclasses.dataclass
class ProxNet:
    """Per-pixel MLP: affine layers with ReLU between them, none after the last."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("ProxNet needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgumentError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")
        if self.weights[0].shape[1] != self.weights[-1].shape[0]:
            raise InvalidArgumentError("ProxNet must map m channels to m channels")

    @property
    def channels(self):
        return self.weights[0].shape[1]

    @classmethod
    def random(cls, channels, hidden=24, layers=3, rng=None):
        """He-initialised weights (std sqrt(2 / fan_in)), zero biases."""
        rng = np.random.default_rng(rng)
        dims = [channels] + [hidden] * (layers - 1) + [channels]
        weights = [rng.normal(0.0, math.sqrt(2.0 / max(fi, 1)), (fo, fi)) for fi, fo in zip(dims[:-1], dims[1:])]
        return cls(weights, [np.zeros(fo) for fo in dims[1:]])

    @classmethod
    def identity(cls, channels):
        return cls([np.eye(channels)], [np.zeros(channels)])


@dataclasses.dataclass
class HqsStage:
    filter_bank: FilterBank
    prox_net: ProxNet
    log_lambda: float = 0.0
    log_beta: float = 0.0
    merge_colors: bool = False

    def __post_init__(self):
        if self.prox_net.channels != self.filter_bank.count:
            raise InvalidArgumentError(
                f"prox expects {self.prox_net.channels} channels, filter bank has {self.filter_bank.count}"
            )
        if not (math.isfinite(self.log_lambda) and math.isfinite(self.log_beta)):
            raise InvalidArgumentError("log lambda / log beta must be finite")

    @property
    def lam(self):
        return math.exp(self.log_lambda)

    @property
    def beta(self):
        return math.exp(self.log_beta)

    def parameters(self, prefix=""):
        p = {f"{prefix}filters": self.filter_bank.filters}
        for i, (w, b) in enumerate(zip(self.prox_net.weights, self.prox_net.biases)):
            p[f"{prefix}prox.{i}.weight"] = w
            p[f"{prefix}prox.{i}.bias"] = b
        p[f"{prefix}log_lambda"] = np.array(self.log_lambda)
        p[f"{prefix}log_beta"] = np.array(self.log_beta)
        return p

    def load_parameters(self, params, prefix=""):
        self.filter_bank = FilterBank(params[f"{prefix}filters"])
        n = len(self.prox_net.weights)
        self.prox_net = ProxNet(
            [params[f"{prefix}prox.{i}.weight"] for i in range(n)],
            [params[f"{prefix}prox.{i}.bias"] for i in range(n)],
        )
        self.log_lambda = float(params[f"{prefix}log_lambda"])
        self.log_beta = float(params[f"{prefix}log_beta"])


@dataclasses.dataclass
class HqsPipeline:
    """N unrolled stages plus the measurement model they invert."""

    stages: list
    mode: str = "denoise"
    noise: NoiseParams = dataclasses.field(default_factory=lambda: NoiseParams(0.01, 0.01))
    psf: Psf = None
    use_gat: bool = None

    def __post_init__(self):
        if self.mode not in ("denoise", "deblur"):
            raise InvalidArgumentError(f"mode must be 'denoise' or 'deblur', got {self.mode!r}")
        if self.use_gat is None:
            self.use_gat = self.mode == "denoise"
        if self.mode == "deblur":
            if self.psf is None:
                raise InvalidArgumentError("deblur mode needs a PSF")
            if abs(self.psf.kernel.sum() - 1.0) > 1e-9:
                raise InvalidArgumentError("deblur PSF must have unit DC gain")
        if self.use_gat and self.noise.alpha <= 0:
            raise InvalidArgumentError("GAT needs alpha > 0; set use_gat=False for Gaussian noise")

    @classmethod
    def default(cls, mode="denoise", noise=None, psf=None, stages=1, filters=24, filter_size=5,
                prox_layers=3, prox_channels=24, merge_colors=None, seed=0):
        """Fresh pipeline: DCT filters, He-initialised prox, lambda = beta = 1."""
        if merge_colors is None:
            merge_colors = mode == "deblur"
        rng = np.random.default_rng(seed)
        built = [
            HqsStage(
                FilterBank.dct(filters, filter_size),
                ProxNet.random(filters, prox_channels, prox_layers, rng),
                merge_colors=merge_colors,
            )
            for _ in range(stages)
        ]
        return cls(built, mode, noise or NoiseParams(0.01, 0.01), psf)

    def parameters(self):
        """All trainable arrays, keyed ``stage{k}.<name>``."""
        p = {}
        for k, st in enumerate(self.stages):
            p.update(st.parameters(f"stage{k}."))
        return p

    def load_parameters(self, params):
        for k, st in enumerate(self.stages):
            st.load_parameters(params, f"stage{k}.")


# -- stage operations ----------------------------------------------------------------


def _stage_params(stage, params, k):
    if params is None:
        return stage.parameters("")
    prefix = f"stage{k}."
    return {name[len(prefix):]: v for name, v in params.items() if name.startswith(prefix)}


def filter_responses(stage, x, params=None):
    """Cx for a (C, H, W) image -> (G, m, H, W); summed over colours when merged."""
    p = params or stage.parameters()
    r = ad.bank_conv(x, p["filters"])
    if stage.merge_colors:
        r = ad.sum_(r, axis=0, keepdims=True)
    return r


def filter_adjoint(stage, z, channels, params=None):
    """C^T z back to (channels, H, W); merged z is copied onto every colour first."""
    p = params or stage.parameters()
    zv = np.asarray(ad.value(z))
    if stage.merge_colors and zv.shape[0] == 1:
        zv = np.broadcast_to(zv, (channels,) + zv.shape[1:])
    return tensor_ops.bank_adjoint(zv, ad.value(p["filters"]))


def prox_apply(stage, responses, params=None):
    """Apply the prox network independently at every pixel of (G, m, H, W) responses."""
    p = params or stage.parameters()
    m = ad.value(responses).shape[1]
    if m != stage.prox_net.channels:
        raise InvalidArgumentError(f"prox expects {stage.prox_net.channels} channels, got {m}")
    h = ad.moveaxis(responses, 1, -1)
    n = len(stage.prox_net.weights)
    for i in range(n):
        h = ad.dense(h, p[f"prox.{i}.weight"], p[f"prox.{i}.bias"])
        if i < n - 1:
            h = ad.relu(h)
    return ad.moveaxis(h, -1, 1)


def hqs_x_update(stage, y, z, psf=None, params=None, eps=RIDGE):
    """Fourier-domain solve of the HQS least-squares step.

    ``y`` is (C, H, W), ``z`` is (G, m, H, W); ``psf`` None means A = I.
    """
    p = params or stage.parameters()
    yv = ad.value(y)
    C, H, W = yv.shape
    ratio = ad.exp(ad.sub(p["log_lambda"], p["log_beta"]))
    Y = ad.fft2(y)
    if psf is None:
        data_num = ad.mul(Y, ratio)
        data_den = ad.mul(np.ones((H, W)), ratio)
    else:
        K = tensor_ops.otf(psf.kernel, (H, W))
        data_num = ad.mul(ad.mul(Y, np.conj(K)), ratio)
        data_den = ad.mul(np.abs(K) ** 2, ratio)

    filters = p["filters"]
    m = ad.value(filters).shape[0]
    if m:
        Cf = ad.fft2(ad.pad_kernel(filters, (H, W)))  # (m, H, W)
        Z = ad.fft2(z)  # (G, m, H, W)
        prior_num = ad.sum_(ad.mul(Z, ad.conj(Cf)), axis=1)  # (G, H, W)
        prior_den = ad.sum_(ad.abs2(Cf), axis=0)
        num = ad.add(data_num, prior_num)
        den = ad.add(ad.add(data_den, prior_den), eps)
    else:
        num = data_num
        den = ad.add(data_den, eps)
    if not np.all(ad.value(den) > 0):
        raise InvalidArgumentError("x-update denominator is not positive")
    return ad.real(ad.ifft2(ad.div(num, den)))


def run_pipeline(pipeline, y, params=None):
    """Reconstruct an (H, W, C) measurement. Output is not clamped to [0, 1]."""
    yv = ad.value(y)
    if not isinstance(y, ad.Var):
        yv = tensor_ops.as_image(yv, "measurement")
        y = yv
    if yv.ndim != 3:
        raise InvalidArgumentError(f"measurement must be HxWxC, got {yv.shape}")
    if yv.min() < 0 or yv.max() > 1:
        raise InvalidArgumentError("measurement values must lie in [0, 1]")
    if not pipeline.stages:
        # the transform sandwich around an empty core is the identity
        return ad.add(y, 0.0) if isinstance(y, ad.Var) else yv.copy()
    t = ad.moveaxis(y, -1, 0)
    if pipeline.use_gat:
        t = anscombe.gat_forward(t, pipeline.noise)
    psf = pipeline.psf if pipeline.mode == "deblur" else None
    x = t
    for k, stage in enumerate(pipeline.stages):
        sp = _stage_params(stage, params, k) if params is not None else None
        resp = filter_responses(stage, x, sp)
        z = prox_apply(stage, resp, sp)
        x = hqs_x_update(stage, t, z, psf, sp)
    if pipeline.use_gat:
        # the HQS core can leave the GAT domain; the inverse is only defined for z >= 0
        x = anscombe.gat_inverse(ad.clamp_min0(x), pipeline.noise)
    return ad.moveaxis(x, 0, -1)


# -- checkpoints ---------------------------------------------------------------------


def to_checkpoint(pipeline):
    """JSON-ready dict; floats round-trip exactly through ``json``."""
    return {
        "format_version": FORMAT_VERSION,
        "kind": "hqs_pipeline",
        "mode": pipeline.mode,
        "use_gat": pipeline.use_gat,
        "noise": pipeline.noise.to_dict(),
        "psf": None if pipeline.psf is None else {"label": pipeline.psf.label, "kernel": pipeline.psf.kernel.tolist()},
        "stages": [
            {
                "merge_colors": st.merge_colors,
                "log_lambda": st.log_lambda,
                "log_beta": st.log_beta,
                "filters": st.filter_bank.filters.tolist(),
                "prox": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(st.prox_net.weights, st.prox_net.biases)],
            }
            for st in pipeline.stages
        ],
    }


def from_checkpoint(doc):
    try:
        if doc.get("kind", "hqs_pipeline") != "hqs_pipeline":
            raise InvalidArgumentError(f"not a pipeline checkpoint (kind={doc.get('kind')!r})")
        if doc["format_version"] != FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint version {doc['format_version']}")
        psf = None
        if doc["psf"] is not None:
            psf = Psf(np.array(doc["psf"]["kernel"], dtype=np.float64), doc["psf"]["label"])
        stages = []
        for s in doc["stages"]:
            filters = np.array(s["filters"], dtype=np.float64)
            if filters.size == 0:
                filters = filters.reshape(0, 1, 1)
            stages.append(
                HqsStage(
                    FilterBank(filters),
                    ProxNet([l["weight"] for l in s["prox"]], [l["bias"] for l in s["prox"]]),
                    float(s["log_lambda"]),
                    float(s["log_beta"]),
                    bool(s["merge_colors"]),
                )
            )
        return HqsPipeline(stages, doc["mode"], NoiseParams.from_dict(doc["noise"]), psf, bool(doc["use_gat"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise InvalidArgumentError(f"malformed checkpoint: {exc!r}") from None
