"""Losses, RMSProp, the minibatch trainer and a finite-difference gradient checker.

Models plug in through two methods: ``parameters()`` returning an ordered
``{name: ndarray}`` mapping and ``load_parameters(mapping)``. The trainer
drives a ``loss_fn(params, batch)`` callable that returns a scalar (a tape
``Var`` when ``params`` holds ``Var`` leaves).
"""

import csv
import dataclasses
import logging
import math

import numpy as np

from unrollcam import autodiff as ad
from unrollcam import fileio
from unrollcam.errors import InvalidArgumentError, NumericalError

log = logging.getLogger(__name__)


# -- losses ---------------------------------------------------------------------------


def _same_shape(x, ref):
    xs, rs = np.shape(ad.value(x)), np.shape(ad.value(ref))
    if xs != rs:
        raise InvalidArgumentError(f"shape mismatch: {xs} vs {rs}")


def mse(x, ref):
    """Mean squared error over all elements."""
    _same_shape(x, ref)
    return ad.mean(ad.square(ad.sub(x, ref)))


def psnr(x, ref, peak=1.0):
    """PSNR in dB (plain float). Identical inputs give ``inf``."""
    _same_shape(x, ref)
    err = float(np.mean((np.asarray(ad.value(x)) - np.asarray(ad.value(ref))) ** 2))
    return psnr_from_mse(err, peak)


def psnr_var(x, ref, peak=1.0):
    """Differentiable PSNR, ``10 * log10(peak^2 / mse)``."""
    return ad.mul(ad.log(ad.div(peak * peak, mse(x, ref))), 10.0 / math.log(10.0))


def psnr_from_mse(err, peak=1.0):
    return math.inf if err == 0 else 10.0 * math.log10(peak * peak / err)


def mean_psnr(values):
    """Average of finite PSNR values (``inf`` entries are excluded)."""
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of (B, K) or (K,) logits against integer labels."""
    lv = np.asarray(ad.value(logits))
    labels = np.atleast_1d(np.asarray(labels))
    if lv.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
        lv = lv.reshape(1, -1)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise InvalidArgumentError(f"logits {lv.shape} do not match labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= lv.shape[1]:
        raise InvalidArgumentError(f"labels must be integers in [0, {lv.shape[1]})")
    picked = ad.getitem(ad.log_softmax(logits), (np.arange(lv.shape[0]), labels))
    return ad.neg(ad.mean(picked))


# -- optimiser --------------------------------------------------------------------------


@dataclasses.dataclass
class RMSProp:
    """RMSProp: ``acc = decay*acc + (1-decay)*g^2``, ``p -= lr * g / sqrt(acc + eps)``.

    Defaults are the fine-tuning settings (decay 0.9, eps 1.0, lr 4.5e-3,
    x0.94 per epoch). ``eps`` sits inside the square root. Accumulators
    start at ``acc_init``; starting at 1 rather than 0 makes the first steps
    roughly ``lr * g`` instead of ``3 * lr * sign(g)`` on every coordinate.
    """

    lr: float = 4.5e-3
    decay: float = 0.9
    eps: float = 1.0
    lr_decay_per_epoch: float = 0.94
    acc_init: float = 1.0
    acc: dict = dataclasses.field(default_factory=dict)
    epoch: int = 0

    @property
    def current_lr(self):
        return self.lr * self.lr_decay_per_epoch**self.epoch

    def step(self, params, grads):
        """Update ``params`` (name -> ndarray) in place from ``grads``."""
        lr = self.current_lr
        for name, g in grads.items():
            acc = self.acc.get(name)
            if acc is None:
                acc = np.full_like(g, self.acc_init)
            acc = self.decay * acc + (1.0 - self.decay) * g * g
            self.acc[name] = acc
            params[name] = params[name] - lr * g / np.sqrt(acc + self.eps)
        return params

    def end_epoch(self):
        self.epoch += 1


# -- training ----------------------------------------------------------------------------


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    lr: float = 4.5e-3
    decay: float = 0.9
    eps: float = 1.0
    lr_decay_per_epoch: float = 0.94
    max_steps: int = None
    acc_init: float = 1.0


@dataclasses.dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    psnr: float
    lr: float


def train(model, dataset, loss_fn, config, trainable=None, metric_fn=None, on_step=None):
    """Minibatch RMSProp over ``dataset`` (a sequence of samples).

    Parameters
    ----------
    model
        Object with ``parameters()`` / ``load_parameters()``.
    loss_fn : callable(params, batch) -> scalar
        ``params`` maps every parameter name to either a tape Var (trainable)
        or a plain array (frozen).
    trainable : callable(name) -> bool, optional
        Selects the trainable subset; all parameters by default.
    metric_fn : callable(loss) -> float, optional
        Per-step metric derived from the batch loss (e.g. PSNR of an MSE loss).

    Returns the list of :class:`StepRecord`. Shuffling is derived from
    ``config.seed``; the same seed and config reproduce the trajectory
    bit for bit.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("empty dataset")
    trainable = trainable or (lambda name: True)
    opt = RMSProp(config.lr, config.decay, config.eps, config.lr_decay_per_epoch, config.acc_init)
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in model.parameters().items()}
    names = [k for k in params if trainable(k)]
    if not names:
        raise InvalidArgumentError("nothing to train: trainable subset is empty")
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            tape = ad.Tape()
            mapping = {k: (tape.variable(v, k) if k in names else v) for k, v in params.items()}
            loss = loss_fn(mapping, batch)
            lval = float(ad.value(loss))
            if not math.isfinite(lval):
                raise NumericalError(f"loss became {lval} at step {step}", node="loss")
            grads = tape.backward(loss)
            lr = opt.current_lr
            opt.step(params, {k: grads[k] for k in names})
            metric = metric_fn(lval) if metric_fn else math.nan
            rec = StepRecord(step, epoch, lval, metric, lr)
            history.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        opt.end_epoch()
        model.load_parameters(params)
    model.load_parameters(params)
    return history


def write_history(path, history):
    with fileio.atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "psnr", "lr"])
            for r in history:
                w.writerow([r.step, repr(r.loss), "" if math.isnan(r.psnr) else repr(r.psnr), repr(r.lr)])


# -- gradient checking ----------------------------------------------------------------------


@dataclasses.dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict
    coordinates: dict

    @property
    def failures(self):
        return [k for k, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        out = []
        for k, e in self.max_rel_error.items():
            status = "ok  " if e <= self.tolerance else "FAIL"
            out.append(f"{status} {k:<32s} max rel err {e:.3e} over {self.coordinates[k]} coords")
        return out


def grad_check(params, loss_fn, tolerance=1e-5, samples=10, seed=0):
    """Compare tape gradients with central differences on sampled coordinates.

    ``loss_fn(mapping)`` must return a scalar for plain arrays and a tape
    Var when the mapping holds Vars. Step size is ``1e-5 * max(1, |p|)``;
    if a coordinate disagrees, it is re-probed at a tenth of that step
    (a ReLU kink inside the stencil is the usual cause) and the smaller
    error is kept. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-5 * max(1, |L|))``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = ad.Tape()
    leaves = {k: tape.variable(v.copy(), k) for k, v in base.items()}
    loss = loss_fn(leaves)
    L = float(ad.value(loss))
    analytic = tape.backward(loss)
    floor = 1e-5 * max(1.0, abs(L))
    rng = np.random.default_rng(seed)

    def probe(name, idx, h):
        trial = dict(base)
        arr = base[name].copy()
        arr[idx] = base[name][idx] + h
        trial[name] = arr
        lp = float(loss_fn(trial))
        arr = base[name].copy()
        arr[idx] = base[name][idx] - h
        trial[name] = arr
        lm = float(loss_fn(trial))
        return (lp - lm) / (2.0 * h)

    errors, counts = {}, {}
    for name, arr in base.items():
        if arr.size == 0:
            errors[name], counts[name] = 0.0, 0
            continue
        flat = rng.choice(arr.size, size=min(samples, arr.size), replace=False)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            a = float(analytic[name][idx])
            h0 = 1e-5 * max(1.0, abs(float(arr[idx])))
            err = math.inf
            for h in (h0, h0 / 10.0):
                n = probe(name, idx, h)
                err = min(err, abs(a - n) / max(abs(a), abs(n), floor))
                if err <= tolerance:
                    break
            worst = max(worst, err)
        errors[name], counts[name] = worst, len(flat)
    return GradCheckReport(tolerance, errors, counts)
