"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` leaves.
Primitives accept plain arrays as well; when none of their inputs is a
``Var`` they simply return the numpy result, so the same model code serves
inference and training.

Complex values carry gradients as ``dL/dRe + 1j * dL/dIm`` (the loss is
always real). With that convention the adjoint of a complex-linear map
``M`` is ``M^H`` and the rules below follow from elementwise real/imag
composition.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(np.array([1.0, 2.0]), "x")
>>> loss = 0.5 * sum_(x * x)
>>> tape.backward(loss)["x"]
array([1., 2.])
"""

import numpy as np

from unrollcam import tensor_ops
from unrollcam.errors import InvalidArgumentError, NumericalError, TapeStateError


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, value, tape, index, name):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var({self.name}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class _Node:
    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, out, parents, vjp, name):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.name = name


class Tape:
    """Record of one forward pass. ``backward`` may be called once."""

    def __init__(self):
        self._nodes = []
        self._leaves = []
        self._count = 0
        self._spent = False

    def variable(self, value, name=None):
        """Register a differentiable leaf."""
        if self._spent:
            raise TapeStateError("tape already used for a backward pass")
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.complexfloating):
            value = value.astype(np.float64, copy=False)
        v = Var(value, self, self._count, name or f"leaf{self._count}")
        self._count += 1
        self._leaves.append(v)
        return v

    def _record(self, value, parents, vjp, name):
        if self._spent:
            raise TapeStateError("tape already used for a backward pass")
        out = Var(value, self, self._count, name)
        self._count += 1
        self._nodes.append(_Node(out, parents, vjp, name))
        return out

    def backward(self, loss, check_finite=True):
        """Gradients of the scalar ``loss`` for every leaf, keyed by leaf name.

        Leaves the loss does not depend on get zero arrays.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise InvalidArgumentError("loss must be a Var recorded on this tape")
        if loss.value.size != 1 or np.iscomplexobj(loss.value):
            raise InvalidArgumentError(f"loss must be a real scalar, got shape {loss.value.shape}")
        if self._spent:
            raise TapeStateError("backward already ran on this tape")
        self._spent = True

        grads = {loss.index: np.ones_like(loss.value)}
        nodes, self._nodes = self._nodes, []
        try:
            while nodes:
                # pop as we go: Var <-> tape <-> closure cycles would otherwise
                # keep every intermediate array alive until a full GC pass
                node = nodes.pop()
                g = grads.pop(node.out.index, None)
                if g is None:
                    continue
                parent_grads = node.vjp(g)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not isinstance(parent, Var):
                        continue
                    pg = _fit(pg, parent.value)
                    if check_finite and not np.all(np.isfinite(pg)):
                        raise NumericalError(f"non-finite gradient produced by {node.name}", node=node.name)
                    prev = grads.get(parent.index)
                    grads[parent.index] = pg if prev is None else prev + pg
        finally:
            nodes.clear()
        return {
            leaf.name: grads.get(leaf.index, np.zeros_like(leaf.value)) for leaf in self._leaves
        }


def _fit(g, like):
    """Sum out broadcast axes and drop imaginary parts for real targets."""
    g = np.asarray(g)
    if g.shape != like.shape:
        extra = g.ndim - like.ndim
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (gs, ls) in enumerate(zip(g.shape, like.shape)) if ls == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(like.shape)
    if np.iscomplexobj(g) and not np.iscomplexobj(like):
        g = np.real(g)
    return g


def value(x):
    """Underlying array of ``x`` (Var or array-like)."""
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise InvalidArgumentError("cannot mix Vars from different tapes")
    return tape


def _op(name, out, parents, vjp):
    tape = _tape_of(parents)
    if tape is None:
        return out
    return tape._record(out, parents, vjp, name)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    return _op("add", value(a) + value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _op("sub", value(a) - value(b), (a, b), lambda g: (g, -g))


def neg(a):
    return _op("neg", -value(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value(a), value(b)
    return _op("mul", av * bv, (a, b), lambda g: (g * np.conj(bv), g * np.conj(av)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv

    def vjp(g):
        ga = g / np.conj(bv)
        return ga, -ga * np.conj(out)

    return _op("div", out, (a, b), vjp)


def conj(a):
    return _op("conj", np.conj(value(a)), (a,), lambda g: (np.conj(g),))


def real(a):
    return _op("real", np.real(value(a)), (a,), lambda g: (g,))


def abs2(a):
    """``|a|**2`` elementwise; real output."""
    av = value(a)
    out = np.real(av * np.conj(av)) if np.iscomplexobj(av) else av * av
    return _op("abs2", out, (a,), lambda g: (2.0 * g * av,))


def square(a):
    av = value(a)
    return _op("square", av * av, (a,), lambda g: (2.0 * g * np.conj(av),))


def exp(a):
    out = np.exp(value(a))
    return _op("exp", out, (a,), lambda g: (g * np.conj(out),))


def log(a):
    av = value(a)
    return _op("log", np.log(av), (a,), lambda g: (g / np.conj(av),))


def sqrt(a):
    out = np.sqrt(value(a))
    return _op("sqrt", out, (a,), lambda g: (0.5 * g / np.conj(out),))


def relu(a):
    return _op("relu", *_relu_parts(a))


def clamp_min0(a):
    """``max(a, 0)`` with subgradient 0 at the kink."""
    return _op("clamp_min0", *_relu_parts(a))


def _relu_parts(a):
    av = value(a)
    mask = av > 0
    # NaN passes through so a blow-up is reported rather than zeroed
    return np.where(mask | np.isnan(av), av, 0.0), (a,), lambda g: (g * mask,)


# -- reductions and shape --------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _op("sum", out, (a,), vjp)


def mean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    av = value(a)
    return _op("reshape", av.reshape(shape), (a,), lambda g: (np.reshape(g, av.shape),))


def moveaxis(a, source, destination):
    out = np.moveaxis(value(a), source, destination)
    return _op("moveaxis", out, (a,), lambda g: (np.moveaxis(g, destination, source),))


def getitem(a, idx):
    av = value(a)

    def vjp(g):
        full = np.zeros_like(av, dtype=np.result_type(av, g))
        np.add.at(full, idx, g)
        return (full,)

    return _op("getitem", av[idx], (a,), vjp)


def stack(items, axis=0):
    vals = [value(v) for v in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _op("stack", out, tuple(items), vjp)


def concatenate(items, axis=0):
    vals = [value(v) for v in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op("concatenate", out, tuple(items), vjp)


# -- Fourier ------------------------------------------------------------------------


def fft2(a):
    """Unnormalised DFT over the last two axes."""
    av = value(a)
    n = av.shape[-1] * av.shape[-2]
    return _op("fft2", tensor_ops.fft2(av), (a,), lambda g: (n * tensor_ops.ifft2(g),))


def ifft2(a):
    av = value(a)
    n = av.shape[-1] * av.shape[-2]
    return _op("ifft2", tensor_ops.ifft2(av), (a,), lambda g: (tensor_ops.fft2(g) / n,))


def pad_kernel(k, shape):
    kv = value(k)
    kshape = kv.shape[-2:]
    return _op(
        "pad_kernel",
        tensor_ops.pad_kernel(kv, shape),
        (k,),
        lambda g: (tensor_ops.unpad_kernel(g, kshape),),
    )


# -- convolution and per-pixel layers ----------------------------------------------


def bank_conv(x, filters):
    """Circular filter-bank convolution, (C, H, W) x (m, kh, kw) -> (C, m, H, W)."""
    xv, fv = value(x), value(filters)
    out = tensor_ops.bank_forward(xv, fv)

    def vjp(g):
        gx = tensor_ops.bank_adjoint(g, fv) if isinstance(x, Var) else None
        gf = tensor_ops.bank_filter_grad(xv, g, fv.shape[1:]) if isinstance(filters, Var) else None
        return gx, gf

    return _op("bank_conv", out, (x, filters), vjp)


def dense(x, weight, bias):
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    xv, wv = value(x), value(weight)
    out = xv @ wv.T + value(bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xv.reshape(-1, xv.shape[-1])
        return g @ wv, gw, g2.sum(axis=0)

    return _op("dense", out, (x, weight, bias), vjp)


def conv2d_same(x, weight):
    """Zero-padded 'same' convolution (cross-correlation, CNN convention).

    x: (B, H, W, Cin), weight: (kh, kw, Cin, Cout) -> (B, H, W, Cout).
    """
    xv, wv = value(x), value(weight)
    kh, kw, cin, cout = wv.shape
    ph, pw = kh // 2, kw // 2
    B, H, W, _ = xv.shape
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (B, H, W, Cin, kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * cin)
    wmat = wv.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, H, W, cout)

    def vjp(g):
        g2 = g.reshape(B * H * W, cout)
        gw = (cols.T @ g2).reshape(wv.shape)
        gx = None
        if isinstance(x, Var):
            gcols = (g2 @ wmat.T).reshape(B, H, W, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a : a + H, b : b + W, :] += gcols[:, :, :, a, b, :]
            gx = gxp[:, ph : ph + H, pw : pw + W, :]
        return gx, gw

    return _op("conv2d_same", out, (x, weight), vjp)


def maxpool2(x):
    """2x2 max pooling with stride 2 on (B, H, W, C); odd trailing rows/cols dropped."""
    xv = value(x)
    B, H, W, C = xv.shape
    H2, W2 = H // 2, W // 2
    blocks = xv[:, : 2 * H2, : 2 * W2, :].reshape(B, H2, 2, W2, 2, C)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(B, H2, W2, C, 4)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, H2, W2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * H2, 2 * W2, C)
        full = np.zeros_like(xv)
        full[:, : 2 * H2, : 2 * W2, :] = gb
        return (full,)

    return _op("maxpool2", out, (x,), vjp)


def log_softmax(logits):
    """Max-subtracted log-softmax over the last axis."""
    lv = value(logits)
    shifted = lv - lv.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _op("log_softmax", out, (logits,), vjp)
