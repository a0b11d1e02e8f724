import numpy as np
import pytest

from unrollcam import anscombe
from unrollcam import autodiff as ad
from unrollcam.errors import InvalidArgumentError, NumericalError, TapeStateError
from unrollcam.imaging import NoiseParams

R = np.random.default_rng(99)


def real_ip(a, b):
    return float(np.sum(np.real(np.conj(a) * b)))


def rnd(shape, complex_=False, low=None):
    if low is not None:
        return R.uniform(low, low + 1.0, shape)
    x = R.normal(size=shape)
    return x + 1j * R.normal(size=shape) if complex_ else x


def vjp_of(fn, args, wrt):
    out = np.asarray(ad.value(fn(*args)))

    def vjp(w):
        # backward through a probe node L = Re<w, out>, whose own vjp is w
        tape = ad.Tape()
        vs = [tape.variable(a, "x") if i == wrt else a for i, a in enumerate(args)]
        res = fn(*vs)
        probe = ad._op("probe", np.array(real_ip(w, ad.value(res))), (res,), lambda g: (g * w,))
        return tape.backward(probe)["x"]

    return out, vjp


def linear_jvp(fn, args, wrt, v):
    # exact for maps that are affine in the chosen argument
    hi = list(args)
    lo = list(args)
    hi[wrt] = v
    lo[wrt] = np.zeros_like(v)
    return np.asarray(fn(*hi)) - np.asarray(fn(*lo))


def cstep_jvp(fn, args, wrt, v, h=1e-30):
    # complex-step derivative, exact to rounding for real-analytic maps of real input
    a = list(args)
    a[wrt] = args[wrt] + 1j * h * v
    return np.imag(np.asarray(fn(*a))) / h


def check(fn, args, wrt, jvp):
    out, vjp = vjp_of(fn, args, wrt)
    x = np.asarray(args[wrt])
    v = rnd(x.shape, np.iscomplexobj(x))
    w = rnd(out.shape, np.iscomplexobj(out))
    lhs = real_ip(w, jvp(fn, args, wrt, v))
    rhs = real_ip(vjp(w), v)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs)), (lhs, rhs)


LINEAR = [
    ("add", ad.add, lambda: [rnd((3, 4)), rnd((4,))], 0),
    ("add_bcast", ad.add, lambda: [rnd((3, 4)), rnd((4,))], 1),
    ("sub", ad.sub, lambda: [rnd((3, 4)), rnd((3, 1))], 1),
    ("neg", ad.neg, lambda: [rnd((5,), True)], 0),
    ("mul_real", ad.mul, lambda: [rnd((3, 4)), rnd((3, 4))], 0),
    ("mul_complex", ad.mul, lambda: [rnd((3, 4), True), rnd((3, 4), True)], 1),
    ("mul_mixed", ad.mul, lambda: [rnd((2, 3, 4), True), rnd((3, 4))], 1),
    ("div_num", ad.div, lambda: [rnd((3, 4), True), rnd((3, 4), True)], 0),
    ("conj", ad.conj, lambda: [rnd((3, 3), True)], 0),
    ("real", ad.real, lambda: [rnd((3, 3), True)], 0),
    ("sum_all", ad.sum_, lambda: [rnd((3, 4))], 0),
    ("sum_axis", lambda a: ad.sum_(a, axis=1), lambda: [rnd((3, 4, 2), True)], 0),
    ("sum_keep", lambda a: ad.sum_(a, axis=0, keepdims=True), lambda: [rnd((3, 4))], 0),
    ("mean", lambda a: ad.mean(a, axis=0), lambda: [rnd((3, 4))], 0),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), lambda: [rnd((3, 4))], 0),
    ("moveaxis", lambda a: ad.moveaxis(a, 0, -1), lambda: [rnd((2, 3, 4))], 0),
    ("getitem", lambda a: ad.getitem(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))), lambda: [rnd((3, 4))], 0),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), lambda: [rnd((3, 4)), rnd((3, 4))], 1),
    ("concatenate", lambda a, b: ad.concatenate([a, b], axis=0), lambda: [rnd((2, 4)), rnd((3, 4))], 0),
    ("fft2", ad.fft2, lambda: [rnd((2, 5, 6))], 0),
    ("fft2_complex", ad.fft2, lambda: [rnd((5, 6), True)], 0),
    ("ifft2", ad.ifft2, lambda: [rnd((2, 5, 6), True)], 0),
    ("pad_kernel", lambda k: ad.pad_kernel(k, (7, 8)), lambda: [rnd((3, 3, 5))], 0),
    ("bank_conv_x", ad.bank_conv, lambda: [rnd((2, 8, 9)), rnd((3, 5, 5))], 0),
    ("bank_conv_f", ad.bank_conv, lambda: [rnd((2, 8, 9)), rnd((3, 5, 5))], 1),
    ("bank_conv_f_fft", ad.bank_conv, lambda: [rnd((1, 9, 9)), rnd((2, 7, 7))], 1),
    ("dense_x", ad.dense, lambda: [rnd((2, 5, 4)), rnd((3, 4)), rnd((3,))], 0),
    ("dense_w", ad.dense, lambda: [rnd((2, 5, 4)), rnd((3, 4)), rnd((3,))], 1),
    ("dense_b", ad.dense, lambda: [rnd((2, 5, 4)), rnd((3, 4)), rnd((3,))], 2),
    ("conv2d_x", ad.conv2d_same, lambda: [rnd((2, 6, 5, 3)), rnd((3, 3, 3, 4))], 0),
    ("conv2d_w", ad.conv2d_same, lambda: [rnd((2, 6, 5, 3)), rnd((3, 3, 3, 4))], 1),
]


@pytest.mark.parametrize("name,fn,make,wrt", LINEAR, ids=[c[0] for c in LINEAR])
def test_linear_primitive_adjoint(name, fn, make, wrt):
    check(fn, make(), wrt, linear_jvp)


ANALYTIC = [
    ("div_den", ad.div, lambda: [rnd((3, 4)), rnd((3, 4), low=0.5)], 1),
    ("square", ad.square, lambda: [rnd((3, 4))], 0),
    ("exp", ad.exp, lambda: [rnd((3, 4))], 0),
    ("log", ad.log, lambda: [rnd((3, 4), low=0.2)], 0),
    ("sqrt", ad.sqrt, lambda: [rnd((3, 4), low=0.2)], 0),
    ("log_softmax", ad.log_softmax, lambda: [rnd((4, 6))], 0),
    ("maxpool2", ad.maxpool2, lambda: [rnd((2, 5, 6, 3))], 0),
    ("gat_sqrt", anscombe._sqrt0, lambda: [rnd((3, 4), low=0.2)], 0),
]


@pytest.mark.parametrize("name,fn,make,wrt", ANALYTIC, ids=[c[0] for c in ANALYTIC])
def test_analytic_primitive_adjoint(name, fn, make, wrt):
    check(fn, make(), wrt, cstep_jvp)


def _explicit(formula):
    return lambda fn, args, wrt, v: formula(args, v)


EXPLICIT = [
    ("div_den_complex", ad.div, lambda: [rnd((3, 4), True), rnd((3, 4), True) + 3.0], 1,
     lambda a, v: -a[0] * v / a[1] ** 2),
    ("square_complex", ad.square, lambda: [rnd((3, 4), True)], 0, lambda a, v: 2 * a[0] * v),
    ("exp_complex", ad.exp, lambda: [rnd((3, 4), True)], 0, lambda a, v: np.exp(a[0]) * v),
    ("log_complex", ad.log, lambda: [rnd((3, 4), True) + 3.0], 0, lambda a, v: v / a[0]),
    ("abs2_complex", ad.abs2, lambda: [rnd((3, 4), True)], 0, lambda a, v: 2 * np.real(np.conj(a[0]) * v)),
    ("abs2_real", ad.abs2, lambda: [rnd((3, 4))], 0, lambda a, v: 2 * a[0] * v),
    ("relu", ad.relu, lambda: [rnd((4, 5))], 0, lambda a, v: (a[0] > 0) * v),
    ("clamp_min0", ad.clamp_min0, lambda: [rnd((4, 5))], 0, lambda a, v: (a[0] > 0) * v),
]


@pytest.mark.parametrize("name,fn,make,wrt,formula", EXPLICIT, ids=[c[0] for c in EXPLICIT])
def test_piecewise_and_complex_primitive_adjoint(name, fn, make, wrt, formula):
    check(fn, make(), wrt, _explicit(formula))


def test_half_square_norm_gradient_is_x():
    x0 = rnd((4, 3))
    tape = ad.Tape()
    x = tape.variable(x0, "x")
    loss = ad.mul(ad.sum_(ad.square(x)), 0.5)
    assert np.array_equal(tape.backward(loss)["x"], x0)


def test_reused_variable_accumulates():
    tape = ad.Tape()
    x = tape.variable(np.array([1.5, -2.0]), "x")
    g = tape.backward(ad.sum_(x * x))["x"]
    assert np.array_equal(g, np.array([3.0, -4.0]))


def test_second_backward_is_error():
    tape = ad.Tape()
    x = tape.variable(np.ones(3), "x")
    loss = ad.sum_(x)
    tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.variable(1.0)


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.variable(np.ones(3), "x")
    with pytest.raises(InvalidArgumentError):
        tape.backward(x * 2.0)


def test_complex_loss_rejected():
    tape = ad.Tape()
    x = tape.variable(np.ones(3) + 0j, "x")
    with pytest.raises(InvalidArgumentError):
        tape.backward(ad.sum_(x))


def test_foreign_loss_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    loss = ad.sum_(t1.variable(np.ones(2)))
    with pytest.raises(InvalidArgumentError):
        t2.backward(loss)


def test_mixing_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(InvalidArgumentError):
        ad.add(t1.variable(1.0), t2.variable(1.0))


def test_unreached_leaf_gets_zero():
    tape = ad.Tape()
    x = tape.variable(np.ones(2), "x")
    tape.variable(np.ones((2, 2)), "unused")
    grads = tape.backward(ad.sum_(x))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_names_node():
    tape = ad.Tape()
    x = tape.variable(np.array([0.0, 1.0]), "x")
    with pytest.raises(NumericalError) as info:
        tape.backward(ad.sum_(ad.sqrt(x)))
    assert info.value.node == "sqrt"


def test_plain_arrays_bypass_tape():
    out = ad.mul(np.ones(3), 2.0)
    assert isinstance(out, np.ndarray)


def test_gat_gradient_matches_central_difference():
    noise = NoiseParams(0.02, 0.01)
    y0 = R.uniform(0.05, 0.9, (5, 5))
    tape = ad.Tape()
    y = tape.variable(y0, "y")
    g = tape.backward(ad.sum_(anscombe.gat_forward(y, noise)))["y"]
    h = 1e-5
    fd = (anscombe.gat_forward(y0 + h, noise) - anscombe.gat_forward(y0 - h, noise)) / (2 * h)
    assert np.max(np.abs(g - fd) / np.abs(fd)) < 1e-6


def test_relu_propagates_nan():
    out = ad.value(ad.relu(np.array([np.nan, -1.0, 2.0])))
    assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == 2.0
    assert np.isnan(ad.value(ad.clamp_min0(np.array([np.nan])))[0])
