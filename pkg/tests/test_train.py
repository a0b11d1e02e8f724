import math

import numpy as np
import pytest

from unrollcam import autodiff as ad
from unrollcam import experiments, hqs, imaging, tensor_ops, train
from unrollcam.errors import InvalidArgumentError, NumericalError
from unrollcam.imaging import NoiseParams


def test_mse_examples():
    x = np.full((4, 4, 1), 0.3)
    assert train.mse(x, x) == 0.0
    assert train.mse(np.zeros((2, 2, 1)), np.full((2, 2, 1), 0.5)) == pytest.approx(0.25)
    with pytest.raises(InvalidArgumentError):
        train.mse(np.zeros((2, 2, 1)), np.zeros((3, 2, 1)))


def test_psnr_examples():
    x = np.full((4, 4, 1), 0.3)
    assert train.psnr(x, x) == math.inf
    assert train.psnr(np.zeros((2, 2, 1)), np.full((2, 2, 1), 0.1)) == pytest.approx(20.0)
    assert train.mean_psnr([10.0, 20.0, math.inf]) == pytest.approx(15.0)


def test_cross_entropy_uniform_logits():
    assert train.softmax_cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)
    assert train.softmax_cross_entropy(np.zeros((2, 10)), np.array([0, 9])) == pytest.approx(math.log(10))
    with pytest.raises(InvalidArgumentError):
        train.softmax_cross_entropy(np.zeros((2, 10)), np.array([0, 10]))
    with pytest.raises(InvalidArgumentError):
        train.softmax_cross_entropy(np.zeros((2, 10)), np.array([0]))


def test_cross_entropy_is_stable_for_large_logits():
    v = train.softmax_cross_entropy(np.array([1e4, 0.0, -1e4]), 1)
    assert v == pytest.approx(1e4)


def test_rmsprop_sign_update_limit():
    opt = train.RMSProp(lr=0.1, decay=0.0, eps=1e-300, lr_decay_per_epoch=1.0)
    p = {"w": np.array([1.0, 2.0, 3.0])}
    opt.step(p, {"w": np.array([-5.0, 0.25, 3e-4])})
    assert np.allclose(p["w"], [1.1, 1.9, 2.9])
    assert np.all(opt.acc["w"] >= 0)


def test_rmsprop_accumulator_start():
    g = {"w": np.array([1e-3, -2e-3])}
    warm = {"w": np.zeros(2)}
    train.RMSProp(lr=0.01, eps=1e-8).step(warm, g)
    assert np.allclose(warm["w"], -0.01 * g["w"] / np.sqrt(0.9 + 0.1 * g["w"] ** 2 + 1e-8))
    cold = {"w": np.zeros(2)}
    train.RMSProp(lr=0.01, eps=1e-8, acc_init=0.0).step(cold, {"w": np.array([0.1, -0.2])})
    # from a zero accumulator the first step is ~3 lr per coordinate whatever |g| is
    assert np.allclose(np.abs(cold["w"]), 0.01 / np.sqrt(0.1), rtol=1e-3)


def test_rmsprop_lr_schedule_and_zero_lr():
    opt = train.RMSProp(lr=0.0)
    p = {"w": np.array([1.0])}
    opt.step(p, {"w": np.array([3.0])})
    assert p["w"][0] == 1.0
    opt = train.RMSProp()
    opt.end_epoch()
    opt.end_epoch()
    assert opt.current_lr == pytest.approx(4.5e-3 * 0.94 ** 2)


def _denoise_setup(size=16, seed=0, stages=1):
    noise = NoiseParams(0.02, 0.02)
    pipe = hqs.HqsPipeline.default("denoise", noise, stages=stages, seed=seed)
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0.2, 0.8, (size, size, 1))
    y = imaging.simulate_capture(clean, imaging.identity_psf(), noise, imaging.Rng(seed))
    return pipe, clean, y


def test_single_image_training_reduces_error():
    pipe, clean, y = _denoise_setup()
    before = train.mse(np.asarray(hqs.run_pipeline(pipe, y)), clean)
    cfg = train.TrainConfig(epochs=200, batch_size=1, lr=1e-3, eps=1e-8, lr_decay_per_epoch=1.0)
    hist = experiments.pretrain(pipe, [y], [clean], cfg)
    after = train.mse(np.asarray(hqs.run_pipeline(pipe, y)), clean)
    assert len(hist) == 200
    assert after < before
    assert hist[-1].loss < hist[0].loss


def test_training_is_bit_reproducible():
    runs = []
    for _ in range(2):
        pipe, clean, y = _denoise_setup(size=8)
        cfg = train.TrainConfig(epochs=3, batch_size=2, seed=5, eps=1e-8)
        hist = experiments.pretrain(pipe, [y, y[::-1]], [clean, clean[::-1]], cfg)
        runs.append(([r.loss for r in hist], pipe.parameters()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert np.array_equal(v, runs[1][1][k])


def test_empty_dataset_and_empty_trainable_rejected():
    pipe, clean, y = _denoise_setup(size=8)
    model = experiments.JointModel(pipeline=pipe)
    with pytest.raises(InvalidArgumentError):
        train.train(model, [], model.mse_loss, train.TrainConfig())
    with pytest.raises(InvalidArgumentError):
        train.train(model, [(y, clean, None)], model.mse_loss, train.TrainConfig(), trainable=lambda n: False)


def test_nonfinite_loss_aborts():
    pipe, clean, y = _denoise_setup(size=8)
    model = experiments.JointModel(pipeline=pipe)

    def bad(params, batch):
        return ad.mul(model.mse_loss(params, batch), math.nan)

    with pytest.raises(NumericalError) as info:
        train.train(model, [(y, clean, None)], bad, train.TrainConfig(epochs=1))
    assert info.value.node == "loss"


def test_frozen_parameters_do_not_move():
    pipe, clean, y = _denoise_setup(size=8)
    before = {k: v.copy() for k, v in pipe.parameters().items()}
    model = experiments.JointModel(pipeline=pipe)
    train.train(model, [(y, clean, None)], model.mse_loss, train.TrainConfig(epochs=2, eps=1e-8),
                trainable=lambda n: n.endswith("log_lambda"))
    after = pipe.parameters()
    for k in before:
        moved = not np.array_equal(before[k], after[k])
        assert moved == k.endswith("log_lambda"), k


def test_history_csv(tmp_path):
    hist = [train.StepRecord(0, 0, 0.1, math.nan, 1e-3), train.StepRecord(1, 0, 1 / 3, 20.5, 1e-3)]
    train.write_history(tmp_path / "h.csv", hist)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,loss,psnr,lr"
    assert float(lines[2].split(",")[1]) == 1 / 3


def test_joint_gradients_reach_both_groups():
    from unrollcam import toy
    pipe, clean, y = _denoise_setup(size=8)
    model = experiments.JointModel(pipe, toy.ToyClassifier.random(4, 8, 1, seed=1))
    tape = ad.Tape()
    leaves = {k: tape.variable(v, k) for k, v in model.parameters().items()}
    grads = tape.backward(model.xent_loss(leaves, [(y, clean, 2)]))
    assert np.any(grads["lowlevel.stage0.filters"] != 0)
    assert np.any(grads["lowlevel.stage0.log_lambda"] != 0)
    assert np.any(grads["classifier.dense.weight"] != 0)


def _mse_check(pipe, clean, y, **kw):
    model = experiments.JointModel(pipeline=pipe)
    return train.grad_check(model.parameters(), lambda p: model.mse_loss(p, [(y, clean, None)]), **kw)


def test_grad_check_passes_on_denoise():
    report = _mse_check(*_denoise_setup())
    assert report.passed, report.lines()


def test_grad_check_passes_on_two_stage_deblur():
    noise = NoiseParams(0.0, 0.02)
    psf = imaging.gaussian_psf(1.0, size=5)
    pipe = hqs.HqsPipeline.default("deblur", noise, psf, stages=2, seed=3)
    rng = np.random.default_rng(3)
    clean = rng.uniform(0.2, 0.8, (12, 12, 3))
    y = imaging.simulate_capture(clean, psf, noise, imaging.Rng(3))
    report = _mse_check(pipe, clean, y, samples=5)
    assert report.passed, report.lines()


def test_grad_check_zero_input_zero_prox():
    pipe, clean, _ = _denoise_setup(size=8)
    for k, v in pipe.parameters().items():
        if ".prox." in k:
            v[...] = 0.0
    report = _mse_check(pipe, clean, np.zeros_like(clean))
    assert report.passed, report.lines()


def test_grad_check_detects_corrupted_filter_adjoint(monkeypatch):
    setup = _denoise_setup()
    real = tensor_ops.bank_filter_grad
    monkeypatch.setattr(tensor_ops, "bank_filter_grad", lambda *a, **k: 1.5 * real(*a, **k))
    report = _mse_check(*setup)
    assert not report.passed
    assert report.failures == ["lowlevel.stage0.filters"]


def _fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_lambda_gradient_against_hand_difference():
    pipe, clean, y = _denoise_setup()
    model = experiments.JointModel(pipeline=pipe)
    params = model.parameters()
    tape = ad.Tape()
    leaves = {k: tape.variable(v, k) for k, v in params.items()}
    g = tape.backward(model.mse_loss(leaves, [(y, clean, None)]))["lowlevel.stage0.log_lambda"]

    def at(v):
        p = dict(params)
        p["lowlevel.stage0.log_lambda"] = np.array(v)
        return float(model.mse_loss(p, [(y, clean, None)]))

    n = _fd(at, float(params["lowlevel.stage0.log_lambda"]))
    assert abs(float(g) - n) / max(abs(n), 1e-12) < 1e-6
