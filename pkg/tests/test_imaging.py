import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unrollcam import fileio, imaging
from unrollcam.errors import InvalidArgumentError
from unrollcam.imaging import NoiseParams, Rng


@pytest.mark.parametrize("a,s", [(-0.1, 0.0), (0.0, -1e-3), (float("nan"), 0.0), (0.1, float("inf"))])
def test_noise_params_validation(a, s):
    with pytest.raises(InvalidArgumentError):
        NoiseParams(a, s)


def test_noise_params_json_roundtrip_is_exact(tmp_path):
    p = NoiseParams(0.1 + 0.2, 1 / 3)
    imaging.save_noise_params(tmp_path / "n.json", p)
    assert imaging.load_noise_params(tmp_path / "n.json") == p


def test_noise_table_roundtrip(tmp_path):
    table = {3.0: NoiseParams(0.04, 0.03), 100.0: NoiseParams(0.005, 0.005)}
    imaging.save_noise_table(tmp_path / "t.json", table)
    assert imaging.load_noise_table(tmp_path / "t.json") == table


@pytest.mark.parametrize("kernel", [np.ones((2, 3)) / 6, -np.eye(3) / -3 - 2 * np.eye(3), np.ones((3, 3))])
def test_psf_validation(kernel):
    with pytest.raises(InvalidArgumentError):
        imaging.Psf(kernel)


def test_gaussian_psf_properties():
    p = imaging.gaussian_psf(2.0, 1.2, angle=0.5)
    assert p.kernel.shape[0] % 2 == 1
    assert abs(p.kernel.sum() - 1) < 1e-12
    assert np.unravel_index(np.argmax(p.kernel), p.kernel.shape) == (p.kernel.shape[0] // 2,) * 2
    with pytest.raises(ValueError):
        p.kernel[0, 0] = 1.0


def test_dark_frame_without_noise_is_zero():
    y = imaging.simulate_capture(np.zeros((8, 8)), None, NoiseParams(0, 0), Rng(0))
    assert np.array_equal(y, np.zeros((8, 8, 1)))


def test_alpha_zero_sigma_zero_returns_blurred_scene(rng):
    x = rng.uniform(size=(10, 10, 2))
    psf = imaging.gaussian_psf(0.8)
    y = imaging.simulate_capture(x, psf, NoiseParams(0, 0), Rng(0))
    assert np.allclose(y, imaging.blur(x, psf))


def test_saturated_scene_clips_at_one():
    y = imaging.simulate_capture(np.ones((32, 32)), None, NoiseParams(0.05, 0.1), Rng(3))
    assert y.max() <= 1.0 and y.min() >= 0.0


def test_out_of_range_scene_rejected():
    with pytest.raises(InvalidArgumentError):
        imaging.simulate_capture(np.full((4, 4), 1.5), None, NoiseParams(0.01, 0.01), Rng(0))


def test_per_pixel_variance_matches_model():
    # 25 captures of 64x64 ~ 1e5 samples
    alpha, sigma = 0.01, 0.02
    rng = Rng(11)
    x = np.full((64, 64), 0.5)
    ys = np.stack([imaging.simulate_capture(x, None, NoiseParams(alpha, sigma), rng, i) for i in range(25)])
    target = alpha * 0.5 + sigma**2
    assert 0.95 * target <= ys.var() <= 1.05 * target
    assert abs(ys.mean() - 0.5) < 3 * np.sqrt(target / ys.size)


def test_same_seed_same_capture_different_index_differs(rng):
    x = rng.uniform(size=(16, 16, 3))
    n = NoiseParams(0.02, 0.01)
    a = imaging.simulate_capture(x, None, n, Rng(5), 0)
    b = imaging.simulate_capture(x, None, n, Rng(5), 0)
    c = imaging.simulate_capture(x, None, n, Rng(5), 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_streams_are_order_independent():
    r = Rng(9)
    first = r.stream(3).uniform((5,))
    r.stream(0).uniform((100,))
    assert np.array_equal(r.stream(3).uniform((5,)), first)


def test_stream_draw_counter():
    s = Rng(1).stream(0)
    s.uniform((3, 4))
    s.normal((2,))
    s.poisson(np.array([1.0, 50.0]))
    assert s.draws == 12 + 4 + 2 + 4


@pytest.mark.parametrize("lam", [0.3, 4.0, 25.0, 80.0, 400.0])
def test_poisson_moments(lam):
    k = Rng(2).stream(0).poisson(np.full(200_000, lam))
    assert np.all(k == np.floor(k)) and k.min() >= 0
    assert abs(k.mean() - lam) < 5 * np.sqrt(lam / k.size) + 1e-3
    assert abs(k.var() / lam - 1) < 0.03


def test_normal_moments():
    z = Rng(4).stream(1).normal((400_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


@given(st.floats(0, 0.1), st.floats(0, 0.1), st.integers(0, 1000))
def test_capture_always_in_unit_range(alpha, sigma, seed):
    x = np.random.default_rng(seed).uniform(size=(8, 8, 1))
    y = imaging.simulate_capture(x, imaging.gaussian_psf(0.7), NoiseParams(alpha, sigma), Rng(seed))
    assert y.min() >= 0 and y.max() <= 1


def _patches(alpha, sigma, n, size, seed):
    rng = Rng(seed)
    means = np.linspace(0.1, 0.8, n)
    return [(m, imaging.simulate_capture(np.full((size, size), m), None, NoiseParams(alpha, sigma), rng, i))
            for i, m in enumerate(means)]


def test_calibration_round_trip_declared_seed():
    curve = imaging.fit_noise_curve(_patches(0.02, 0.01, 50, 32, seed=0))
    assert 0.019 <= curve.fitted.alpha <= 0.021
    assert 0.008 <= curve.fitted.sigma <= 0.012
    assert not curve.negative_slope


def test_calibration_alpha_is_unbiased_across_seeds():
    alphas = [imaging.fit_noise_curve(_patches(0.02, 0.01, 50, 32, seed=s)).fitted.alpha for s in range(20)]
    assert abs(np.mean(alphas) / 0.02 - 1) < 0.02


def test_calibration_noiseless_patches():
    patches = [(m, np.full((8, 8), m)) for m in (0.2, 0.4, 0.6)]
    curve = imaging.fit_noise_curve(patches)
    assert curve.fitted == NoiseParams(0.0, 0.0)


def test_calibration_needs_three_patches():
    with pytest.raises(InvalidArgumentError):
        imaging.fit_noise_curve([(0.2, np.zeros((4, 4))), (0.4, np.zeros((4, 4)))])


def test_calibration_negative_slope_flagged(rng):
    patches = []
    for m, sd in ((0.2, 0.1), (0.4, 0.05), (0.6, 0.01)):
        patches.append((m, m + sd * rng.standard_normal((32, 32))))
    curve = imaging.fit_noise_curve(patches, weighted=False)
    assert curve.negative_slope and curve.fitted.alpha == 0.0
    assert curve.report()["negative_slope"] is True


def test_load_psf_normalises_with_warning(tmp_path):
    fileio.write_pfm(tmp_path / "k.pfm", np.full((3, 3), 0.2))
    with pytest.warns(UserWarning):
        p = imaging.load_psf(tmp_path / "k.pfm")
    assert abs(p.kernel.sum() - 1) < 1e-12 and p.label == "k"


def test_load_psf_silent_when_normalised(tmp_path):
    imaging.save_psf(tmp_path / "g.pfm", imaging.gaussian_psf(1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        imaging.load_psf(tmp_path / "g.pfm")


@pytest.mark.parametrize("kernel", [np.ones((2, 2)), -np.ones((3, 3)), np.ones((3, 3, 3))])
def test_load_psf_rejects(tmp_path, kernel):
    fileio.write_pfm(tmp_path / "bad.pfm", kernel)
    with pytest.raises(InvalidArgumentError):
        imaging.load_psf(tmp_path / "bad.pfm")


def test_load_psf_malformed_and_missing(tmp_path):
    (tmp_path / "junk.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(InvalidArgumentError):
        imaging.load_psf(tmp_path / "junk.pfm")
    with pytest.raises(InvalidArgumentError):
        imaging.load_psf(tmp_path / "absent.pfm")
