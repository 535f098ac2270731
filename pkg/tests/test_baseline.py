import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import convolve

from dfddps.baseline import (BaselineConfig, depth_sweep_reconstruct, deconvolve_at_depth,
                             derivative_filters, psf2otf, regularizer_spectrum)
from dfddps.errors import NumericalError, ParameterError
from dfddps.forward import Observation, render
from dfddps.optics import PsfBank, build_psf_bank, rescale_kernels
from dfddps.scenes import SceneSpec, generate_scene, two_plane_scene


def delta3(k=3):
    d = np.zeros((3, k, k))
    d[:, k // 2, k // 2] = 1.0
    return d


def periodic_blur(x, kernels):
    return np.stack([convolve(x[..., c], kernels[c], mode="wrap") for c in range(x.shape[2])], axis=2)


def interior(labels, margin):
    """Pixels at least ``margin`` away from the image border and from any label change."""
    h, w = labels.shape
    mask = np.zeros((h, w), bool)
    mask[margin:h - margin, margin:w - margin] = True
    for axis in (0, 1):
        edges = np.flatnonzero(np.diff(labels, axis=axis).any(axis=1 - axis)) + 0.5
        idx = np.arange(labels.shape[axis])
        for e in edges:
            near = np.abs(idx - e) <= margin
            mask[(near, slice(None)) if axis == 0 else (slice(None), near)] = False
    return mask


# -- config --------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lambda1=-1.0), dict(lambda2=-1e-3), dict(window=4), dict(window=1),
                                dict(n_depths=1), dict(selection="vote"), dict(cost_floor=0.0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        BaselineConfig(**kw)


def test_config_from_dict_rejects_unknown():
    assert BaselineConfig.from_dict({"window": 9}).window == 9
    with pytest.raises(ParameterError):
        BaselineConfig.from_dict({"windw": 9})


# -- deconvolution ---------------------------------------------------------

def test_psf2otf_matches_periodic_convolution():
    rng = np.random.default_rng(0)
    x = rng.random((12, 10))
    k = rng.random((5, 3))
    via_fft = np.real(np.fft.ifft2(psf2otf(k, x.shape) * np.fft.fft2(x)))
    npt.assert_allclose(via_fft, convolve(x, k, mode="wrap"), atol=1e-12)


def test_psf2otf_rejects_oversized_kernel():
    with pytest.raises(ParameterError):
        psf2otf(np.ones((9, 9)), (8, 8))


def test_delta_kernel_vanishing_regularization_is_identity():
    y = np.random.default_rng(1).random((16, 16, 3))
    out = deconvolve_at_depth(y, delta3(), BaselineConfig(lambda1=1e-12, lambda2=1e-12))
    npt.assert_allclose(out, y, atol=1e-9)


def test_round_trip_textured_scene(psf, camera):
    x = generate_scene(SceneSpec(seed=7)).rgb
    kernels = rescale_kernels(psf.kernels, 1.6)
    y = periodic_blur(x, kernels)
    out = deconvolve_at_depth(y, kernels, BaselineConfig(lambda1=1e-5, lambda2=1e-5))
    assert np.linalg.norm(out - x) / np.linalg.norm(x) < 0.05


def _circulant(kernel, shape):
    """Dense matrix of periodic convolution with a small kernel."""
    n = shape[0] * shape[1]
    M = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        M[:, j] = convolve(e.reshape(shape), kernel, mode="wrap").ravel()
    return M


def test_frequency_solution_matches_normal_equations():
    rng = np.random.default_rng(2)
    shape = (8, 8)
    kernels = rng.random((3, 3, 3))
    kernels /= kernels.sum(axis=(1, 2), keepdims=True)
    y = rng.random(shape + (3,))
    cfg = BaselineConfig(lambda1=0.03, lambda2=0.01)
    out = deconvolve_at_depth(y, kernels, cfg)
    weights = {"lambda1": cfg.lambda1, "lambda2": cfg.lambda2}
    R = sum(weights[name] * _circulant(f, shape).T @ _circulant(f, shape) for name, f in derivative_filters())
    for c in range(3):
        K = _circulant(kernels[c], shape)
        x = np.linalg.solve(K.T @ K + R, K.T @ y[..., c].ravel())
        npt.assert_allclose(out[..., c].ravel(), x, atol=1e-8)


def test_ill_conditioned_without_regularization():
    # two-tap average: its spectrum vanishes at the Nyquist frequency of an even grid
    k = np.zeros((3, 3, 3))
    k[:, 1, 1:] = 0.5
    with pytest.raises(NumericalError):
        deconvolve_at_depth(np.ones((8, 8, 3)), k, BaselineConfig(lambda1=0.0, lambda2=0.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_deconvolution_linear_in_y(seed, a, b):
    rng = np.random.default_rng(seed)
    kernels = rng.random((3, 5, 5))
    kernels /= kernels.sum(axis=(1, 2), keepdims=True)
    y1, y2 = rng.random((2, 12, 12, 3))
    cfg = BaselineConfig()
    lhs = deconvolve_at_depth(a * y1 + b * y2, kernels, cfg)
    rhs = a * deconvolve_at_depth(y1, kernels, cfg) + b * deconvolve_at_depth(y2, kernels, cfg)
    npt.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), l1=st.floats(0, 0.1), l2=st.floats(0, 0.1),
       d1=st.floats(0, 0.1), d2=st.floats(0, 0.1))
def test_more_regularization_never_adds_energy_per_bin(seed, l1, l2, d1, d2):
    rng = np.random.default_rng(seed)
    kernels = rng.random((3, 5, 5)) + 0.1
    kernels /= kernels.sum(axis=(1, 2), keepdims=True)
    y = rng.random((16, 16, 3))
    lo = deconvolve_at_depth(y, kernels, BaselineConfig(lambda1=l1 + 1e-6, lambda2=l2 + 1e-6))
    hi = deconvolve_at_depth(y, kernels, BaselineConfig(lambda1=l1 + d1 + 1e-6, lambda2=l2 + d2 + 1e-6))
    spec_lo = np.abs(np.fft.fft2(lo, axes=(0, 1)))
    spec_hi = np.abs(np.fft.fft2(hi, axes=(0, 1)))
    assert np.all(spec_hi <= spec_lo * (1 + 1e-9) + 1e-9)


def test_regularizer_spectrum_zero_at_dc():
    reg = regularizer_spectrum((8, 8), 0.1, 0.2)
    assert reg[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(reg >= 0)


# -- depth sweep -------------------------------------------------------------

@pytest.fixture(scope="module")
def bank_and_cfg(psf, camera):
    cfg = BaselineConfig()
    return build_psf_bank(psf, camera, cfg.n_depths), cfg


def test_empty_bank_raises(psf, camera):
    y = Observation(np.zeros((8, 8, 3)), 0.0, camera, psf)
    with pytest.raises(ParameterError):
        depth_sweep_reconstruct(y, PsfBank(np.zeros(0), (), np.zeros(0)), BaselineConfig())


@pytest.mark.parametrize("index", range(5))
def test_constant_depth_recovered(psf, camera, bank_and_cfg, index):
    bank, cfg = bank_and_cfg
    d = bank.depths[index]
    state, labels = two_plane_scene(128, 128, (d, d), seed=20 + index)
    res = depth_sweep_reconstruct(Observation(render(state, camera, psf), 0.0, camera, psf), bank, cfg)
    inner = interior(np.zeros_like(labels), cfg.window)
    assert np.all(res.state.depth[inner] == d)
    assert res.state.depth.shape == (128, 128)
    assert res.costs.shape == (5, 128, 128)


def test_two_plane_labels(psf, camera, bank_and_cfg):
    bank, cfg = bank_and_cfg
    d = (bank.depths[0], bank.depths[3])
    state, labels = two_plane_scene(192, 192, d, seed=3)
    res = depth_sweep_reconstruct(Observation(render(state, camera, psf), 0.0, camera, psf), bank, cfg)
    truth = np.where(labels == 0, 0, 3)
    inner = interior(labels, cfg.window)
    assert np.mean(res.labels[inner] == truth[inner]) >= 0.90


def test_textureless_region_flagged(psf, camera, bank_and_cfg):
    bank, cfg = bank_and_cfg
    state, labels = two_plane_scene(192, 192, (bank.depths[1], bank.depths[4]), texture="flat", seed=4)
    res = depth_sweep_reconstruct(Observation(render(state, camera, psf), 0.0, camera, psf), bank, cfg)
    inner = interior(labels, cfg.window)
    assert np.mean(res.low_confidence[inner]) >= 0.95


def test_composite_uses_winning_deconvolution(psf, camera, bank_and_cfg):
    bank, cfg = bank_and_cfg
    d = bank.depths[2]
    state, _ = two_plane_scene(64, 64, (d, d), seed=9)
    y = Observation(render(state, camera, psf), 0.0, camera, psf)
    res = depth_sweep_reconstruct(y, bank, cfg)
    win = deconvolve_at_depth(y, bank.kernels_by_scale[2], cfg)
    sel = res.labels == 2
    npt.assert_allclose(res.state.rgb[sel], np.clip(win[sel], 0, 1), atol=1e-12)
