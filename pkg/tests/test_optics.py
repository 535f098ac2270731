import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.ndimage import map_coordinates

from dfddps.errors import CalibrationError, DegeneratePsfError, ParameterError
from dfddps.optics import (CameraParams, CodedPsf, build_psf_bank, calibrate_reference_psf,
                           circle_of_confusion, depth_to_scale, depth_to_scale_grad, normalize_psf,
                           paper_camera, rescale_psf, rescale_psf_dscale, rescaled_size,
                           synthetic_coded_psf)


def random_psf(seed, k=7):
    rng = np.random.default_rng(seed)
    raw = np.zeros((3, k, k))
    raw[:, 1:-1, 1:-1] = rng.random((3, k - 2, k - 2)) + 0.05
    return normalize_psf(raw)


def bilinear_oracle(kernel, scale):
    """Resample one channel with scipy's order-1 interpolation about the center."""
    k = kernel.shape[0]
    size = rescaled_size(k, scale)
    u = np.arange(size) - size // 2
    coords = (k - 1) / 2 + u / scale
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    out = map_coordinates(kernel, [rr, cc], order=1, mode="constant", cval=0.0)
    return out / out.sum()


def test_normalize_examples():
    p = normalize_psf(np.ones((3, 5, 5)))
    assert_allclose(p.kernels, 1 / 25)
    raw = np.zeros((3, 5, 5))
    raw[:, 1, 3] = 4.0
    assert p.kernels.shape == (3, 5, 5)
    assert np.array_equal(normalize_psf(raw).kernels, raw / 4.0)
    rnd = normalize_psf(np.random.default_rng(0).random((3, 9, 9)))
    assert_allclose(rnd.channel_sums(), 1.0, atol=1e-6)
    assert_allclose(normalize_psf(rnd.kernels).kernels, rnd.kernels, atol=1e-15)


def test_normalize_rejects_degenerate():
    raw = np.ones((3, 5, 5))
    raw[1] = 0.0
    with pytest.raises(DegeneratePsfError, match="G"):
        normalize_psf(raw)
    with pytest.raises(ParameterError):
        normalize_psf(-np.ones((3, 3, 3)))


def test_coded_psf_invariants():
    with pytest.raises(ParameterError):
        CodedPsf(np.ones((3, 4, 4)) / 16)
    with pytest.raises(ParameterError):
        CodedPsf(np.ones((2, 3, 3)) / 9)
    with pytest.raises(ParameterError):
        CodedPsf(-np.ones((3, 3, 3)))


def test_camera_validation():
    with pytest.raises(ParameterError):
        CameraParams(focal_length=-1)
    with pytest.raises(ParameterError):
        CameraParams(focus_distance=0.01)
    with pytest.raises(ParameterError):
        CameraParams(depth_range=(4.0, 2.0))
    with pytest.raises(ParameterError):
        CameraParams(reference_depth=1.5)
    cam = CameraParams(pixel_pitch=2e-5)
    assert CameraParams.from_dict(cam.to_dict()) == cam


def test_paper_camera_constants():
    cam = paper_camera()
    assert (cam.focal_length, cam.f_number, cam.pixel_pitch, cam.focus_distance) == (0.035, 1.8, 13e-6, 1.5)
    assert cam.depth_range == (2.0, 4.0)
    assert cam.aperture_width == 4.58e-3


def test_thin_lens_hand_value():
    # A = 35 mm / 1.8; c(3 m) = A * f * 1.5 / (3 * 1.465)
    assert circle_of_confusion(3.0, paper_camera()) == pytest.approx(0.035 / 1.8 * 0.035 * 1.5 / (3.0 * 1.465), rel=1e-12)


def test_depth_to_scale_examples():
    cam = paper_camera()
    assert depth_to_scale(cam.reference_depth, cam) == pytest.approx(1.0, rel=1e-14)
    assert depth_to_scale(cam.focus_distance, cam) == cam.scale_floor
    with pytest.raises(ParameterError):
        depth_to_scale(0.01, cam)


def test_depth_to_scale_monotone_each_side():
    cam = CameraParams(depth_range=(0.5, 6.0))
    near = np.linspace(0.5, 1.4, 400)
    far = np.linspace(1.6, 6.0, 400)
    assert np.all(np.diff(depth_to_scale(near, cam)) < 0)
    assert np.all(np.diff(depth_to_scale(far, cam)) > 0)
    d = np.linspace(2.0, 4.0, 2001)
    assert np.max(np.abs(np.diff(depth_to_scale(d, paper_camera())))) < 2e-3


def test_depth_to_scale_grad_matches_fd():
    cam = paper_camera()
    d = np.linspace(2.0, 4.0, 17)
    h = 1e-6
    fd = (depth_to_scale(d + h, cam) - depth_to_scale(d - h, cam)) / (2 * h)
    assert_allclose(depth_to_scale_grad(d, cam), fd, rtol=1e-7)
    assert depth_to_scale_grad(1.5, cam) == 0.0


def test_rescale_identity(psf):
    out = rescale_psf(psf, 1.0)
    assert out.kernels.shape == psf.kernels.shape
    assert_allclose(out.kernels, psf.kernels, atol=1e-12)


def test_rescale_delta_stays_point_mass():
    raw = np.zeros((3, 5, 5))
    raw[:, 2, 2] = 1.0
    delta = normalize_psf(raw)
    for s in (0.3, 1.0, 1.7, 3.0):
        out = rescale_psf(delta, s).kernels
        assert_allclose(out.sum(axis=(1, 2)), 1.0, atol=1e-12)
        c = out.shape[1] // 2
        assert out[0, c, c] == out.max()


def test_rescale_matches_bilinear_oracle():
    base = np.zeros((8, 8))
    base[1:7, 1:7] = np.kron(np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]]), np.ones((2, 2)))
    raw = np.stack([np.pad(base, ((0, 1), (0, 1)))] * 3)
    p = normalize_psf(raw)
    for scale in (2.0, 1.37, 0.6):
        assert_allclose(rescale_psf(p, scale).kernels[0], bilinear_oracle(p.kernels[0], scale), atol=1e-12)


def test_rescale_support_size():
    assert rescaled_size(7, 1.0) == 7
    assert rescaled_size(7, 2.0) == 15
    assert rescaled_size(7, 1.1) == 9
    assert rescaled_size(7, 0.05) == 1


def test_rescale_rejects_nonpositive(psf):
    for s in (0.0, -1.0):
        with pytest.raises(ParameterError):
            rescale_psf(psf, s)
        with pytest.raises(ParameterError):
            rescale_psf_dscale(psf, s)


@settings(max_examples=80, deadline=None)
@given(scale=st.floats(0.1, 4.0), seed=st.integers(0, 1000))
def test_rescale_preserves_unit_sum(scale, seed):
    out = rescale_psf(random_psf(seed), scale)
    assert_allclose(out.channel_sums(), 1.0, atol=1e-6)
    assert np.all(out.kernels >= 0)


def test_same_scale_for_all_channels(psf):
    out = rescale_psf(psf, 2.3).kernels
    for c in range(3):
        single = CodedPsf(np.repeat(psf.kernels[c:c + 1], 3, axis=0))
        assert_allclose(rescale_psf(single, 2.3).kernels[0], out[c], atol=1e-15)


def test_dscale_ignores_kernel_amplitude():
    # normalization removes any constant factor, so it cannot reach the derivative
    p = random_psf(3)
    louder = CodedPsf(5.0 * p.kernels)
    for s in (0.8, 1.3, 2.2):
        g = rescale_psf_dscale(p, s)
        assert_allclose(rescale_psf_dscale(louder, s), g, atol=1e-13)
        assert_allclose(g.sum(axis=(1, 2)), 0.0, atol=1e-12)


def test_dscale_below_floor_is_zero(psf):
    g = rescale_psf_dscale(psf, 0.01)
    assert np.all(g == 0)


def _is_knot(k, scale, tol=2e-3):
    size = rescaled_size(k, scale)
    if rescaled_size(k, scale * (1 + tol)) != size or rescaled_size(k, scale * (1 - tol)) != size:
        return True
    u = np.arange(size) - size // 2
    frac = np.abs(u / scale - np.round(u / scale))
    return np.any((frac < 2e-3) & (u != 0))


@pytest.mark.parametrize("seed", range(20))
def test_dscale_matches_fd(seed):
    p = random_psf(seed)
    rng = np.random.default_rng(seed)
    h = 1e-4
    checked = 0
    for scale in rng.uniform(0.3, 3.5, 40):
        if _is_knot(p.size, scale) or checked == 10:
            continue
        fd = (rescale_psf(p, scale + h).kernels - rescale_psf(p, scale - h).kernels) / (2 * h)
        g = rescale_psf_dscale(p, scale)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)
        checked += 1
    assert checked == 10


def test_calibration_round_trip(psf):
    frame = np.full((40, 50, 3), 0.02)
    bg = frame.copy()
    k = psf.size
    frame[20 - k // 2:20 + k // 2 + 1, 25 - k // 2:25 + k // 2 + 1, :] += 3.0 * psf.kernels.transpose(1, 2, 0)
    est = calibrate_reference_psf(frame, bg, k, pixel_pitch=psf.pixel_pitch)
    assert_allclose(est.kernels, psf.kernels, atol=1e-6)


def test_calibration_failures(psf):
    flat = np.full((20, 20, 3), 0.5)
    with pytest.raises(CalibrationError):
        calibrate_reference_psf(flat, flat, 7)
    corner = flat.copy()
    corner[0, 0, :] += 1.0
    with pytest.raises(CalibrationError):
        calibrate_reference_psf(corner, flat, 7)
    with pytest.raises(ParameterError):
        calibrate_reference_psf(flat, flat, 6)


def test_bank_endpoints_and_sums(psf, camera):
    bank = build_psf_bank(psf, camera, 2)
    assert len(bank) == 2
    assert_allclose(sorted(bank.depths), camera.depth_range)
    for i in range(2):
        s = depth_to_scale(bank.depth_of(i), camera)
        assert bank.scales[i] == pytest.approx(s)
        assert_allclose(bank.kernels_by_scale[i].kernels, rescale_psf(psf, s).kernels)
    big = build_psf_bank(psf, camera, 9)
    assert np.all(np.diff(big.scales) > 0)
    for entry in big.kernels_by_scale:
        assert_allclose(entry.channel_sums(), 1.0, atol=1e-6)
    with pytest.raises(ParameterError):
        build_psf_bank(psf, camera, 1)


def test_desk_psf_geometry(psf, camera):
    assert psf.size == 7
    assert np.all(psf.kernels[:, 0, :] == 0) and np.all(psf.kernels[:, :, -1] == 0)
    assert_allclose(psf.channel_sums(), 1.0, atol=1e-12)
    scales = depth_to_scale(np.array(camera.depth_range), camera)
    assert_allclose(scales, [1.0, 2.5], rtol=1e-12)
    assert [rescaled_size(psf.size, s) for s in scales] == [7, 19]
    assert np.array_equal(synthetic_coded_psf().kernels, psf.kernels)
