import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibrosense.speckle_sim import (
    CameraConfig,
    ShiftTrajectory,
    generate_speckle,
    render_sequence,
    roi_rate_model,
    shift_image,
    shift_pattern,
    sinusoidal_trajectory,
)


def test_generate_is_deterministic():
    a = generate_speckle(7, (64, 64), 4)
    b = generate_speckle(7, (64, 64), 4)
    assert np.array_equal(a.intensity, b.intensity)


def test_different_seeds_decorrelate():
    a = generate_speckle(7, (64, 64), 4).intensity
    b = generate_speckle(8, (64, 64), 4).intensity
    za, zb = a - a.mean(), b - b.mean()
    ncc = (za * zb).sum() / np.sqrt((za**2).sum() * (zb**2).sum())
    assert abs(ncc) < 0.2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), grain=st.floats(2.0, 8.0), size=st.sampled_from([16, 32, 48, 64]))
def test_speckle_statistics(seed, grain, size):
    p = generate_speckle(seed, (size, size), grain)
    assert p.intensity.min() >= 0
    assert abs(p.intensity.mean() - 1.0) < 1e-9
    spec = np.abs(np.fft.fft2(p.intensity - p.intensity.mean())) ** 2
    f = np.hypot(np.fft.fftfreq(size)[:, None], np.fft.fftfreq(size)[None, :])
    high = spec[f > 1.0 / (2.0 * grain) + 1e-12].sum()
    assert high <= 0.01 * spec.sum() + 1e-20


def test_fully_developed_contrast():
    # intensity of a circular Gaussian field is exponential: std/mean close to 1
    p = generate_speckle(3, (256, 256), 3)
    assert 0.8 < p.intensity.std() < 1.2


@pytest.mark.parametrize("grain, size", [(1.5, (32, 32)), (4, (8, 32))])
def test_generate_rejects(grain, size):
    with pytest.raises(ValueError):
        generate_speckle(0, size, grain)


def test_shift_identity_and_roll():
    p = generate_speckle(1, (32, 32), 3)
    assert np.allclose(shift_pattern(p, (0, 0)).intensity, p.intensity, atol=1e-12)
    rolled = np.roll(p.intensity, shift=(-2, 3), axis=(0, 1))
    assert np.max(np.abs(shift_image(p.intensity, (3, -2)) - rolled)) <= 1e-9


def test_half_shift_composes():
    img = generate_speckle(5, (64, 64), 4).intensity
    twice = shift_image(shift_image(img, (0.5, 0)), (0.5, 0))
    assert np.max(np.abs(twice - shift_image(img, (1, 0)))) < 1e-6


@settings(max_examples=30, deadline=None)
@given(dx=st.floats(-5, 5), dy=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_shift_preserves_energy(dx, dy, seed):
    img = generate_speckle(seed, (32, 32), 3).intensity
    out = shift_image(img, (dx, dy))
    assert abs((out**2).sum() / (img**2).sum() - 1) < 1e-9


def test_render_shapes_and_noise_free_static():
    cam = CameraConfig(1080, 1440, 6, 16, 2247.0)
    bases = [generate_speckle(i, (16, 16), 3) for i in range(6)]
    trajs = [ShiftTrajectory(np.zeros((99, 2))) for _ in range(6)]
    seq = render_sequence(bases, trajs, cam, noise_sigma=0.0)
    assert seq.frames.shape == (100, 6, 16, 16)
    assert seq.ground_truth.shape == (6, 99, 2)
    assert np.allclose(seq.frames, seq.frames[:1], atol=1e-12)


def test_render_follows_cumulative_trajectory():
    cam = CameraConfig(1080, 1440, 1, 32, 2247.0)
    base = generate_speckle(2, (32, 32), 3)
    steps = np.array([[0.3, -0.2], [0.5, 0.1], [-0.4, 0.25]])
    seq = render_sequence([base], [ShiftTrajectory(steps)], cam, noise_sigma=0.0)
    expect = shift_image(base.intensity, steps.sum(axis=0))
    assert np.allclose(seq.frames[-1, 0], expect, atol=1e-10)
    assert np.array_equal(seq.ground_truth[0], steps)


def test_render_rejects_mismatched_lengths():
    cam = CameraConfig(1080, 1440, 2, 16, 2247.0)
    bases = [generate_speckle(i, (16, 16), 3) for i in range(2)]
    with pytest.raises(ValueError):
        render_sequence(bases, [ShiftTrajectory(np.zeros((5, 2))), ShiftTrajectory(np.zeros((6, 2)))], cam)


def test_render_noise_level():
    cam = CameraConfig(1080, 1440, 1, 32, 2247.0)
    base = generate_speckle(4, (32, 32), 3)
    seq = render_sequence([base], [ShiftTrajectory(np.zeros((200, 2)))], cam, noise_sigma=0.05, seed=1)
    resid = seq.frames[:, 0] - base.intensity
    assert abs(resid.std() - 0.05) < 0.003


def test_trajectory_step_bound():
    with pytest.raises(ValueError):
        ShiftTrajectory(np.array([[2.5, 0.0]]))


def test_roi_rate_model():
    assert roi_rate_model(CameraConfig(1080, 1440, 6, 6, 2247.0)) == pytest.approx(67410.0)
    assert roi_rate_model(CameraConfig(1080, 1440, 6, 6, 2247.0)) >= 57699.0
    assert roi_rate_model(CameraConfig(1080, 1440, 1, 1080, 2247.0)) == pytest.approx(2247.0)
    r12 = roi_rate_model(CameraConfig(1080, 1440, 6, 12, 2247.0))
    assert roi_rate_model(CameraConfig(1080, 1440, 6, 6, 2247.0)) == pytest.approx(2 * r12)


def test_camera_rejects_oversized_roi():
    with pytest.raises(ValueError):
        CameraConfig(100, 100, 6, 20, 1000.0)


def test_sinusoidal_trajectory():
    t = sinusoidal_trajectory(100, 0.4, 200.0, 5100.0)
    assert len(t) == 100
    assert np.allclose(t.shifts[:, 1], 0.5 * t.shifts[:, 0])
    assert np.abs(t.shifts[:, 0]).max() <= 0.4 + 1e-12
