import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibrosense.shift_estimation import (
    DEGENERATE,
    OK,
    REJECTED,
    DegeneratePatchError,
    ShiftRejectedError,
    VibrationSignal,
    lk_refine,
    pclk,
    pclk_batch,
    pclk_many,
    pclk_serial,
    phase_correlate,
)
from vibrosense.speckle_sim import (
    CameraConfig,
    ShiftTrajectory,
    generate_speckle,
    render_sequence,
    shift_image,
    sinusoidal_trajectory,
)


def noisy_pair(seed, delta, sigma=0.02, size=32, grain=3.0):
    rng = np.random.default_rng(seed)
    base = generate_speckle(seed, (size, size), grain).intensity
    a = base + sigma * rng.standard_normal(base.shape)
    b = shift_image(base, delta) + sigma * rng.standard_normal(base.shape)
    return a, b


def test_phase_correlate_circular_roll():
    a = generate_speckle(0, (32, 32), 3).intensity
    b = np.roll(a, shift=(-2, 3), axis=(0, 1))
    assert tuple(phase_correlate(a, b)) == (3, -2)
    assert tuple(phase_correlate(a, a)) == (0, 0)


@settings(max_examples=40, deadline=None)
@given(dx=st.integers(-15, 16), dy=st.integers(-15, 16), seed=st.integers(0, 10_000))
def test_phase_correlate_exact_for_integer_rolls(dx, dy, seed):
    a = generate_speckle(seed, (32, 32), 3).intensity
    b = np.roll(a, shift=(dy, dx), axis=(0, 1))
    assert tuple(phase_correlate(a, b, window=False)) == (dx, dy)


def test_phase_correlate_strong_noise():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = generate_speckle(seed, (32, 32), 3).intensity
        b = a + a.std() * rng.standard_normal(a.shape)
        hits += int(np.all(np.abs(phase_correlate(a, b)) <= 1))
    assert hits >= 95


def test_phase_correlate_flat_patch():
    with pytest.raises(DegeneratePatchError):
        phase_correlate(np.ones((16, 16)), np.ones((16, 16)))


def test_lk_small_shift():
    a = generate_speckle(11, (32, 32), 3).intensity
    b = shift_image(a, (0.3, 0.0))
    est = lk_refine(a, b)
    assert est.converged
    assert np.max(np.abs(est.delta - [0.3, 0.0])) < 0.02


def test_lk_zero_shift():
    a = generate_speckle(12, (32, 32), 3).intensity
    est = lk_refine(a, a)
    assert np.max(np.abs(est.delta)) <= 1e-6
    assert est.converged and est.iterations <= 2


def test_lk_flat_patch_is_singular():
    est = lk_refine(np.ones((16, 16)), np.ones((16, 16)))
    assert not est.converged
    assert est.status == "singular"


def test_pclk_mixed_shift():
    a, b = noisy_pair(3, (2.7, -1.4))
    est = pclk(a, b)
    assert est.converged
    assert np.hypot(*(est.delta - [2.7, -1.4])) < 0.05


def test_pclk_rejects_large_shift():
    big = generate_speckle(4, (64, 64), 3).intensity
    a, b = big[16:48, 16:48], big[16:48, 4:36]  # true 12 px translation, limit is 8
    with pytest.raises(ShiftRejectedError):
        pclk(a, b)


def test_pclk_many_status_codes():
    a = generate_speckle(5, (32, 32), 3).intensity
    big = generate_speckle(4, (64, 64), 3).intensity
    stack_a = np.stack([a, np.ones_like(a), big[16:48, 16:48]])
    stack_b = np.stack([shift_image(a, (0.4, 0.2)), np.ones_like(a), big[16:48, 4:36]])
    out = pclk_many(stack_a, stack_b)
    assert list(out["status"]) == [OK, DEGENERATE, REJECTED]


@settings(max_examples=30, deadline=None)
@given(
    dx=st.floats(-2, 2, allow_nan=False),
    dy=st.floats(-2, 2, allow_nan=False),
    seed=st.integers(0, 100_000),
)
def test_pclk_subpixel_property(dx, dy, seed):
    a, b = noisy_pair(seed, (dx, dy), sigma=0.0)
    est = pclk(a, b)
    assert np.hypot(est.delta[0] - dx, est.delta[1] - dy) < 0.05


def _sequence(n_points=2, n_frames=40, noise=0.02, seed=0):
    cam = CameraConfig(1080, 1440, n_points, 32, 2247.0)
    bases = [generate_speckle(seed + i, (32, 32), 3) for i in range(n_points)]
    trajs = [sinusoidal_trajectory(n_frames - 1, 0.4 + 0.1 * i, 200.0, 5100.0) for i in range(n_points)]
    return render_sequence(bases, trajs, cam, noise_sigma=noise, seed=seed, rate_hz=5100.0)


def test_sequence_recovery_rmse():
    seq = _sequence(n_frames=200)
    res = pclk_batch(seq)
    est = np.stack([s.samples.T for s in res.signals])
    rmse = np.sqrt(np.mean(np.sum((est - seq.ground_truth) ** 2, axis=-1)))
    assert rmse < 0.05


def test_batch_matches_serial():
    seq = _sequence(n_points=6, n_frames=200, seed=3)
    batch = pclk_batch(seq, chunk=64, workers=4)
    serial = pclk_serial(seq)
    for sb, ss in zip(batch.signals, serial.signals):
        assert np.max(np.abs(sb.samples - ss.samples)) <= 1e-9
    assert np.array_equal(batch.status, serial.status)


def test_batch_reports_failures_and_holds_last():
    seq = _sequence(n_points=2, n_frames=20)
    seq.frames[5, 1] = 1.0  # one flat frame spoils two pairs at point 1
    res = pclk_batch(seq)
    assert res.failures == {1: 2}
    sig = res.signals[1]
    assert not sig.valid[4] and not sig.valid[5]
    assert np.array_equal(sig.samples[:, 4], sig.samples[:, 3])
    assert res.signals[0].valid.all()


def test_sinusoid_frequency_recovered():
    cam = CameraConfig(1080, 1440, 1, 32, 2247.0)
    rate, n = 5100.0, 1000
    f0 = 51 * rate / (n - 1)
    traj = sinusoidal_trajectory(n - 1, 0.4, f0, rate)
    seq = render_sequence([generate_speckle(9, (32, 32), 3)], [traj], cam, noise_sigma=0.02, rate_hz=rate)
    x = pclk_batch(seq).signals[0].samples[0]
    spec = np.abs(np.fft.rfft(x - x.mean()))
    assert int(np.argmax(spec)) == 51


def test_desk_capture_time():
    seq = _sequence(n_points=6, n_frames=10201, seed=5)
    t = time.perf_counter()
    res = pclk_batch(seq)
    assert time.perf_counter() - t < 60
    assert all(s.n_samples == 10200 for s in res.signals)


def test_vibration_signal_validation():
    with pytest.raises(ValueError):
        VibrationSignal(np.zeros((2, 1)), 5100.0)
    with pytest.raises(ValueError):
        VibrationSignal(np.full((2, 4), np.nan), 5100.0)
    with pytest.raises(ValueError):
        VibrationSignal(np.zeros((2, 4)), 0.0)
