"""Glue between the modal simulator and the speckle camera simulator."""

from __future__ import annotations

import numpy as np

from .speckle_sim import CameraConfig, FrameSequence, ShiftTrajectory, generate_speckle, render_sequence

# a 1080-row sensor read out as one ROI band per measurement point
SENSOR_HEIGHT_PX = 1080
SENSOR_WIDTH_PX = 1440
SENSOR_FULL_RATE_HZ = 2247.0


def render_signals(
    signals: np.ndarray,
    rate_hz: float,
    patch_px: int = 32,
    grain_size_px: float = 3.0,
    noise_sigma: float = 0.02,
    seed: int = 0,
) -> FrameSequence:
    """Speckle frames whose inter-frame shifts follow ``signals`` ``(n_points, 2, T)`` (px, x then y)."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 3 or signals.shape[1] != 2:
        raise ValueError(f"signals must be (n_points, 2, T), got {signals.shape}")
    n_pts = signals.shape[0]
    cam = CameraConfig(SENSOR_HEIGHT_PX, SENSOR_WIDTH_PX, n_pts, patch_px, SENSOR_FULL_RATE_HZ)
    ss = np.random.SeedSequence([seed, 8087])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_pts + 1)]
    bases = [generate_speckle(seeds[i], (patch_px, patch_px), grain_size_px) for i in range(n_pts)]
    trajs = [ShiftTrajectory(signals[i].T) for i in range(n_pts)]
    seq = render_sequence(bases, trajs, cam, noise_sigma=noise_sigma, seed=seeds[-1], rate_hz=rate_hz)
    seq.meta.update({"grain_size_px": grain_size_px, "seed": seed})
    return seq
