"""Synthetic speckle patches with known subpixel motion.

Patterns are fully developed speckle: a circular complex Gaussian field,
low-passed by a disk aperture in the frequency domain, squared. All shifting
is done with Fourier phase ramps on a periodic domain, which makes the
ground truth exact and lets the registration code be tested against it.

Vectors are ordered ``(x, y)``; arrays are indexed ``[row=y, col=x]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_STEP_PX = 2.0


@dataclass(frozen=True)
class SpecklePattern:
    intensity: np.ndarray
    grain_size_px: float
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


@dataclass(frozen=True)
class CameraConfig:
    full_height_px: int
    full_width_px: int
    roi_count: int
    roi_height_px: int
    full_rate_hz: float

    def __post_init__(self):
        if self.roi_count <= 0 or self.roi_height_px <= 0:
            raise ValueError("roi_count and roi_height_px must be positive")
        if self.roi_count * self.roi_height_px > self.full_height_px:
            raise ValueError(
                f"{self.roi_count} ROIs of height {self.roi_height_px} "
                f"exceed sensor height {self.full_height_px}"
            )
        if self.full_rate_hz <= 0:
            raise ValueError("full_rate_hz must be positive")


@dataclass(frozen=True)
class ShiftTrajectory:
    """Per-step shifts, shape ``(T, 2)`` in px, columns ``(x, y)``."""

    shifts: np.ndarray
    max_step_px: float = DEFAULT_MAX_STEP_PX

    def __post_init__(self):
        s = np.asarray(self.shifts, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 2:
            raise ValueError(f"shifts must have shape (T, 2), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("shifts must be finite")
        if s.size and np.abs(s).max() > self.max_step_px:
            raise ValueError(
                f"per-step shift {np.abs(s).max():.3f} px exceeds bound {self.max_step_px}"
            )
        object.__setattr__(self, "shifts", s)

    def __len__(self) -> int:
        return self.shifts.shape[0]


@dataclass
class FrameSequence:
    """``frames`` has shape ``(T, n_points, h, w)``; ``ground_truth`` is
    ``(n_points, T-1, 2)`` inter-frame shifts."""

    frames: np.ndarray
    ground_truth: np.ndarray
    noise_sigma: float
    rate_hz: float = 5100.0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_points(self) -> int:
        return self.frames.shape[1]


def _aperture_radius(grain_size_px: float) -> float:
    # Field passband radius (cycles/px). The intensity spectrum is the
    # autocorrelation of the field spectrum, so its support ends at twice
    # this, i.e. exactly 1/(2*grain).
    return 1.0 / (4.0 * grain_size_px)


def generate_speckle(seed: int, size: tuple[int, int], grain_size_px: float) -> SpecklePattern:
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"speckle size must be at least 16x16, got {size}")
    if grain_size_px < 2:
        raise ValueError("grain_size_px < 2 aliases under subpixel shifting")
    rng = np.random.default_rng(seed)
    field_ = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    aperture = np.hypot(fx, fy) <= _aperture_radius(grain_size_px)
    field_ = np.fft.ifft2(np.fft.fft2(field_) * aperture)
    intensity = np.abs(field_) ** 2
    intensity /= intensity.mean()
    return SpecklePattern(intensity=intensity, grain_size_px=float(grain_size_px), seed=seed)


def _phase_ramp(shape: tuple[int, int], delta) -> np.ndarray:
    h, w = shape
    dx, dy = float(delta[0]), float(delta[1])
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.exp(-2j * np.pi * (fx * dx + fy * dy))


def shift_image(img: np.ndarray, delta) -> np.ndarray:
    """Periodic translation of a real image by ``delta=(dx, dy)`` px."""
    out = np.fft.ifft2(np.fft.fft2(img) * _phase_ramp(img.shape, delta))
    return out.real


def shift_pattern(p: SpecklePattern, delta) -> SpecklePattern:
    return SpecklePattern(
        intensity=shift_image(p.intensity, delta), grain_size_px=p.grain_size_px, seed=p.seed
    )


def render_sequence(
    bases: list[SpecklePattern],
    trajectories: list[ShiftTrajectory],
    config: CameraConfig,
    noise_sigma: float = 0.02,
    seed: int = 0,
    rate_hz: float | None = None,
) -> FrameSequence:
    """Render ``T = len(trajectory) + 1`` frames per grid point.

    Frame ``t`` of point ``i`` is ``bases[i]`` translated by the cumulative
    sum of its first ``t`` steps, plus Gaussian noise of std
    ``noise_sigma * mean(base)``.
    """
    if len(bases) != len(trajectories):
        raise ValueError("need one trajectory per grid point")
    if not bases:
        raise ValueError("empty grid")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"trajectory lengths differ across points: {sorted(lengths)}")
    shapes = {b.shape for b in bases}
    if len(shapes) != 1:
        raise ValueError("all patches must share one geometry")
    (shape,) = shapes
    if shape[0] != config.roi_height_px:
        raise ValueError(f"patch height {shape[0]} != ROI height {config.roi_height_px}")

    n_steps = lengths.pop()
    h, w = shape
    frames = np.empty((n_steps + 1, len(bases), h, w), dtype=np.float64)
    fy = np.fft.fftfreq(h)[None, :, None]
    fx = np.fft.fftfreq(w)[None, None, :]
    for i, (base, traj) in enumerate(zip(bases, trajectories)):
        pos = np.vstack([np.zeros((1, 2)), np.cumsum(traj.shifts, axis=0)])
        ramps = np.exp(-2j * np.pi * (fx * pos[:, 0, None, None] + fy * pos[:, 1, None, None]))
        spec = np.fft.fft2(base.intensity)
        frames[:, i] = np.fft.ifft2(spec[None] * ramps).real
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        scale = noise_sigma * np.array([b.intensity.mean() for b in bases])
        frames += rng.standard_normal(frames.shape) * scale[None, :, None, None]
    gt = np.stack([t.shifts for t in trajectories])
    return FrameSequence(
        frames=frames,
        ground_truth=gt,
        noise_sigma=float(noise_sigma),
        rate_hz=float(rate_hz if rate_hz is not None else roi_rate_model(config)),
    )


def roi_rate_model(config: CameraConfig) -> float:
    """Nominal frame rate when reading only ``m`` ROIs of ``h`` rows.

    This is an optimistic bound: readout overheads make real cameras slower
    (a 1080-row, 2247 Hz sensor at 6x6 rows gives 67410 Hz here against
    57699 Hz measured).
    """
    rows = config.roi_count * config.roi_height_px
    return config.full_rate_hz * config.full_height_px / rows


def sinusoidal_trajectory(
    n_steps: int,
    amplitude_px: float,
    freq_hz: float,
    rate_hz: float,
    phase: float = 0.0,
    y_ratio: float = 0.5,
) -> ShiftTrajectory:
    """Per-step shift ``amplitude * sin(2 pi f t)`` on x, scaled by ``y_ratio`` on y."""
    t = np.arange(n_steps) / rate_hz
    s = amplitude_px * np.sin(2 * np.pi * freq_hz * t + phase)
    return ShiftTrajectory(np.stack([s, y_ratio * s], axis=1))
