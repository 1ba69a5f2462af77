"""Fixed-grid Fourier magnitude features.

Each axis of a vibration signal is mean-removed and its discrete-time
Fourier transform is evaluated *exactly* at every grid frequency, so the
feature does not depend on the signal's length or sampling rate beyond the
Nyquist requirement. Uniform grids use a chirp-z transform (same values as a
per-frequency Goertzel sum, in O(T log T)); anything else falls back to
direct summation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import CZT

from .shift_estimation import VibrationSignal

GRID_START_HZ = 100.0
GRID_STEP_HZ = 0.5
GRID_SIZE = 4800


@dataclass(frozen=True)
class FrequencyGrid:
    frequencies: np.ndarray = field(
        default_factory=lambda: GRID_START_HZ + GRID_STEP_HZ * np.arange(GRID_SIZE)
    )

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        if f.ndim != 1 or f.size == 0:
            raise ValueError("grid must be a non-empty 1-D array")
        if np.any(np.diff(f) <= 0):
            raise ValueError("grid frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)

    def __len__(self) -> int:
        return self.frequencies.size

    def __eq__(self, other) -> bool:
        return isinstance(other, FrequencyGrid) and self.hash == other.hash

    def __hash__(self) -> int:
        return hash(self.hash)

    @property
    def max_hz(self) -> float:
        return float(self.frequencies[-1])

    @property
    def uniform_step(self) -> float | None:
        d = np.diff(self.frequencies)
        if d.size == 0:
            return None
        step = float(d.mean())
        return step if np.allclose(d, step, rtol=0, atol=1e-9 * max(step, 1.0)) else None

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.frequencies.astype("<f8").tobytes()).hexdigest()[:16]


DEFAULT_GRID = FrequencyGrid()


@dataclass
class SpectralFeature:
    """Magnitudes ``(2, n_freq)``: row 0 is the x axis, row 1 the y axis."""

    magnitudes: np.ndarray
    point_index: int = 0
    grid: FrequencyGrid = DEFAULT_GRID
    preprocessed: bool = False
    standardized: bool = False

    def __post_init__(self):
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if m.shape != (2, len(self.grid)):
            raise ValueError(f"magnitudes must be (2, {len(self.grid)}), got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("magnitudes must be finite")
        if not self.preprocessed and np.any(m < 0):
            raise ValueError("raw magnitudes must be non-negative")
        self.magnitudes = m


@lru_cache(maxsize=32)
def _czt_plan(n: int, m: int, f0: float, df: float, fs: float) -> CZT:
    w = np.exp(-2j * np.pi * df / fs)
    a = np.exp(2j * np.pi * f0 / fs)
    return CZT(n, m=m, w=w, a=a)


def dtft_magnitude(x: np.ndarray, rate_hz: float, grid: FrequencyGrid = DEFAULT_GRID) -> np.ndarray:
    """``|sum_n x[n] exp(-2 pi i f n / rate)| / T`` for each grid ``f``, along the last axis.

    The input is mean-removed along the last axis first.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    if rate_hz <= 2 * grid.max_hz:
        raise ValueError(
            f"sampling rate {rate_hz} Hz must exceed twice the grid maximum {grid.max_hz} Hz"
        )
    x = x - x.mean(axis=-1, keepdims=True)
    step = grid.uniform_step
    f = grid.frequencies
    if step is not None:
        spec = _czt_plan(n, len(f), float(f[0]), step, float(rate_hz))(x, axis=-1)
    else:
        spec = np.empty(x.shape[:-1] + (len(f),), dtype=np.complex128)
        t = np.arange(n) / rate_hz
        for s in range(0, len(f), 256):
            basis = np.exp(-2j * np.pi * np.outer(t, f[s : s + 256]))
            spec[..., s : s + 256] = x @ basis
    return np.abs(spec) / n


def featurize(v: VibrationSignal, grid: FrequencyGrid = DEFAULT_GRID) -> SpectralFeature:
    mags = dtft_magnitude(v.samples, v.rate_hz, grid)
    return SpectralFeature(magnitudes=mags, point_index=v.point_index, grid=grid)


def preprocess_magnitudes(mags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale, compress and standardize a stack of ``(..., 2, F)`` magnitude blocks.

    Each block is divided by its median (falling back to its mean), passed
    through ``log1p`` and standardized to zero mean and unit variance over
    all its entries. Returns the result and a boolean array marking blocks
    whose standardization was skipped because they had zero variance.
    """
    mags = np.asarray(mags, dtype=np.float64)
    lead = mags.shape[:-2]
    flat = mags.reshape(-1, mags.shape[-2] * mags.shape[-1])
    ref = np.median(flat, axis=1)
    mean = flat.mean(axis=1)
    ref = np.where(ref > 0, ref, mean)
    ref = np.where(ref > 0, ref, 1.0)
    comp = np.log1p(flat / ref[:, None])
    mu = comp.mean(axis=1, keepdims=True)
    sd = comp.std(axis=1, keepdims=True)
    flat_sd = sd[:, 0] <= 1e-12
    out = np.where(flat_sd[:, None], comp, (comp - mu) / np.where(flat_sd, 1.0, sd[:, 0])[:, None])
    return out.reshape(mags.shape), flat_sd.reshape(lead)


def preprocess_feature(s: SpectralFeature) -> SpectralFeature:
    """``standardized`` is False when the feature had zero variance (left as is)."""
    if s.preprocessed:
        raise ValueError("feature is already preprocessed")
    out, skipped = preprocess_magnitudes(s.magnitudes)
    return SpectralFeature(
        magnitudes=out,
        point_index=s.point_index,
        grid=s.grid,
        preprocessed=True,
        standardized=not bool(skipped),
    )
