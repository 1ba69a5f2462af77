"""Synthetic container vibrations from banks of damped modes.

A container class is a set of modes, each a second-order resonator with an
empty-container frequency, an added-mass coefficient, a damping ratio and a
per-point, per-axis shape. Liquid lowers every mode as
``f(l) = f_empty / sqrt(1 + beta * l)``. Instances of a class are jittered
copies. Excitations are filtered by a per-speaker smooth magnitude response
before driving the modes.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import chirp, lfilter

from .shift_estimation import VibrationSignal

BAND_HZ = (100.0, 2500.0)
L_STANDARD = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
L_INTERM = (0.25, 0.5, 0.75)
EXCITATION_KINDS = ("chirp", "song_surrogate", "ambient_surrogate")
N_POINTS = 3
# modal coordinates are unit-DC-gain; this maps them to speckle shift in px
PX_PER_UNIT = 0.02
MANIFEST_FIELDS = ("sample_id", "class", "instance", "level", "excitation", "speaker", "seed", "path")


@dataclass(frozen=True)
class ModeSpec:
    f_empty_hz: float
    beta: float
    zeta: float
    shape: np.ndarray
    gain: float = 1.0

    def __post_init__(self):
        shape = np.asarray(self.shape, dtype=np.float64)
        if shape.ndim != 2 or shape.shape[1] != 2:
            raise ValueError(f"mode shape must be (n_points, 2), got {shape.shape}")
        if abs(np.linalg.norm(shape) - 1.0) > 1e-9:
            raise ValueError("mode shape must have unit Frobenius norm")
        if not BAND_HZ[0] <= self.f_empty_hz <= BAND_HZ[1]:
            raise ValueError(f"f_empty {self.f_empty_hz} Hz outside {BAND_HZ}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.002 <= self.zeta <= 0.05:
            raise ValueError(f"zeta {self.zeta} outside [0.002, 0.05]")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        object.__setattr__(self, "shape", shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = self.shape.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModeSpec":
        return cls(**{**d, "shape": np.asarray(d["shape"])})


def unit_shape(shape) -> np.ndarray:
    shape = np.asarray(shape, dtype=np.float64)
    return shape / np.linalg.norm(shape)


@dataclass(frozen=True)
class ContainerModel:
    class_id: int
    modes: tuple[ModeSpec, ...]
    instance_id: int = 0
    jitter_seed: int | None = None
    hard: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if len(self.modes) < 3:
            raise ValueError("a container needs at least 3 modes")
        f = np.sort([m.f_empty_hz for m in self.modes])
        if np.any(np.diff(f) < 5.0):
            raise ValueError("mode frequencies must be at least 5 Hz apart when empty")
        if len({m.shape.shape for m in self.modes}) != 1:
            raise ValueError("all mode shapes must cover the same points")

    @property
    def n_points(self) -> int:
        return self.modes[0].shape.shape[0]

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "instance_id": self.instance_id,
            "jitter_seed": self.jitter_seed,
            "hard": self.hard,
            "modes": [m.to_dict() for m in self.modes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContainerModel":
        return cls(
            class_id=d["class_id"],
            modes=tuple(ModeSpec.from_dict(m) for m in d["modes"]),
            instance_id=d["instance_id"],
            jitter_seed=d["jitter_seed"],
            hard=d.get("hard", False),
        )


@dataclass(frozen=True)
class Excitation:
    kind: str
    duration_s: float = 2.0
    f_samp_hz: float = 5100.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EXCITATION_KINDS:
            raise ValueError(f"unknown excitation kind {self.kind!r}")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.f_samp_hz))


@dataclass
class SynthSample:
    signals: list[VibrationSignal]
    class_id: int
    level: float
    excitation: str
    speaker_id: int | None = None
    instance_id: int = 0
    seed: int = 0

    def __post_init__(self):
        if len({s.n_samples for s in self.signals}) != 1 or len({s.rate_hz for s in self.signals}) != 1:
            raise ValueError("all point signals must share T and rate")


def resonant_freq(mode: ModeSpec, level: float) -> float:
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level {level} outside [0, 1]")
    return mode.f_empty_hz / np.sqrt(1.0 + mode.beta * level)


def _band_noise_spectrum(rng, n, fs, shaping):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    return np.fft.irfft(spec * shaping(f), n)


def _unit_power(x: np.ndarray) -> np.ndarray:
    # match a unit-amplitude sinusoid's power (RMS 1/sqrt(2))
    x = x - x.mean()
    rms = np.sqrt(np.mean(x**2))
    return x / (rms * np.sqrt(2.0)) if rms > 0 else x


def make_excitation(e: Excitation) -> np.ndarray:
    """Force time series for ``e``; all kinds are zero-mean.

    ``chirp`` is a unit-amplitude logarithmic sweep across the band;
    ``song_surrogate`` is noise under a random piecewise-linear (in log
    frequency) envelope with slow amplitude modulation; ``ambient_surrogate``
    is pink noise band-limited to the sensing band. The noise kinds are scaled
    to the chirp's power.
    """
    if e.f_samp_hz < 5100:
        raise ValueError("excitations need f_samp >= 5100 Hz")
    n = e.n_samples
    fs = e.f_samp_hz
    t = np.arange(n) / fs
    lo, hi = BAND_HZ
    if e.kind == "chirp":
        x = chirp(t, f0=lo, t1=e.duration_s, f1=hi, method="logarithmic")
        return x - x.mean()

    rng = np.random.default_rng(e.seed)
    if e.kind == "ambient_surrogate":

        def pink(f):
            return np.where((f >= lo) & (f <= hi), 1.0 / np.sqrt(np.maximum(f, 1.0)), 0.0)

        return _unit_power(_band_noise_spectrum(rng, n, fs, pink))

    # song surrogate
    knots = np.linspace(np.log(lo), np.log(hi), 10)
    levels_db = rng.uniform(-12.0, 12.0, knots.size)

    def envelope(f):
        lf = np.log(np.clip(f, lo, hi))
        g = np.interp(lf, knots, levels_db)
        inside = (f >= 0.8 * lo) & (f <= 1.05 * hi)
        return np.where(inside, 10 ** (g / 20.0), 0.0)

    x = _band_noise_spectrum(rng, n, fs, envelope)
    beat_hz = rng.uniform(1.5, 3.0)
    frame = np.arange(0.0, e.duration_s + 0.25, 0.125)
    amp = rng.uniform(0.3, 1.0, frame.size)
    mod = np.interp(t, frame, amp) * (0.75 + 0.25 * np.cos(2 * np.pi * beat_hz * t))
    return _unit_power(x * mod)


def speaker_response(speaker_id: int, freqs: np.ndarray, seed: int = 0) -> np.ndarray:
    """Smooth magnitude response of a virtual speaker: 6 log-frequency Gaussian bumps, +-6 dB."""
    rng = np.random.default_rng([seed, 7919, speaker_id])
    lo, hi = np.log(BAND_HZ[0]), np.log(BAND_HZ[1])
    centers = rng.uniform(lo, hi, 6)
    widths = rng.uniform(0.1, 0.5, 6)
    amps_db = rng.uniform(-6.0, 6.0, 6)
    lf = np.log(np.maximum(np.asarray(freqs, dtype=np.float64), 1.0))[..., None]
    g_db = (amps_db * np.exp(-0.5 * ((lf - centers) / widths) ** 2)).sum(axis=-1)
    return 10 ** (g_db / 20.0)


def apply_speaker(force: np.ndarray, fs: float, speaker_id: int, seed: int = 0) -> np.ndarray:
    n = force.shape[-1]
    f = np.fft.rfftfreq(n, 1.0 / fs)
    return np.fft.irfft(np.fft.rfft(force) * speaker_response(speaker_id, f, seed), n)


def _resonator_coeffs(f_hz: float, zeta: float, fs: float):
    """Impulse-invariant discretization of ``w^2 / (s^2 + 2 zeta w s + w^2)``."""
    w = 2 * np.pi * f_hz
    wd = w * np.sqrt(1 - zeta**2)
    dt = 1.0 / fs
    r = np.exp(-zeta * w * dt)
    b = np.array([0.0, dt * (w**2 / wd) * r * np.sin(wd * dt)])
    a = np.array([1.0, -2 * r * np.cos(wd * dt), r**2])
    return b, a


def modal_response(model: ContainerModel, level: float, force: np.ndarray, fs: float) -> np.ndarray:
    """Noiseless point signals ``(n_points, 2, T)`` in px; linear in ``force``."""
    return modes_response(model.modes, level, force, fs)


def modes_response(modes, level: float, force: np.ndarray, fs: float) -> np.ndarray:
    """Superposed resonator outputs for a bare list of modes (no container checks)."""
    if not modes:
        raise ValueError("need at least one mode")
    force = np.asarray(force, dtype=np.float64)
    out = np.zeros(modes[0].shape.shape + (force.shape[-1],))
    for mode in modes:
        f = resonant_freq(mode, level)
        if f >= fs / 2:
            raise ValueError(f"resonance {f:.1f} Hz is above Nyquist {fs / 2} Hz")
        b, a = _resonator_coeffs(f, mode.zeta, fs)
        x = mode.gain * lfilter(b, a, force)
        out += mode.shape[:, :, None] * x[None, None, :]
    return PX_PER_UNIT * out


def synthesize_response(
    model: ContainerModel,
    level: float,
    e: Excitation,
    noise_sigma: float = 0.0,
    speaker_id: int | None = None,
    speaker_seed: int = 0,
    noise_seed: int | None = None,
) -> SynthSample:
    force = make_excitation(e)
    if speaker_id is not None:
        force = apply_speaker(force, e.f_samp_hz, speaker_id, speaker_seed)
    sig = modal_response(model, level, force, e.f_samp_hz)
    if noise_sigma > 0:
        rng = np.random.default_rng([e.seed if noise_seed is None else noise_seed, 104729])
        sig = sig + noise_sigma * rng.standard_normal(sig.shape)
    signals = [VibrationSignal(sig[i], e.f_samp_hz, point_index=i) for i in range(sig.shape[0])]
    return SynthSample(
        signals=signals,
        class_id=model.class_id,
        level=float(level),
        excitation=e.kind,
        speaker_id=speaker_id,
        instance_id=model.instance_id,
        seed=e.seed,
    )


def instance_jitter(model: ContainerModel, seed: int) -> ContainerModel:
    """Manufacturing variation: f_empty +-2 %, zeta +-10 %, shape noise std 0.05."""
    rng = np.random.default_rng(seed)
    modes = []
    for m in model.modes:
        u = rng.uniform(-0.02, 0.02)
        v = rng.uniform(-0.10, 0.10)
        shape = unit_shape(m.shape + 0.05 * rng.standard_normal(m.shape.shape))
        modes.append(
            replace(
                m,
                f_empty_hz=float(np.clip(m.f_empty_hz * (1 + u), *BAND_HZ)),
                zeta=float(np.clip(m.zeta * (1 + v), 0.002, 0.05)),
                shape=shape,
            )
        )
    return replace(model, modes=tuple(modes), jitter_seed=seed)


def _spaced_frequencies(rng, n, lo, hi, min_ratio):
    for _ in range(1000):
        f = np.sort(np.exp(rng.uniform(np.log(lo), np.log(hi), n)))
        if np.all(f[1:] / f[:-1] >= min_ratio):
            return f
    raise RuntimeError("could not place modes with the requested spacing")


def make_class(class_id: int, seed: int = 0, hard: bool = False, n_points: int = N_POINTS) -> ContainerModel:
    """Seeded random container class.

    Modes sit at least 6 % apart so that +-2 % instance jitter never merges
    them. A ``hard`` class has one dominant, very sharp mode that carries
    almost all of point 0's response, while the remaining modes mainly show
    up at the other points.
    """
    rng = np.random.default_rng([seed, 31337, class_id])
    n_modes = int(rng.integers(8, 17))
    freqs = _spaced_frequencies(rng, n_modes, 150.0, 2000.0, 1.06)
    modes = []
    for f in freqs:
        shape = rng.standard_normal((n_points, 2))
        if hard:
            shape[0] *= 0.05
        modes.append(
            ModeSpec(
                f_empty_hz=float(f),
                beta=float(rng.uniform(0.3, 0.9)),
                zeta=float(np.exp(rng.uniform(np.log(0.004), np.log(0.03)))),
                shape=unit_shape(shape),
                gain=float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))),
            )
        )
    if hard:
        k = int(rng.integers(0, n_modes))
        shape = np.zeros((n_points, 2))
        shape[0] = rng.standard_normal(2)
        shape[1:] = 0.05 * rng.standard_normal((n_points - 1, 2))
        modes[k] = replace(modes[k], zeta=0.002, gain=10.0, shape=unit_shape(shape))
    return ContainerModel(class_id=class_id, modes=tuple(modes), hard=hard)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetRecipe:
    """Full factorial over classes, instances, levels, excitations and speakers.

    The first ``n_instances`` instances at standard levels under the
    ``train_excitations`` form the training pool; the extra instances,
    intermediate levels and ambient excitation are held out.
    """

    n_classes: int = 8
    n_instances: int = 4
    heldout_instances: int = 1
    levels: tuple[float, ...] = L_STANDARD
    interm_levels: tuple[float, ...] = L_INTERM
    train_excitations: tuple[str, ...] = ("chirp", "song_surrogate")
    heldout_excitations: tuple[str, ...] = ("ambient_surrogate",)
    n_speakers: int = 5
    hard_classes: tuple[int, ...] = ()
    duration_s: float = 2.0
    f_samp_hz: float = 5100.0
    noise_sigma: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecipe":
        d = dict(d)
        for k in ("levels", "interm_levels", "train_excitations", "heldout_excitations", "hard_classes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    class_id: int
    instance: int
    level: float
    excitation: str
    speaker: int
    seed: int
    path: str = ""

    @property
    def key(self):
        return (self.class_id, self.instance, self.level, self.excitation, self.speaker, self.seed)


def _sample_seed(recipe: DatasetRecipe, c, inst, level, exc, spk) -> int:
    ss = np.random.SeedSequence(
        [recipe.seed, c, inst, int(round(level * 1000)), EXCITATION_KINDS.index(exc), spk]
    )
    return int(ss.generate_state(1)[0])


def recipe_rows(recipe: DatasetRecipe) -> list[ManifestRow]:
    rows = []
    levels = tuple(recipe.levels) + tuple(recipe.interm_levels)
    excs = tuple(recipe.train_excitations) + tuple(recipe.heldout_excitations)
    for c in range(recipe.n_classes):
        for inst in range(recipe.n_instances + recipe.heldout_instances):
            for lv in levels:
                for exc in excs:
                    for spk in range(recipe.n_speakers):
                        seed = _sample_seed(recipe, c, inst, lv, exc, spk)
                        sid = f"c{c:02d}_i{inst}_l{lv:.2f}_{exc}_s{spk}"
                        rows.append(ManifestRow(sid, c, inst, float(lv), exc, spk, seed))
    check_unique(rows)
    return rows


def check_unique(rows: list[ManifestRow]) -> None:
    seen = set()
    for r in rows:
        if r.key in seen:
            raise ValueError(f"duplicate dataset key {r.key}")
        seen.add(r.key)
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample_id")


def class_models(recipe: DatasetRecipe) -> dict[tuple[int, int], ContainerModel]:
    out = {}
    for c in range(recipe.n_classes):
        base = make_class(c, recipe.seed, hard=c in recipe.hard_classes)
        for inst in range(recipe.n_instances + recipe.heldout_instances):
            jseed = int(np.random.SeedSequence([recipe.seed, 4099, c, inst]).generate_state(1)[0])
            out[(c, inst)] = replace(instance_jitter(base, jseed), instance_id=inst)
    return out


def synthesize_row(recipe: DatasetRecipe, models, row: ManifestRow) -> SynthSample:
    e = Excitation(row.excitation, recipe.duration_s, recipe.f_samp_hz, seed=row.seed)
    return synthesize_response(
        models[(row.class_id, row.instance)],
        row.level,
        e,
        noise_sigma=recipe.noise_sigma,
        speaker_id=row.speaker,
        speaker_seed=recipe.seed,
        noise_seed=row.seed,
    )


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.sample_id, r.class_id, r.instance, repr(r.level), r.excitation, r.speaker, r.seed, r.path])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"unexpected manifest header {reader.fieldnames}")
        return [
            ManifestRow(
                sample_id=d["sample_id"],
                class_id=int(d["class"]),
                instance=int(d["instance"]),
                level=float(d["level"]),
                excitation=d["excitation"],
                speaker=int(d["speaker"]),
                seed=int(d["seed"]),
                path=d["path"],
            )
            for d in reader
        ]


@dataclass
class Dataset:
    recipe: DatasetRecipe
    rows: list[ManifestRow]
    models: dict = field(default_factory=dict)
    root: Path | None = None


def build_dataset(recipe: DatasetRecipe, out_dir=None, rows: list[ManifestRow] | None = None) -> Dataset:
    """Synthesize every recipe row; with ``out_dir`` persist signals, manifest and class models."""
    from . import formats

    rows = recipe_rows(recipe) if rows is None else rows
    check_unique(rows)
    models = class_models(recipe)
    if out_dir is None:
        return Dataset(recipe, rows, models)

    root = Path(out_dir)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    written = []
    for r in rows:
        sample = synthesize_row(recipe, models, r)
        rel = os.path.join("signals", f"{r.sample_id}.vsig")
        formats.write_signals(root / rel, sample.signals)
        written.append(replace(r, path=rel))
    write_manifest(root / "manifest.csv", written)
    with open(root / "classes.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "recipe": recipe.to_dict(),
                "instances": [models[k].to_dict() for k in sorted(models)],
            },
            fh,
            indent=1,
            sort_keys=True,
        )
    return Dataset(recipe, written, models, root)
