"""Binary artifact formats and flat key-value configs.

All numeric payloads are little-endian. Layouts:

``VSFQ`` frame sequence
    magic, u16 version, u32 T, u32 grid_count, u32 h, u32 w_patch,
    f32 frames (T, grid, h, w), f32 ground-truth shifts (grid, T-1, 2),
    then an f64 frame-rate trailer.
``VSIG`` vibration signal (a sample file is several records back to back)
    magic, u16 version, u32 point_index, u32 T, f64 f_cam, f32 samples (2, T),
    validity bitmask of ceil(T/8) bytes (LSB first).
``VSPC`` spectral feature
    magic, u16 version, 16-byte ASCII grid hash, u32 point_index, u32 n_freq,
    f32 magnitudes (2, n_freq).
``VTCK`` checkpoint
    magic, u16 version, u32 length + UTF-8 JSON config, u32 block count, then
    per block u16 name length, name, u8 ndim, u32 dims, f64 data; a trailing
    32-byte SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .shift_estimation import VibrationSignal
from .speckle_sim import FrameSequence
from .spectral import FrequencyGrid, SpectralFeature

VERSION = 1


class FormatError(ValueError):
    pass


def _expect(buf: io.BufferedIOBase, magic: bytes) -> int:
    got = buf.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


def _read_array(buf, dtype, shape) -> np.ndarray:
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("truncated payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


# ------------------------------------------------------------------ VSFQ


def write_frames(path, seq: FrameSequence) -> None:
    t, g, h, w = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(b"VSFQ" + struct.pack("<H4I", VERSION, t, g, h, w))
        fh.write(seq.frames.astype("<f4").tobytes())
        fh.write(seq.ground_truth.astype("<f4").tobytes())
        fh.write(struct.pack("<d", seq.rate_hz))


def read_frames(path) -> FrameSequence:
    with open(path, "rb") as fh:
        _expect(fh, b"VSFQ")
        t, g, h, w = struct.unpack("<4I", fh.read(16))
        frames = _read_array(fh, "<f4", (t, g, h, w)).astype(np.float64)
        gt = _read_array(fh, "<f4", (g, t - 1, 2)).astype(np.float64)
        tail = fh.read(8)
        rate = struct.unpack("<d", tail)[0] if len(tail) == 8 else 5100.0
    return FrameSequence(frames=frames, ground_truth=gt, noise_sigma=float("nan"), rate_hz=rate)


# ------------------------------------------------------------------ VSIG


def _signal_bytes(s: VibrationSignal) -> bytes:
    n = s.n_samples
    head = b"VSIG" + struct.pack("<HIId", VERSION, s.point_index, n, s.rate_hz)
    mask = np.packbits(s.valid.astype(np.uint8), bitorder="little").tobytes()
    return head + s.samples.astype("<f4").tobytes() + mask


def write_signals(path, signals: list[VibrationSignal]) -> None:
    with open(path, "wb") as fh:
        for s in signals:
            fh.write(_signal_bytes(s))


def read_signals(path) -> list[VibrationSignal]:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    out = []
    while buf.tell() < len(data):
        _expect(buf, b"VSIG")
        idx, n, rate = struct.unpack("<IId", buf.read(16))
        samples = _read_array(buf, "<f4", (2, n)).astype(np.float64)
        nbytes = (n + 7) // 8
        mask = np.unpackbits(np.frombuffer(buf.read(nbytes), np.uint8), bitorder="little")[:n]
        out.append(VibrationSignal(samples, rate, point_index=idx, valid=mask.astype(bool)))
    return out


# ------------------------------------------------------------------ VSPC


def _feature_bytes(f: SpectralFeature) -> bytes:
    n = f.magnitudes.shape[1]
    head = b"VSPC" + struct.pack("<H", VERSION) + f.grid.hash.encode("ascii")
    return head + struct.pack("<II", f.point_index, n) + f.magnitudes.astype("<f4").tobytes()


def write_features(path, feats: list[SpectralFeature]) -> None:
    with open(path, "wb") as fh:
        for f in feats:
            fh.write(_feature_bytes(f))


def read_features(path, grid: FrequencyGrid | None = None) -> list[SpectralFeature]:
    from .spectral import DEFAULT_GRID

    grid = grid or DEFAULT_GRID
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    out = []
    while buf.tell() < len(data):
        _expect(buf, b"VSPC")
        ghash = buf.read(16).decode("ascii")
        if ghash != grid.hash:
            raise FormatError(f"feature grid {ghash} does not match {grid.hash}")
        idx, n = struct.unpack("<II", buf.read(8))
        mags = _read_array(buf, "<f4", (2, n)).astype(np.float64)
        out.append(SpectralFeature(mags, point_index=idx, grid=grid))
    return out


# ------------------------------------------------------------------ VTCK


def checkpoint_bytes(config: dict, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out.write(b"VTCK" + struct.pack("<HI", VERSION, len(cfg)) + cfg)
    out.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.write(struct.pack("<HB", len(nb), arr.ndim) + nb)
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def parse_checkpoint(data: bytes) -> tuple[dict, list[tuple[str, np.ndarray]], str]:
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint content hash mismatch")
    buf = io.BytesIO(body)
    _expect(buf, b"VTCK")
    (n,) = struct.unpack("<I", buf.read(4))
    config = json.loads(buf.read(n).decode("utf-8"))
    (nblocks,) = struct.unpack("<I", buf.read(4))
    blocks = []
    for _ in range(nblocks):
        ln, nd = struct.unpack("<HB", buf.read(3))
        name = buf.read(ln).decode("utf-8")
        shape = struct.unpack(f"<{nd}I", buf.read(4 * nd))
        blocks.append((name, _read_array(buf, "<f8", shape)))
    return config, blocks, digest.hex()


# ------------------------------------------------------------------ configs


def _coerce(v: str):
    s = v.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    if "," in s:
        return tuple(_coerce(p) for p in s.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; comma-separated values become tuples."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(v)
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v) + ("," if len(v) == 1 else "")
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())
