"""Two-axis speckle shift recovery: phase correlation then Lucas-Kanade.

Every estimator here runs on stacks of patch pairs ``(B, h, w)``. The single
pair entry points (:func:`phase_correlate`, :func:`lk_refine`, :func:`pclk`)
call the same kernels with ``B == 1``; :func:`pclk_batch` feeds large stacks
through a worker pool. Because every reduction is taken per pair over a
contiguous row, the batched and one-at-a-time paths give identical floats.

A pair ``(a, b)`` has shift ``d`` when ``b(x) = a(x - d)``, i.e. ``b`` is
``a`` translated by ``+d``. Shifts are ``(x, y)`` ordered.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.signal.windows import hann

from .speckle_sim import FrameSequence

LK_MAX_ITER = 20
LK_STEP_TOL = 1e-3
LK_MAX_COND = 1e8
RESIDUAL_TOL = 0.25
PC_REGULARIZATION = 1e-2

# status codes shared by the batch kernels
OK, NOT_CONVERGED, SINGULAR, DEGENERATE, REJECTED = 0, 1, 2, 3, 4
STATUS_NAMES = {
    OK: "ok",
    NOT_CONVERGED: "not_converged",
    SINGULAR: "singular",
    DEGENERATE: "degenerate",
    REJECTED: "rejected",
}


class ShiftEstimationError(ValueError):
    pass


class DegeneratePatchError(ShiftEstimationError):
    """A patch has (numerically) zero variance; no shift is defined."""


class ShiftRejectedError(ShiftEstimationError):
    """The recovered shift exceeds a quarter of the patch size."""


@dataclass(frozen=True)
class ShiftEstimate:
    delta: np.ndarray
    converged: bool
    iterations: int
    residual: float
    status: str = "ok"


@dataclass
class VibrationSignal:
    """Inter-frame shifts of one grid point, ``samples`` shaped ``(2, T)``."""

    samples: np.ndarray
    rate_hz: float
    point_index: int = 0
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ValueError(f"samples must be (2, T), got {self.samples.shape}")
        if self.samples.shape[1] < 2:
            raise ValueError("a vibration signal needs T >= 2")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("vibration samples must be finite")
        if self.valid is None:
            self.valid = np.ones(self.samples.shape[1], dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def _rowsum(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1).sum(axis=1)


def _degenerate(p: np.ndarray) -> np.ndarray:
    n = p[0].size
    mean = _rowsum(p) / n
    var = _rowsum((p - mean[:, None, None]) ** 2) / n
    return var <= 1e-14 * np.maximum(mean**2, 1.0)


def _window(shape: tuple[int, int]) -> np.ndarray:
    return np.outer(hann(shape[0], sym=False), hann(shape[1], sym=False))


def _pc_kernel(a: np.ndarray, b: np.ndarray, window: bool) -> np.ndarray:
    """Integer shifts ``(B, 2)`` as float, ``(x, y)`` order."""
    bsz, h, w = a.shape
    n = h * w
    a = a - (_rowsum(a) / n)[:, None, None]
    b = b - (_rowsum(b) / n)[:, None, None]
    if window:
        win = _window((h, w))
        a = a * win
        b = b * win
    # the integer peak location needs no more than single precision
    cross = np.conj(sfft.rfft2(a.astype(np.float32))) * sfft.rfft2(b.astype(np.float32))
    mag = np.abs(cross)
    # Speckle is band-limited, so most bins hold only noise; a floor on the
    # normalizer keeps those bins from being whitened up to unit weight.
    floor = PC_REGULARIZATION * mag.reshape(bsz, -1).max(axis=1)
    cross = cross / (mag + np.maximum(floor, np.float32(1e-30))[:, None, None])
    corr = sfft.irfft2(cross, s=(h, w))
    # argmax returns the lowest linear index on ties
    idx = np.argmax(corr.reshape(bsz, -1), axis=1)
    iy, ix = np.divmod(idx, w)
    iy = np.where(iy > h // 2, iy - h, iy)
    ix = np.where(ix > w // 2, ix - w, ix)
    return np.stack([ix, iy], axis=1).astype(np.float64)


def _central_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``(B, h, w)`` on the interior ``[1, size-1)``."""
    gx = 0.5 * (img[:, 1:-1, 2:] - img[:, 1:-1, :-2])
    gy = 0.5 * (img[:, 2:, 1:-1] - img[:, :-2, 1:-1])
    return gx, gy


def _crop_margins(init: np.ndarray) -> np.ndarray:
    # +1 leaves room for the residual (<= 1 px) the refinement still has to find
    return np.maximum(4, np.ceil(np.abs(init).max(axis=1)).astype(np.int64) + 1)


def _bilinear_translate(img: np.ndarray, delta: np.ndarray, margin: int) -> np.ndarray:
    """Sample each image at ``x - delta`` on the interior ``[margin, size - margin)``.

    The fractional offset is uniform across a pure translation, so each pair
    needs a single ``(ny+1, nx+1)`` block gathered at its integer offset.
    """
    bsz, h, w = img.shape
    ny, nx = h - 2 * margin, w - 2 * margin
    s = -delta
    i0 = np.floor(s)
    t = s - i0
    i0 = i0.astype(np.intp)
    start = np.arange(bsz) * (h * w) + (margin + i0[:, 1]) * w + (margin + i0[:, 0])
    rel = (np.arange(ny + 1)[:, None] * w + np.arange(nx + 1)[None, :]).ravel()
    blk = np.take(img.reshape(-1), start[:, None] + rel[None, :]).reshape(bsz, ny + 1, nx + 1)
    tx = t[:, 0]
    ty = t[:, 1]
    w00 = ((1 - ty) * (1 - tx))[:, None, None]
    w01 = ((1 - ty) * tx)[:, None, None]
    w10 = (ty * (1 - tx))[:, None, None]
    w11 = (ty * tx)[:, None, None]
    out = w00 * blk[:, :-1, :-1]
    out += w01 * blk[:, :-1, 1:]
    out += w10 * blk[:, 1:, :-1]
    out += w11 * blk[:, 1:, 1:]
    return out


def _lk_kernel(a: np.ndarray, b: np.ndarray, init: np.ndarray, margin: int):
    """Translation-only Gauss-Newton, inverse-compositional form.

    Linearizing about the fixed frame ``b`` gives a Hessian that is built
    once per pair; each iteration only warps ``a``. Returns delta,
    iterations, status and the normalized residual.
    """
    bsz, h, w = a.shape
    inner = (slice(None), slice(margin, h - margin), slice(margin, w - margin))
    b_in = b[inner]
    gx, gy = _central_gradients(b[:, margin - 1 : h - margin + 1, margin - 1 : w - margin + 1])
    hxx = _rowsum(gx * gx)
    hxy = _rowsum(gx * gy)
    hyy = _rowsum(gy * gy)
    det = hxx * hyy - hxy * hxy
    half_tr = 0.5 * (hxx + hyy)
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lmax = half_tr + disc
    lmin = half_tr - disc
    singular = (det <= 0) | (lmin <= 0) | (lmax > LK_MAX_COND * np.where(lmin > 0, lmin, 1.0))
    det = np.where(singular, 1.0, det)

    delta = init.astype(np.float64).copy()
    iters = np.zeros(bsz, dtype=np.int64)
    status = np.full(bsz, NOT_CONVERGED, dtype=np.int64)
    status[singular] = SINGULAR
    iters[singular] = 1
    active = np.flatnonzero(~singular)

    nb = b_in[0].size
    bmean = _rowsum(b_in) / nb
    bvar = _rowsum((b_in - bmean[:, None, None]) ** 2) / nb
    bvar = np.where(bvar > 0, bvar, 1.0)
    # normalized SSD at the last evaluated warp (within one sub-tolerance step of delta)
    residual = np.full(bsz, np.nan)

    for _ in range(LK_MAX_ITER):
        if active.size == 0:
            break
        err = _bilinear_translate(a[active], delta[active], margin) - b_in[active]
        residual[active] = (_rowsum(err * err) / nb) / bvar[active]
        jx = _rowsum(gx[active] * err)
        jy = _rowsum(gy[active] * err)
        step_x = (hyy[active] * jx - hxy[active] * jy) / det[active]
        step_y = (hxx[active] * jy - hxy[active] * jx) / det[active]
        iters[active] += 1
        prop = delta[active] + np.stack([step_x, step_y], axis=1)
        # stepping out of the sampled interior means the refinement is lost
        escaped = np.abs(prop).max(axis=1) > margin - 1
        ok = ~escaped
        delta[active[ok]] = prop[ok]
        done = ok & (np.hypot(step_x, step_y) < LK_STEP_TOL)
        status[active[done]] = OK
        active = active[ok & ~done]

    status = np.where((status == OK) & (residual > RESIDUAL_TOL), NOT_CONVERGED, status)
    return delta, iters, status, residual


def _check_pairs(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[1] < 8 or a.shape[2] < 8:
        raise ValueError(f"patches must be at least 8x8, got {a.shape[1:]}")


def _max_shift(shape) -> float:
    return min(shape[-2], shape[-1]) / 4.0


def pclk_many(a: np.ndarray, b: np.ndarray, window: bool = True) -> dict[str, np.ndarray]:
    """Full PC + LK on a stack of pairs without raising; per-pair status codes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pairs(a, b)
    bsz = a.shape[0]
    delta = np.zeros((bsz, 2))
    iters = np.zeros(bsz, dtype=np.int64)
    residual = np.full(bsz, np.nan)
    status = np.full(bsz, DEGENERATE, dtype=np.int64)
    limit = _max_shift(a.shape)

    good = np.flatnonzero(~(_degenerate(a) | _degenerate(b)))
    if good.size:
        init = _pc_kernel(a[good], b[good], window)
        in_range = np.hypot(init[:, 0], init[:, 1]) <= limit
        status[good[~in_range]] = REJECTED
        delta[good[~in_range]] = init[~in_range]
        good, init = good[in_range], init[in_range]
    # one crop margin per distinct init magnitude keeps shapes rectangular
    margins = _crop_margins(init) if good.size else np.array([], dtype=np.int64)
    for m in np.unique(margins):
        sel = margins == m
        idx = good[sel]
        d, it, st, res = _lk_kernel(a[idx], b[idx], init[sel], int(m))
        fine = np.hypot(d[:, 0], d[:, 1]) <= limit
        st = np.where(fine, st, REJECTED)
        delta[idx], iters[idx], status[idx], residual[idx] = d, it, st, res
    return {"delta": delta, "iterations": iters, "status": status, "residual": residual}


def phase_correlate(a: np.ndarray, b: np.ndarray, window: bool = True) -> np.ndarray:
    """Integer shift of ``b`` relative to ``a`` in ``(-size/2, size/2]``."""
    a = np.asarray(a, dtype=np.float64)[None]
    b = np.asarray(b, dtype=np.float64)[None]
    _check_pairs(a, b)
    if _degenerate(a)[0] or _degenerate(b)[0]:
        raise DegeneratePatchError("zero-variance patch")
    return _pc_kernel(a, b, window)[0].astype(np.int64)


def lk_refine(a: np.ndarray, b: np.ndarray, init=(0.0, 0.0)) -> ShiftEstimate:
    a = np.asarray(a, dtype=np.float64)[None]
    b = np.asarray(b, dtype=np.float64)[None]
    _check_pairs(a, b)
    init = np.asarray(init, dtype=np.float64).reshape(1, 2)
    d, it, st, res = _lk_kernel(a, b, init, int(_crop_margins(init)[0]))
    return ShiftEstimate(
        delta=d[0],
        converged=bool(st[0] == OK),
        iterations=int(it[0]),
        residual=float(res[0]),
        status=STATUS_NAMES[int(st[0])],
    )


def pclk(a: np.ndarray, b: np.ndarray, window: bool = True) -> ShiftEstimate:
    """Shift of ``b`` relative to ``a``: integer PC seed, then LK refinement."""
    out = pclk_many(np.asarray(a)[None], np.asarray(b)[None], window=window)
    st = int(out["status"][0])
    if st == DEGENERATE:
        raise DegeneratePatchError("zero-variance patch")
    if st == REJECTED:
        raise ShiftRejectedError(
            f"shift {out['delta'][0]} exceeds patch_size/4 = {_max_shift(np.shape(a))}"
        )
    return ShiftEstimate(
        delta=out["delta"][0],
        converged=st == OK,
        iterations=int(out["iterations"][0]),
        residual=float(out["residual"][0]),
        status=STATUS_NAMES[st],
    )


@dataclass
class BatchResult:
    signals: list[VibrationSignal]
    status: np.ndarray  # (n_points, T-1)
    failures: dict[int, int] = field(default_factory=dict)


def _pairs(seq: FrameSequence) -> tuple[np.ndarray, np.ndarray]:
    # ordered by (point, frame)
    f = np.swapaxes(seq.frames, 0, 1)
    h, w = f.shape[-2:]
    return f[:, :-1].reshape(-1, h, w), f[:, 1:].reshape(-1, h, w)


def _hold_last(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = values.copy()
    last = np.zeros(values.shape[1])
    for t in range(values.shape[0]):
        if valid[t]:
            last = out[t]
        else:
            out[t] = last
    return out


def _assemble(seq: FrameSequence, delta, status) -> BatchResult:
    n_pts, n_steps = seq.n_points, seq.n_frames - 1
    delta = delta.reshape(n_pts, n_steps, 2)
    status = status.reshape(n_pts, n_steps)
    signals, failures = [], {}
    for i in range(n_pts):
        valid = status[i] == OK
        held = _hold_last(delta[i], valid)
        signals.append(VibrationSignal(held.T.copy(), seq.rate_hz, point_index=i, valid=valid))
        if not valid.all():
            failures[i] = int((~valid).sum())
    return BatchResult(signals=signals, status=status, failures=failures)


def pclk_serial(seq: FrameSequence, window: bool = True) -> BatchResult:
    """Reference path: one pair at a time, in (point, frame) order."""
    a, b = _pairs(seq)
    delta = np.zeros((a.shape[0], 2))
    status = np.zeros(a.shape[0], dtype=np.int64)
    for k in range(a.shape[0]):
        out = pclk_many(a[k : k + 1], b[k : k + 1], window=window)
        delta[k] = out["delta"][0]
        status[k] = out["status"][0]
    return _assemble(seq, delta, status)


def pclk_pairs_parallel(
    a: np.ndarray,
    b: np.ndarray,
    window: bool = True,
    chunk: int = 128,
    workers: int | None = None,
) -> dict[str, np.ndarray]:
    """Chunked, pooled :func:`pclk_many`; results gathered in input order."""
    n = a.shape[0]
    workers = workers or os.cpu_count() or 1
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(span):
        s, e = span
        return pclk_many(a[s:e], b[s:e], window=window)

    if workers == 1 or len(bounds) == 1:
        parts = [run(s) for s in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def pclk_batch(
    seq: FrameSequence, window: bool = True, chunk: int = 128, workers: int | None = None
) -> BatchResult:
    """Batched PCLK over every consecutive frame pair of every grid point.

    Degenerate or rejected pairs are reported per point in ``failures`` and
    filled by holding the last valid sample; ``signals[i].valid`` marks them.
    """
    a, b = _pairs(seq)
    out = pclk_pairs_parallel(a, b, window=window, chunk=chunk, workers=workers)
    return _assemble(seq, out["delta"], out["status"])
