"""Losses, augmentation, gradients and the Adam training loop."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import formats
from .model import DTYPE, ModelConfig, VibrationTransformer, as_tensor, build_model
from .ordinal import LEVELS, LOG_EPS, SORD_SHARPNESS, map_estimate
from .spectral import DEFAULT_GRID, FrequencyGrid, SpectralFeature, preprocess_magnitudes

log = logging.getLogger(__name__)

PREPROCESSING = "median-scale/log1p/standardize"


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    sord: float = 0.9
    ce: float = 0.1

    def __post_init__(self):
        if self.sord < 0 or self.ce < 0 or self.sord + self.ce <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 300
    batch_size: int = 32
    w_sord: float = 0.9
    w_ce: float = 0.1
    token_dropout_rate: float = 0.5
    aug_bumps: int = 6
    aug_width_hz: tuple[float, float] = (100.0, 600.0)
    aug_amplitude: float = 0.7
    augment: bool = True
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 20

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_sord, self.w_ce)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "aug_width_hz" in known:
            known["aug_width_hz"] = tuple(float(x) for x in known["aug_width_hz"])
        return cls(**known)


# ------------------------------------------------------------------ losses


def sord_targets(levels) -> torch.Tensor:
    """Batched soft targets ``(B, 6)`` in float64."""
    lv = torch.as_tensor(np.asarray(levels, dtype=np.float64), dtype=DTYPE)[:, None]
    z = -SORD_SHARPNESS * (lv - torch.as_tensor(LEVELS, dtype=DTYPE)[None]) ** 2
    return torch.softmax(z, dim=-1)


def sord_loss_t(level_logits: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Per-sample ``-q . log(clamp(softmax(logits), 1e-12))``."""
    p = torch.softmax(level_logits, dim=-1)
    return -(q * torch.log(torch.clamp(p, min=LOG_EPS))).sum(dim=-1)


def total_loss(class_logits, level_logits, classes, levels, weights: LossWeights = LossWeights()):
    """Batch mean of ``w_sord * SORD + w_ce * CE``."""
    classes = torch.as_tensor(np.asarray(classes), dtype=torch.long)
    if classes.numel() and (classes.min() < 0 or classes.max() >= class_logits.shape[-1]):
        raise ValueError("class label out of range")
    lv = np.asarray(levels, dtype=np.float64)
    if np.any((lv < 0) | (lv > 1)):
        raise ValueError("level label out of range")
    loss = weights.sord * sord_loss_t(level_logits, sord_targets(lv))
    if weights.ce:
        ce = torch.nn.functional.cross_entropy(class_logits, classes, reduction="none")
        loss = loss + weights.ce * ce
    return loss.mean()


# ------------------------------------------------------------ augmentation


def _bump_filter(freqs: np.ndarray, rng: np.random.Generator, n_bumps, width_hz, amplitude):
    lo, hi = freqs[0], freqs[-1]
    centers = rng.uniform(lo, hi, n_bumps)
    widths = rng.uniform(width_hz[0], width_hz[1], n_bumps)
    amps = rng.uniform(-amplitude, amplitude, n_bumps)
    g = amps[:, None] * np.exp(-0.5 * ((freqs[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    return g.sum(axis=0)


def augment_filter(
    s: SpectralFeature,
    seed: int,
    n_bumps: int = 6,
    width_hz: tuple[float, float] = (100.0, 600.0),
    amplitude: float = 0.7,
) -> SpectralFeature:
    """Multiply magnitudes by ``exp(g(f))``, ``g`` a sum of random Gaussian bumps (nats).

    Both axes share the filter.
    """
    rng = np.random.default_rng(seed)
    g = _bump_filter(s.grid.frequencies, rng, n_bumps, width_hz, amplitude)
    return replace(s, magnitudes=s.magnitudes * np.exp(g)[None, :])


def token_dropout(n_tokens: int, rate: float, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Boolean mask with exactly ``round(rate * n_tokens)`` True (dropped) entries."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    mask = np.zeros(n_tokens, dtype=bool)
    if not training:
        return mask
    k = int(round(rate * n_tokens))
    if k:
        mask[rng.choice(n_tokens, size=k, replace=False)] = True
    return mask


# -------------------------------------------------------------- features


@dataclass
class FeatureTable:
    """Raw (unpreprocessed) magnitudes ``(N, n_points, 2, F)`` with labels."""

    magnitudes: np.ndarray
    classes: np.ndarray
    levels: np.ndarray
    rows: list = field(default_factory=list)
    grid: FrequencyGrid = DEFAULT_GRID

    def __len__(self) -> int:
        return self.magnitudes.shape[0]

    def subset(self, idx) -> "FeatureTable":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureTable(
            self.magnitudes[idx],
            self.classes[idx],
            self.levels[idx],
            [self.rows[i] for i in idx] if self.rows else [],
            self.grid,
        )


def prepare_batch(
    mags: np.ndarray,
    cfg: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    freqs: np.ndarray | None = None,
) -> np.ndarray:
    """Optionally filter-augment (one filter per sample, all points), then preprocess."""
    mags = np.asarray(mags, dtype=np.float64)
    if cfg is not None and cfg.augment and rng is not None and cfg.aug_amplitude > 0:
        freqs = DEFAULT_GRID.frequencies if freqs is None else freqs
        g = np.stack(
            [_bump_filter(freqs, rng, cfg.aug_bumps, cfg.aug_width_hz, cfg.aug_amplitude) for _ in mags]
        )
        mags = mags * np.exp(g)[:, None, None, :]
    out, _ = preprocess_magnitudes(mags)
    return out


# ------------------------------------------------------------- gradients


def grad(model: VibrationTransformer, feats, classes, levels, weights: LossWeights = LossWeights(),
         token_mask=None, point_mask=None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact reverse-mode gradient for every named parameter."""
    model.zero_grad(set_to_none=True)
    cl, ll = model(as_tensor(feats), token_mask=token_mask, point_mask=point_mask)
    loss = total_loss(cl, ll, classes, levels, weights)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {
        n: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for n, p in model.named_parameters()
    }
    return float(loss.item()), grads


# ------------------------------------------------------------- checkpoint


def checkpoint_bytes(model: VibrationTransformer, meta: dict | None = None) -> bytes:
    config = {
        "model": model.config.to_dict(),
        "grid_hash": DEFAULT_GRID.hash,
        "preprocessing": PREPROCESSING,
        "levels": list(LEVELS),
        "meta": meta or {},
    }
    blocks = [(n, p.detach().numpy()) for n, p in model.named_parameters()]
    return formats.checkpoint_bytes(config, blocks)


def save_checkpoint(path, model: VibrationTransformer, meta: dict | None = None) -> str:
    data = checkpoint_bytes(model, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data[-32:].hex()


def load_checkpoint(path) -> tuple[VibrationTransformer, dict, str]:
    with open(path, "rb") as fh:
        config, blocks, digest = formats.parse_checkpoint(fh.read())
    model = VibrationTransformer(ModelConfig(**config["model"]))
    params = dict(model.named_parameters())
    if [n for n, _ in blocks] != list(params):
        raise formats.FormatError("checkpoint parameter layout does not match the model")
    with torch.no_grad():
        for name, arr in blocks:
            if tuple(arr.shape) != tuple(params[name].shape):
                raise formats.FormatError(f"shape mismatch for {name}")
            params[name].copy_(torch.from_numpy(arr))
    log.info("loaded checkpoint %s: %s", digest[:12], model.n_parameters())
    return model, config, digest


def params_hash(model: VibrationTransformer) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


# ------------------------------------------------------------ train loop


@dataclass
class TrainResult:
    model: VibrationTransformer
    log: list[dict]
    best_epoch: int
    best_val_mae: float


@torch.no_grad()
def evaluate_levels(model, feats_pre: np.ndarray, point_mask=None, batch_size: int = 128):
    """Eval-mode class logits and level probabilities for preprocessed features."""
    model.eval()
    cls, probs = [], []
    for s in range(0, feats_pre.shape[0], batch_size):
        cl, ll = model(as_tensor(feats_pre[s : s + batch_size]), point_mask=point_mask)
        cls.append(cl.numpy())
        probs.append(torch.softmax(ll, dim=-1).numpy())
    return np.concatenate(cls), np.concatenate(probs)


def train(
    data: FeatureTable,
    train_idx,
    val_idx,
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    points: tuple[int, ...] | None = None,
    log_path=None,
) -> TrainResult:
    """Seeded Adam loop; keeps the parameters with the best validation MAE.

    ``points`` selects which measurement points the model sees (e.g. ``(0,)``
    for the single-point ablation); the model config must agree.
    """
    cfg = train_config
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2718])
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    pts = slice(None) if points is None else list(points)
    n_pts = data.magnitudes[:1, pts].shape[1]
    if n_pts != model_config.n_points:
        raise ValueError(f"model expects {model_config.n_points} points, data gives {n_pts}")

    model = build_model(model_config, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    freqs = data.grid.frequencies
    val_x = prepare_batch(data.magnitudes[val_idx][:, pts]) if val_idx.size else None

    history, best, best_state = [], (np.inf, -np.inf), None
    best_epoch, initial, streak = -1, None, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = train_idx[rng.permutation(train_idx.size)]
        total, count = 0.0, 0
        for s in range(0, order.size, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x = prepare_batch(data.magnitudes[idx][:, pts], cfg, rng, freqs)
            masks = np.stack(
                [token_dropout(model_config.n_tokens, cfg.token_dropout_rate, rng) for _ in range(idx.size * n_pts)]
            ).reshape(idx.size, n_pts, -1)
            opt.zero_grad(set_to_none=True)
            cl, ll = model(as_tensor(x), token_mask=torch.from_numpy(masks))
            loss = total_loss(cl, ll, data.classes[idx], data.levels[idx], cfg.weights)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: non-finite loss")
            loss.backward()
            opt.step()
            total += float(loss.item()) * idx.size
            count += idx.size
        train_loss = total / count

        if val_x is not None:
            cls, probs = evaluate_levels(model, val_x)
            pred = np.array([map_estimate(p) for p in probs])
            val_mae = float(np.mean(np.abs(pred - data.levels[val_idx])))
            val_acc = float(np.mean(cls.argmax(axis=1) == data.classes[val_idx]))
        else:
            val_mae, val_acc = float("nan"), float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_mae": val_mae, "val_class_acc": val_acc})
        log.info("epoch %d loss %.5f val_mae %.4f val_acc %.3f", epoch, train_loss, val_mae, val_acc)

        key = (val_mae, -val_acc) if val_x is not None else (-epoch, 0.0)
        if best_state is None or key < best:
            best, best_epoch = key, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

        initial = train_loss if initial is None else initial
        streak = streak + 1 if train_loss > cfg.divergence_factor * initial else 0
        if streak >= cfg.divergence_patience:
            raise TrainingDiverged(
                f"loss above {cfg.divergence_factor}x initial for {streak} epochs (epoch {epoch})"
            )

    model.load_state_dict(best_state)
    if log_path is not None:
        write_log(log_path, history)
    return TrainResult(model, history, best_epoch, float(best[0]) if val_x is not None else float("nan"))


def write_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mae", "val_class_acc"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_mae"]), repr(h["val_class_acc"])])


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(d["epoch"]), **{k: float(d[k]) for k in ("train_loss", "val_mae", "val_class_acc")}}
            for d in csv.DictReader(fh)
        ]
