"""Test-category splits, evaluation, the point-count ablation, CLS-token PCA and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import formats
from .modal_synth import (
    Dataset,
    DatasetRecipe,
    ManifestRow,
    class_models,
    read_manifest,
    synthesize_row,
)
from .model import ModelConfig, VibrationTransformer, as_tensor
from .ordinal import LEVELS, expect_estimate, map_estimate
from .spectral import DEFAULT_GRID, dtft_magnitude
from .training import FeatureTable, TrainConfig, TrainResult, evaluate_levels, params_hash, prepare_batch, train

log = logging.getLogger(__name__)

CATEGORIES = ("a", "b", "c", "d", "e", "f")
CATEGORY_NAMES = {
    "a": "held-out speaker",
    "b": "unseen instance",
    "c": "intermediate levels",
    "d": "ambient surrogate (pink noise)",
    "e": "intermediate levels + ambient surrogate",
    "f": "unseen instance + ambient surrogate",
}
EXPECTATION_CATEGORIES = ("c", "e")


class CategoryUnavailable(LookupError):
    pass


# ------------------------------------------------------------------ splits


@dataclass
class Split:
    train: list[int]
    test: list[int]


@dataclass
class Splits:
    """Row indices per category; ``validation`` mirrors category (a)."""

    categories: dict[str, Split]
    unavailable: dict[str, str]
    heldout_speakers: dict[int, int]

    @property
    def train(self) -> list[int]:
        return self.categories["a"].train

    @property
    def validation(self) -> list[int]:
        return self.categories["a"].test

    def test(self, category: str) -> list[int]:
        if category in self.unavailable:
            raise CategoryUnavailable(f"category ({category}) unavailable: {self.unavailable[category]}")
        return self.categories[category].test


def heldout_speakers(recipe: DatasetRecipe) -> dict[int, int]:
    """One speaker filter per class, drawn from the recipe seed."""
    rng = np.random.default_rng([recipe.seed, 6151])
    return {c: int(rng.integers(0, recipe.n_speakers)) for c in range(recipe.n_classes)}


def split_dataset(rows: list[ManifestRow], recipe: DatasetRecipe) -> Splits:
    """Assign manifest rows to the shared training pool and the six test categories.

    Training rows: known instances, standard levels, training excitations,
    excluding each class's held-out speaker (those form category (a)).
    """
    std = {round(x, 9) for x in recipe.levels}
    interm = {round(x, 9) for x in recipe.interm_levels}
    train_exc = set(recipe.train_excitations)
    amb_exc = set(recipe.heldout_excitations)
    known = lambda r: r.instance < recipe.n_instances  # noqa: E731
    hs = heldout_speakers(recipe)

    strata = {k: [] for k in ("train", *CATEGORIES)}
    for i, r in enumerate(rows):
        lv = round(r.level, 9)
        if known(r) and lv in std and r.excitation in train_exc:
            strata["a" if r.speaker == hs.get(r.class_id, -1) else "train"].append(i)
        elif not known(r) and lv in std and r.excitation in train_exc:
            strata["b"].append(i)
        elif known(r) and lv in interm and r.excitation in train_exc:
            strata["c"].append(i)
        elif known(r) and lv in std and r.excitation in amb_exc:
            strata["d"].append(i)
        elif known(r) and lv in interm and r.excitation in amb_exc:
            strata["e"].append(i)
        elif not known(r) and lv in std and r.excitation in amb_exc:
            strata["f"].append(i)

    why = {
        "a": "no held-out-speaker rows",
        "b": "recipe has no held-out instances",
        "c": "recipe has no intermediate levels",
        "d": "recipe has no ambient excitation",
        "e": "recipe lacks intermediate levels or ambient excitation",
        "f": "recipe lacks held-out instances or ambient excitation",
    }
    cats, unavailable = {}, {}
    for c in CATEGORIES:
        if strata[c]:
            cats[c] = Split(list(strata["train"]), strata[c])
        else:
            unavailable[c] = why[c]
    if "a" not in cats:
        raise ValueError("dataset has no held-out-speaker rows; cannot form a validation split")
    return Splits(cats, unavailable, hs)


# ---------------------------------------------------------------- features


def sample_magnitudes(signals, grid=DEFAULT_GRID) -> np.ndarray:
    """``(n_points, 2, F)`` magnitudes for one sample's point signals."""
    x = np.stack([s.samples for s in signals])
    return dtft_magnitude(x, signals[0].rate_hz, grid)


def dataset_hash(rows: list[ManifestRow], recipe: DatasetRecipe) -> str:
    h = hashlib.sha256(json.dumps(recipe.to_dict(), sort_keys=True).encode())
    for r in rows:
        h.update(f"{r.sample_id},{r.class_id},{r.instance},{r.level!r},{r.excitation},{r.speaker},{r.seed}\n".encode())
    return h.hexdigest()


def featurize_dataset(ds: Dataset, indices=None, workers: int | None = None) -> FeatureTable:
    """Raw magnitude table for the chosen rows (all by default), in row order.

    Rows with a stored signal file are read back; otherwise the row is
    synthesized from the recipe.
    """
    idx = range(len(ds.rows)) if indices is None else indices
    rows = [ds.rows[i] for i in idx]
    models = ds.models or class_models(ds.recipe)

    def one(r: ManifestRow) -> np.ndarray:
        if ds.root is not None and r.path:
            sig = formats.read_signals(Path(ds.root) / r.path)
        else:
            sig = synthesize_row(ds.recipe, models, r).signals
        return sample_magnitudes(sig).astype(np.float32)

    with ThreadPoolExecutor(max_workers=workers) as ex:
        mags = list(ex.map(one, rows))
    return FeatureTable(
        magnitudes=np.stack(mags),
        classes=np.array([r.class_id for r in rows], dtype=np.int64),
        levels=np.array([r.level for r in rows], dtype=np.float64),
        rows=rows,
    )


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "classes.json").read_text(encoding="utf-8"))
    recipe = DatasetRecipe.from_dict(meta["recipe"])
    return Dataset(recipe, read_manifest(root / "manifest.csv"), class_models(recipe), root)


# -------------------------------------------------------------- evaluation


@dataclass
class CategoryResult:
    category: str
    level_mae: float
    class_accuracy: float
    n_samples: int
    estimator: str

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("a reported category needs samples")
        if not (0.0 <= self.level_mae <= 1.0 and 0.0 <= self.class_accuracy <= 1.0):
            raise ValueError("metric out of range")


@dataclass
class EvalReport:
    rows: list[CategoryResult]
    metadata: dict = field(default_factory=dict)

    def row(self, category: str) -> CategoryResult:
        for r in self.rows:
            if r.category == category:
                return r
        raise CategoryUnavailable(category)

    def mae(self, category: str) -> float:
        return self.row(category).level_mae

    def to_csv(self) -> str:
        out = io.StringIO()
        for k in sorted(self.metadata):
            out.write(f"# {k}={self.metadata[k]}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["category", "level_mae", "class_accuracy", "n_samples", "estimator"])
        for r in self.rows:
            w.writerow([r.category, repr(r.level_mae), repr(r.class_accuracy), r.n_samples, r.estimator])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                k, v = line[2:].split("=", 1)
                meta[k] = v
            elif line:
                body.append(line)
        rows = [
            CategoryResult(d["category"], float(d["level_mae"]), float(d["class_accuracy"]), int(d["n_samples"]),
                           d["estimator"])
            for d in csv.DictReader(body)
        ]
        return cls(rows, meta)

    def to_text(self) -> str:
        lines = [f"{'cat':<4}{'description':<42}{'MAE':>8}{'acc':>8}{'n':>7}  estimator"]
        for r in self.rows:
            lines.append(
                f"{r.category:<4}{CATEGORY_NAMES.get(r.category, ''):<42}{r.level_mae:>8.4f}"
                f"{r.class_accuracy:>8.4f}{r.n_samples:>7d}  {r.estimator}"
            )
        for k in sorted(self.metadata):
            lines.append(f"{k}: {self.metadata[k]}")
        return "\n".join(lines) + "\n"


@dataclass
class Predictions:
    class_pred: np.ndarray
    level_probs: np.ndarray

    @property
    def l_map(self) -> np.ndarray:
        return np.array([map_estimate(p) for p in self.level_probs])

    @property
    def l_exp(self) -> np.ndarray:
        return np.array([expect_estimate(p) for p in self.level_probs])


def model_predictions(model: VibrationTransformer, mags: np.ndarray, points=None) -> Predictions:
    pts = slice(None) if points is None else list(points)
    x = prepare_batch(mags[:, pts])
    cls, probs = evaluate_levels(model, x)
    return Predictions(cls.argmax(axis=1), probs)


def score(pred: Predictions, classes, levels, category: str) -> CategoryResult:
    est = "expectation" if category in EXPECTATION_CATEGORIES else "map"
    lhat = pred.l_exp if est == "expectation" else pred.l_map
    return CategoryResult(
        category,
        float(np.mean(np.abs(lhat - np.asarray(levels)))),
        float(np.mean(pred.class_pred == np.asarray(classes))),
        int(len(levels)),
        est,
    )


def check_compatible(model: VibrationTransformer, data: FeatureTable) -> None:
    if data.grid != DEFAULT_GRID:
        raise ValueError(f"feature grid {data.grid.hash} does not match model grid {DEFAULT_GRID.hash}")
    if data.classes.size and data.classes.max() >= model.config.k_cont:
        raise ValueError(f"dataset has class ids beyond the model's {model.config.k_cont} classes")


def evaluate(
    model: VibrationTransformer,
    data: FeatureTable,
    splits: Splits,
    categories=CATEGORIES,
    points=None,
    predictor=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Per-category level MAE and class accuracy.

    ``predictor(indices) -> Predictions`` replaces the model (used for
    baselines and harness checks).
    """
    check_compatible(model, data) if model is not None else None
    results, skipped = [], []
    for c in categories:
        if c in splits.unavailable:
            skipped.append(c)
            continue
        idx = np.asarray(splits.test(c))
        pred = predictor(idx) if predictor else model_predictions(model, data.magnitudes[idx], points)
        results.append(score(pred, data.classes[idx], data.levels[idx], c))
    meta = dict(metadata or {})
    if model is not None:
        meta.setdefault("checkpoint_sha256", params_hash(model))
    meta["unavailable"] = ",".join(skipped) or "none"
    meta["ambient"] = "pink-noise surrogate"
    return EvalReport(results, meta)


# ----------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    three_point: EvalReport
    one_point: EvalReport

    def to_text(self) -> str:
        lines = [f"{'cat':<4}{'MAE 3-pt':>10}{'MAE 1-pt':>10}"]
        for r in self.three_point.rows:
            lines.append(f"{r.category:<4}{r.level_mae:>10.4f}{self.one_point.mae(r.category):>10.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["category", "mae_3pt", "mae_1pt", "acc_3pt", "acc_1pt", "n_samples"])
        for r in self.three_point.rows:
            o = self.one_point.row(r.category)
            w.writerow([r.category, repr(r.level_mae), repr(o.level_mae), repr(r.class_accuracy),
                        repr(o.class_accuracy), r.n_samples])
        return out.getvalue()


def ablate_points(
    data: FeatureTable,
    splits: Splits,
    model_config: ModelConfig,
    train_config: TrainConfig,
    categories=("a", "b"),
) -> tuple[AblationReport, TrainResult, TrainResult]:
    """Train 3-point and point-0-only models with the same seeds and budget."""
    cfg1 = replace(model_config, n_points=1)
    res3 = train(data, splits.train, splits.validation, model_config, train_config)
    res1 = train(data, splits.train, splits.validation, cfg1, train_config, points=(0,))
    rep3 = evaluate(res3.model, data, splits, categories)
    rep1 = evaluate(res1.model, data, splits, categories, points=(0,))
    return AblationReport(rep3, rep1), res3, res1


# ---------------------------------------------------------------------- PCA


@dataclass
class LatentProjection:
    points: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    levels: np.ndarray
    classes: np.ndarray
    fit_mask: np.ndarray
    mean: np.ndarray


@torch.no_grad()
def cls_embeddings(model: VibrationTransformer, mags: np.ndarray, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, mags.shape[0], batch_size):
        out.append(model.embed(as_tensor(prepare_batch(mags[s : s + batch_size]))).numpy())
    return np.concatenate(out)


def pca_fit(x: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, top-``k`` covariance eigenvectors (rows) and explained-variance ratios."""
    if x.shape[0] < 4:
        raise ValueError("PCA needs at least 4 samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], 0.0, None), v[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(v[np.abs(v).argmax(axis=0), np.arange(v.shape[1])])
    v = v * np.where(signs == 0, 1.0, signs)
    total = w.sum()
    return mu, v[:, :k].T, (w[:k] / total if total > 0 else np.zeros(k))


def latent_pca(model, data: FeatureTable, fit_idx, extra_idx=()) -> LatentProjection:
    """Fit PCA on ``fit_idx`` CLS embeddings and project those plus ``extra_idx``."""
    fit_idx = np.asarray(fit_idx, dtype=np.int64)
    extra_idx = np.asarray(extra_idx, dtype=np.int64)
    if fit_idx.size < 4:
        raise ValueError("PCA needs at least 4 samples")
    all_idx = np.concatenate([fit_idx, extra_idx])
    emb = cls_embeddings(model, data.magnitudes[all_idx])
    mu, comps, evr = pca_fit(emb[: fit_idx.size])
    pts = (emb - mu) @ comps.T
    mask = np.zeros(all_idx.size, dtype=bool)
    mask[: fit_idx.size] = True
    return LatentProjection(pts, comps, evr, data.levels[all_idx], data.classes[all_idx], mask, mu)


def level_silhouette(proj: LatentProjection) -> float:
    from sklearn.metrics import silhouette_score

    p = proj.points[proj.fit_mask]
    labels = np.round(proj.levels[proj.fit_mask] * 1000).astype(int)
    if np.unique(labels).size < 2:
        raise ValueError("silhouette needs at least two level groups")
    return float(silhouette_score(p, labels))


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(float(ab @ ab), 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def between_fraction(proj: LatentProjection, levels=LEVELS) -> float:
    """Share of off-grid samples whose nearest centroid segment joins their two neighbouring levels.

    Candidate segments join consecutive level centroids (computed from the
    fitted, on-grid samples).
    """
    lv = np.asarray(levels)
    fit_lv = proj.levels[proj.fit_mask]
    cents = np.stack([proj.points[proj.fit_mask][np.isclose(fit_lv, x)].mean(axis=0) for x in lv])
    off = ~proj.fit_mask & ~np.isclose(proj.levels[:, None], lv[None]).any(axis=1)
    p, l_true = proj.points[off], proj.levels[off]
    if p.shape[0] == 0:
        raise ValueError("no off-grid samples to check")
    d = np.stack([_segment_distance(p, cents[j], cents[j + 1]) for j in range(lv.size - 1)], axis=1)
    want = np.searchsorted(lv, l_true) - 1
    return float(np.mean(d.argmin(axis=1) == want))


# ------------------------------------------------------------------- output


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "vibrosense"
    return plt


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_training_curve(history: list[dict], path) -> None:
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["train_loss"] for h in history], label="train loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [h["val_mae"] for h in history], color="tab:orange", label="val MAE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("MAE")
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


def plot_spectra(data: FeatureTable, idx, path) -> None:
    plt = _svg_figure()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    f = data.grid.frequencies
    for i in idx:
        ax.semilogy(f, data.magnitudes[i, 0, 0] + 1e-12, lw=0.6, label=data.rows[i].sample_id if data.rows else str(i))
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("|S| (point 0, x)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


def plot_pca(proj: LatentProjection, path) -> None:
    plt = _svg_figure()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (label, values) in zip(axes, (("level", proj.levels), ("class", proj.classes))):
        sc = ax.scatter(proj.points[:, 0], proj.points[:, 1], c=values, s=4, cmap="viridis")
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        ax.set_title(f"CLS tokens by {label}")
        fig.colorbar(sc, ax=ax)
    fig.tight_layout()
    save_svg(fig, path)
    plt.close(fig)


def emit_report(report: EvalReport, out_dir, stem: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    txt_path.write_text(report.to_text(), encoding="utf-8")
    return [csv_path, txt_path]
