"""``vibrosense`` command-line entry point.

Every subcommand accepts ``--seed``, ``--config`` (flat ``key = value``
file) and ``--out``. Outputs depend only on (config, seed); wall-clock
timings from ``bench`` go to a separate ``*.timing.json`` file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import formats

log = logging.getLogger("vibrosense")

DESK_LR = 3e-4


def _pick(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _recipe(cfg: dict, seed):
    from .modal_synth import DatasetRecipe

    d = _pick(cfg, DatasetRecipe)
    for k in ("levels", "interm_levels", "train_excitations", "heldout_excitations", "hard_classes"):
        if k in d and not isinstance(d[k], tuple):
            d[k] = (d[k],)
    if d.get("hard_classes") == "all":
        d["hard_classes"] = tuple(range(d.get("n_classes", 8)))
    r = DatasetRecipe(**d)
    return replace(r, seed=seed) if seed is not None else r


def model_and_train_config(cfg: dict, seed=None, k_cont: int | None = None):
    from .model import ModelConfig
    from .training import TrainConfig

    m = _pick(cfg, ModelConfig)
    if k_cont is not None:
        m.setdefault("k_cont", k_cont)
    t = {"lr": DESK_LR, **_pick(cfg, TrainConfig)}
    if seed is not None:
        t["seed"] = seed
    return ModelConfig(**m), TrainConfig.from_dict(t)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_simulate(args, cfg):
    """Speckle frames for one synthetic container sample."""
    from .modal_synth import Excitation, make_class, synthesize_response
    from .pipeline import render_signals

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    model = make_class(int(cfg.get("class_id", 0)), seed=seed)
    e = Excitation(
        cfg.get("excitation", "chirp"),
        float(cfg.get("duration_s", 0.5)),
        float(cfg.get("f_samp_hz", 5100.0)),
        seed=seed,
    )
    sample = synthesize_response(model, float(cfg.get("level", 0.4)), e)
    sig = np.stack([s.samples for s in sample.signals])
    seq = render_signals(
        sig,
        e.f_samp_hz,
        patch_px=int(cfg.get("patch_px", 32)),
        grain_size_px=float(cfg.get("grain_size_px", 3.0)),
        noise_sigma=float(cfg.get("noise_sigma", 0.02)),
        seed=seed,
    )
    formats.write_frames(args.out, seq)
    log.info("wrote %d frames x %d points to %s", seq.n_frames, seq.n_points, args.out)


def cmd_extract(args, cfg):
    from .shift_estimation import pclk_batch

    seq = formats.read_frames(args.input)
    res = pclk_batch(seq, window=bool(cfg.get("window", True)), chunk=int(cfg.get("chunk", 128)))
    formats.write_signals(args.out, res.signals)
    for i, n in sorted(res.failures.items()):
        log.warning("point %d: %d failed pairs held at last value", i, n)


def cmd_synth(args, cfg):
    from .modal_synth import build_dataset

    ds = build_dataset(_recipe(cfg, args.seed), out_dir=args.out)
    log.info("synthesized %d samples into %s", len(ds.rows), args.out)


def cmd_featurize(args, cfg):
    from .spectral import featurize

    src = Path(args.input)
    if src.is_dir():
        from .evaluation import load_dataset

        ds = load_dataset(src)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r in ds.rows:
            feats = [featurize(s) for s in formats.read_signals(src / r.path)]
            formats.write_features(out / f"{r.sample_id}.vspc", feats)
    else:
        formats.write_features(args.out, [featurize(s) for s in formats.read_signals(src)])


def _load_table(data_dir):
    from .evaluation import featurize_dataset, load_dataset, split_dataset

    ds = load_dataset(data_dir)
    table = featurize_dataset(ds)
    return ds, table, split_dataset(ds.rows, ds.recipe)


def cmd_train(args, cfg):
    from .evaluation import dataset_hash, plot_training_curve
    from .training import save_checkpoint, train, write_log

    ds, table, splits = _load_table(args.data)
    mcfg, tcfg = model_and_train_config(cfg, args.seed, k_cont=ds.recipe.n_classes)
    res = train(table, splits.train, splits.validation, mcfg, tcfg)
    out = Path(args.out)
    meta = {"train": tcfg.to_dict(), "dataset_sha256": dataset_hash(ds.rows, ds.recipe), "best_epoch": res.best_epoch}
    digest = save_checkpoint(out, res.model, meta)
    write_log(out.with_suffix(".log.csv"), res.log)
    plot_training_curve(res.log, out.with_suffix(".curve.svg"))
    log.info("checkpoint %s (best epoch %d, val MAE %.4f)", digest[:12], res.best_epoch, res.best_val_mae)


def cmd_eval(args, cfg):
    from .evaluation import dataset_hash, emit_report, evaluate
    from .training import load_checkpoint

    model, _, digest = load_checkpoint(args.ckpt)
    ds, table, splits = _load_table(args.data)
    meta = {"checkpoint_sha256": digest, "dataset_sha256": dataset_hash(ds.rows, ds.recipe),
            "recipe_seed": ds.recipe.seed}
    report = evaluate(model, table, splits, metadata=meta)
    emit_report(report, args.out)
    sys.stdout.write(report.to_text())


def cmd_ablate(args, cfg):
    from .evaluation import ablate_points

    ds, table, splits = _load_table(args.data)
    mcfg, tcfg = model_and_train_config(cfg, args.seed, k_cont=ds.recipe.n_classes)
    rep, _, _ = ablate_points(table, splits, mcfg, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(rep.to_csv(), encoding="utf-8")
    (out / "ablation.txt").write_text(rep.to_text(), encoding="utf-8")
    sys.stdout.write(rep.to_text())


def cmd_pca(args, cfg):
    from .evaluation import between_fraction, latent_pca, level_silhouette, plot_pca
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    ds, table, splits = _load_table(args.data)
    extra = splits.test("c") if "c" not in splits.unavailable else []
    proj = latent_pca(model, table, splits.train, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "pca_points.csv", np.column_stack([proj.points, proj.levels, proj.classes]),
               delimiter=",", header="pc1,pc2,pc3,level,class", comments="", fmt="%.17g")
    summary = {
        "explained_variance_ratio": [float(x) for x in proj.explained_variance_ratio],
        "level_silhouette": level_silhouette(proj),
        "between_fraction": between_fraction(proj) if len(extra) else None,
    }
    _write_json(out / "pca_summary.json", summary)
    plot_pca(proj, out / "pca.svg")


def cmd_predict(args, cfg):
    from .model import predict
    from .spectral import featurize, preprocess_magnitudes
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    src = Path(args.input)
    with open(src, "rb") as fh:
        magic = fh.read(4)
    if magic == b"VSPC":
        feats = formats.read_features(src)
    else:
        feats = [featurize(s) for s in formats.read_signals(src)]
    feats = sorted(feats, key=lambda f: f.point_index)
    x, _ = preprocess_magnitudes(np.stack([f.magnitudes for f in feats])[None])
    (p,) = predict(model, x)
    _write_json(
        Path(args.out),
        {
            "class": int(np.argmax(p.class_logits)),
            "class_logits": [float(v) for v in p.class_logits],
            "level_probs": [float(v) for v in p.level_probs],
            "l_map": p.l_map,
            "l_exp": p.l_exp,
        },
    )


def cmd_bench(args, cfg):
    from .shift_estimation import pclk_pairs_parallel, pclk_many
    from .speckle_sim import generate_speckle, shift_image

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n = int(cfg.get("n_pairs", 2000))
    size = int(cfg.get("size", 32))
    rng = np.random.default_rng(seed)
    a = np.empty((n, size, size))
    b = np.empty_like(a)
    truth = rng.uniform(-2, 2, (n, 2))
    for k in range(n):
        base = generate_speckle(int(rng.integers(2**31)), (size, size), 3.0).intensity
        a[k] = base + 0.02 * base.mean() * rng.standard_normal(base.shape)
        b[k] = shift_image(base, truth[k]) + 0.02 * base.mean() * rng.standard_normal(base.shape)

    t0 = time.perf_counter()
    serial = np.concatenate([pclk_many(a[k : k + 1], b[k : k + 1])["delta"] for k in range(n)])
    t1 = time.perf_counter()
    batch = pclk_pairs_parallel(a, b)["delta"]
    t2 = time.perf_counter()
    out = Path(args.out)
    _write_json(
        out,
        {
            "n_pairs": n,
            "size": size,
            "max_batch_serial_diff_px": float(np.abs(batch - serial).max()),
            "rmse_px": float(np.sqrt(np.mean(np.sum((batch - truth) ** 2, axis=1)))),
        },
    )
    timing = {"serial_s": t1 - t0, "batch_s": t2 - t1, "speedup": (t1 - t0) / max(t2 - t1, 1e-12)}
    _write_json(out.with_suffix(".timing.json"), timing)
    log.info("serial %.2fs batch %.2fs speedup %.1fx", timing["serial_s"], timing["batch_s"], timing["speedup"])


COMMANDS = {
    "simulate": (cmd_simulate, "render speckle frames for a synthetic container", ()),
    "extract": (cmd_extract, "recover vibration signals from frames", ("input",)),
    "synth": (cmd_synth, "synthesize a labelled signal dataset", ()),
    "featurize": (cmd_featurize, "spectral features from signals or a dataset", ("input",)),
    "train": (cmd_train, "train a model on a dataset", ("data",)),
    "eval": (cmd_eval, "per-category evaluation report", ("data", "ckpt")),
    "ablate": (cmd_ablate, "3-point versus 1-point ablation", ("data",)),
    "pca": (cmd_pca, "CLS-token PCA", ("data", "ckpt")),
    "predict": (cmd_predict, "class and level for one sample", ("ckpt", "input")),
    "bench": (cmd_bench, "batched versus serial shift estimation", ()),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibrosense")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text, inputs) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=None)
        # synth reads its recipe as the config file
        config_flags = ("--config", "--recipe") if name == "synth" else ("--config",)
        sp.add_argument(*config_flags, dest="config", default=None)
        sp.add_argument("--out", required=True)
        for inp in inputs:
            if inp == "input":
                flags = ("--in", "--frames") if name == "extract" else ("--in",)
                sp.add_argument(*flags, dest="input", required=True)
            else:
                sp.add_argument(f"--{inp}", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = formats.load_config(args.config)
    try:
        COMMANDS[args.command][0](args, cfg)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
