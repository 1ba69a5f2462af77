import json

import pytest

from vibrosense import cli, formats

TINY = """\
n_classes = 2
n_instances = 1
heldout_instances = 1
levels = 0.0, 0.2, 0.4, 0.6, 0.8, 1.0
interm_levels = 0.5,
train_excitations = chirp,
heldout_excitations = ambient_surrogate,
n_speakers = 2
duration_s = 0.25
d_model = 16
n_layers_point = 1
n_layers_shape = 1
n_heads = 2
head_hidden = 8
epochs = 2
batch_size = 8
lr = 1e-3
n_pairs = 40
"""


def run(*argv):
    assert cli.main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    for tag in ("1", "2"):
        d = root / tag
        d.mkdir()
        run("synth", "--recipe", cfg, "--seed", 3, "--out", d / "data")
        run("train", "--data", d / "data", "--config", cfg, "--seed", 3, "--out", d / "m.vtck")
    return root, cfg


def files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_and_train_are_byte_identical(workspace):
    root, _ = workspace
    a, b = files(root / "1"), files(root / "2")
    assert a.keys() == b.keys()
    assert a == b
    assert (root / "1" / "m.log.csv").read_text().startswith("epoch,train_loss,val_mae,val_class_acc")


@pytest.mark.parametrize(
    "cmd, extra",
    [
        ("eval", ("--data", "{d}/data", "--ckpt", "{d}/m.vtck")),
        ("pca", ("--data", "{d}/data", "--ckpt", "{d}/m.vtck")),
        ("ablate", ("--data", "{d}/data")),
        ("featurize", ("--in", "{d}/data")),
        ("bench", ()),
        ("simulate", ()),
    ],
)
def test_commands_are_deterministic(workspace, cmd, extra):
    root, cfg = workspace
    outs = []
    for tag in ("1", "2"):
        d = root / tag
        out = d / f"{cmd}.out"
        args = [a.format(d=d) for a in extra]
        run(cmd, *args, "--config", cfg, "--seed", 5, "--out", out)
        outs.append({p.name: p.read_bytes() for p in sorted(d.glob(f"{cmd}.*")) if p.is_file()}
                    if out.is_file() else files(out))
    if cmd == "bench":  # wall-clock timings live in a side file and are excluded
        for o in outs:
            o.pop("bench.timing.json")
    assert outs[0] and outs[0] == outs[1]


def test_extract_and_predict(workspace):
    root, cfg = workspace
    d = root / "1"
    run("simulate", "--config", cfg, "--seed", 1, "--out", d / "s.vsfq")
    for tag in ("a", "b"):
        run("extract", "--in", d / "s.vsfq", "--out", d / f"s{tag}.vsig")
    assert (d / "sa.vsig").read_bytes() == (d / "sb.vsig").read_bytes()
    sigs = formats.read_signals(d / "sa.vsig")
    assert len(sigs) == 3

    sample = next((d / "data" / "signals").iterdir())
    run("featurize", "--in", sample, "--out", d / "one.vspc")
    for src, tag in ((sample, "sig"), (d / "one.vspc", "feat")):
        run("predict", "--ckpt", d / "m.vtck", "--in", src, "--out", d / f"p_{tag}.json")
    a = json.loads((d / "p_sig.json").read_text())
    b = json.loads((d / "p_feat.json").read_text())
    assert a["class"] == b["class"] and abs(sum(a["level_probs"]) - 1) < 1e-6
    assert a["l_map"] in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def test_eval_report_carries_hashes(workspace):
    root, cfg = workspace
    d = root / "1"
    run("eval", "--data", d / "data", "--ckpt", d / "m.vtck", "--out", d / "rep")
    text = (d / "rep" / "report.csv").read_text()
    assert "# checkpoint_sha256=" in text and "# dataset_sha256=" in text
    assert "# ambient=pink-noise surrogate" in text


def test_bad_input_returns_error_code(tmp_path):
    (tmp_path / "junk").write_bytes(b"nope")
    assert cli.main(["extract", "--in", str(tmp_path / "junk"), "--out", str(tmp_path / "o")]) == 2
