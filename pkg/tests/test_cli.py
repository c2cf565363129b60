import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from scinets.cli import MANIFEST, main, pca_2d
from scinets.tensorfile import load_tensor


def run(*argv):
    return main([str(a) for a in argv])


def same_tree(a, b):
    """Byte-compare every file except the run manifest (it records wall time)."""
    names = sorted(n for n in os.listdir(a) if n != MANIFEST)
    assert names == sorted(n for n in os.listdir(b) if n != MANIFEST)
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> build -> train -> predict for two seeds, each run twice."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 12, "--tile", 16, "--noise", 0.05, "--seed", 4, "--out", root / "data") == 0
    arch = write(root / "arch.json", {"arch": "smsnet", "hidden_nodes": 4, "hidden_channels": 2, "c_out": 2})
    train_cfg = write(root / "train.json", {
        "epochs": 2, "batch_size": 4, "learning_rate": 0.01, "binary": True,
        "loss": {"name": "dice"}, "split": {"level": "pixel", "fractions": [0.8, 0.2]}})
    for seed in (1, 2):
        for rep in ("a", "b"):
            out = root / f"train{seed}{rep}"
            assert run("train", "--config", train_cfg, "--arch", arch, "--data", root / "data",
                       "--seed", seed, "--out", out) == 0
            assert run("predict", "--checkpoint", out / "model", "--data", root / "data",
                       "--out", root / f"pred{seed}{rep}") == 0
    return root


def test_gen_data_deterministic(tmp_path):
    assert run("gen-data", "--n", 4, "--seed", 1, "--out", tmp_path / "a", "--png", 4) == 0
    assert run("gen-data", "--n", 4, "--seed", 1, "--out", tmp_path / "b", "--png", 4) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert run("gen-data", "--n", 4, "--seed", 2, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a/images.dltn").read_bytes() != (tmp_path / "c/images.dltn").read_bytes()
    manifest = json.loads((tmp_path / "a" / MANIFEST).read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 1


def test_build_reports_msdnet_count(tmp_path, capsys):
    cfg = write(tmp_path / "msd.json", {"arch": "msdnet", "depth": 200, "max_dilation": 10})
    assert run("build", "--config", cfg, "--out", tmp_path / "b") == 0
    assert "params=181702" in capsys.readouterr().out.splitlines()
    assert (tmp_path / "b/arch.dot").read_text().startswith("digraph")


def test_build_smsnet_seed(tmp_path):
    cfg = write(tmp_path / "s.json", {"arch": "smsnet", "hidden_nodes": 10})
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        assert run("build", "--config", cfg, "--seed", seed, "--out", tmp_path / name) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert (tmp_path / "a/arch.json").read_bytes() != (tmp_path / "c/arch.json").read_bytes()


def test_graph_accepts_spec_or_config(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", {"arch": "smsnet", "hidden_nodes": 5, "seed": 17})
    assert run("graph", "--config", cfg) == 0
    dot = capsys.readouterr().out
    assert run("build", "--config", cfg, "--out", tmp_path / "b") == 0
    assert run("graph", "--config", tmp_path / "b/arch.json", "--out", tmp_path / "g.dot") == 0
    assert (tmp_path / "g.dot").read_text() == dot


def test_train_and_predict_deterministic(pipeline):
    for seed in (1, 2):
        assert same_tree(pipeline / f"train{seed}a", pipeline / f"train{seed}b")
        assert same_tree(pipeline / f"pred{seed}a", pipeline / f"pred{seed}b")
    assert (pipeline / "train1a/model.dlsa").read_bytes() != (pipeline / "train2a/model.dlsa").read_bytes()
    header = (pipeline / "train1a/history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,metric,lr"
    probs = load_tensor(pipeline / "pred1a/probs.dltn")
    assert probs.shape == (12, 2, 16, 16)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_ensemble_subset(pipeline, capsys):
    models = [pipeline / f"pred{s}a/probs.dltn" for s in (1, 2)]
    for rep in ("x", "y"):
        assert run("ensemble", "--models", *models, "--tau", 0.5, "--out", pipeline / f"ens{rep}") == 0
    assert same_tree(pipeline / "ensx", pipeline / "ensy")
    kept = load_tensor(pipeline / "ensx/mask.dltn").astype(bool)
    plain = load_tensor(pipeline / "ensx/mean_mask.dltn").astype(bool)
    assert not (kept & ~plain).any()
    assert "kept_subset_of_mean=True" in capsys.readouterr().out


def test_conformal_stage(pipeline, capsys):
    for rep in ("x", "y"):
        assert run("conformal", "--models", pipeline / "pred1a/probs.dltn", "--data", pipeline / "data",
                   "--alpha", 0.1, "--seed", 3, "--out", pipeline / f"conf{rep}") == 0
    assert same_tree(pipeline / "confx", pipeline / "confy")
    doc = json.loads((pipeline / "confx/calibration.json").read_text())
    assert 0 <= doc["qhat"] <= 1 and doc["n_cal"] > 0
    assert load_tensor(pipeline / "confx/sets.dltn").dtype == np.uint8


def test_latent_stage(tmp_path):
    assert run("gen-data", "--n", 6, "--tile", 16, "--seed", 2, "--out", tmp_path / "d") == 0
    arch = write(tmp_path / "ae.json", {"arch": "autoencoder", "depth": 2, "base_channels": 2,
                                        "latent_len": 3, "m": 16, "n": 16})
    cfg = write(tmp_path / "t.json", {"epochs": 1, "batch_size": 3, "loss": {"name": "mse"},
                                      "task": "reconstruction", "split": {"level": "image", "fractions": [0.5, 0.5]}})
    assert run("train", "--config", cfg, "--arch", arch, "--data", tmp_path / "d", "--out", tmp_path / "m") == 0
    for rep in ("a", "b"):
        assert run("latent", "--checkpoint", tmp_path / "m/model.dlsa", "--data", tmp_path / "d",
                   "--out", tmp_path / f"lat{rep}") == 0
    assert same_tree(tmp_path / "lata", tmp_path / "latb")
    rows = (tmp_path / "lata/latent.csv").read_text().splitlines()
    assert rows[0] == "index,class,z0,z1,z2" and len(rows) == 7
    assert (tmp_path / "lata/pca.csv").read_text().splitlines()[0] == "index,class,pc1,pc2"
    assert run("predict", "--checkpoint", tmp_path / "m/model", "--data", tmp_path / "d",
               "--out", tmp_path / "rec") == 0
    assert load_tensor(tmp_path / "rec/recon.dltn").shape == (6, 1, 16, 16)


def test_pca_matches_svd_variance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(200, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
    p = pca_2d(z)
    assert abs(np.corrcoef(p[:, 0], p[:, 1])[0, 1]) < 1e-10
    assert p[:, 0].var() >= p[:, 1].var()
    assert p[:, 0].var() == pytest.approx(np.linalg.eigvalsh(np.cov(z.T, bias=True))[-1], rel=1e-10)


def test_exit_codes(tmp_path, capsys):
    assert run() == 1
    assert run("bogus") == 1
    assert run("build") == 1
    assert run("build", "--config", tmp_path / "missing.json") == 3
    bad = write(tmp_path / "bad.json", {"arch": "msdnet", "depth": 0})
    assert run("build", "--config", bad) == 2
    unknown = write(tmp_path / "u.json", {"arch": "msdnet", "depth": 2, "extra": 1})
    assert run("build", "--config", unknown) == 2
    (tmp_path / "x.dltn").write_bytes(b"DLTN\x01")
    assert run("ensemble", "--models", tmp_path / "x.dltn", "--out", tmp_path / "e") == 3
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln]
    assert all(ln.startswith("error[") for ln in lines)
    assert len(lines) == 7


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DLSIA_THREADS", "0")
    assert run("gen-data", "--n", 1, "--out", tmp_path) == 2
    monkeypatch.setenv("DLSIA_THREADS", "2")
    assert run("gen-data", "--n", 1, "--out", tmp_path) == 0


def test_module_help_lists_defaults():
    for sub in ("gen-data", "train", "ensemble", "conformal"):
        out = subprocess.run([sys.executable, "-m", "scinets", sub, "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "--seed" in out.stdout and "default" in out.stdout
