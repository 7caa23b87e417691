import json
import os
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cgcnet import cli
from cgcnet.config import parse_config
from cgcnet.graph import load_bundle
from cgcnet.model import init_params
from cgcnet.netpbm import write_pnm
from cgcnet.training import load_checkpoint
from cgcnet.viz import cluster_color

SVG = "{http://www.w3.org/2000/svg}"
TINY_MODEL = "[model]\nhidden_dims = [8, 8]\nlstm_hidden = 4\ncluster_sizes = [6, 2]\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--per-class", 2, "--out", root / "data", "--seed", 3, "--write-images") == 0
    (root / "model.ini").write_text(TINY_MODEL)
    assert run("train", "--data", root / "data", "--model-config", root / "model.ini", "--out", root / "ckpt", "--epochs", 2) == 0
    return root


def test_print_config(capsys):
    assert run("--print-config") == 0
    cfgs = parse_config(capsys.readouterr().out)
    assert set(cfgs) == {"model", "train", "sampler", "edges", "synth"}


def test_no_command():
    assert run() == 2


def test_synth_layout(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["train"]) == 4 and len(manifest["test"]) == 2
    for name in manifest["train"] + manifest["test"]:
        assert sorted(os.listdir(workspace / "data" / name)) == ["edges.csv", "image.pgm", "labels.pgm", "meta.json", "nodes.csv"]


def test_synth_seed_reuse_is_identical(workspace, tmp_path):
    assert run("synth", "--per-class", 2, "--out", tmp_path / "again", "--seed", 3, "--write-images") == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(workspace / "data")


def test_synth_usage_errors(tmp_path):
    assert run("synth", "--per-class", 0, "--out", tmp_path / "x") == 2
    assert run("synth", "--per-class", 1, "--classes", 4, "--out", tmp_path / "x") == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("synth", "--per-class", 1, "--out", blocker / "sub") == 2


def test_build_graph(workspace, tmp_path, capsys):
    src = workspace / "data" / "img00000"
    args = ("build-graph", "--labels", src / "labels.pgm", "--image", src / "image.pgm", "--seed", 11)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert capsys.readouterr().out.startswith("nodes 105 edges ")
    assert run(*args, "--out", tmp_path / "b") == 0
    assert sorted(os.listdir(tmp_path / "a")) == ["edges.csv", "meta.json", "nodes.csv"]
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_build_graph_errors(workspace, tmp_path, capsys):
    write_pnm(tmp_path / "empty.pgm", np.zeros((20, 20), np.uint16), maxval=65535)
    write_pnm(tmp_path / "img.pgm", np.zeros((20, 20), np.uint8))
    write_pnm(tmp_path / "small.pgm", np.zeros((10, 20), np.uint8))
    assert run("build-graph", "--labels", tmp_path / "empty.pgm", "--image", tmp_path / "img.pgm", "--out", tmp_path / "o") == 1
    assert "empty graph" in capsys.readouterr().err
    assert not (tmp_path / "o" / "meta.json").exists()
    assert run("build-graph", "--labels", tmp_path / "empty.pgm", "--image", tmp_path / "small.pgm", "--out", tmp_path / "o") == 2
    assert run("build-graph", "--labels", tmp_path / "nope.pgm", "--image", tmp_path / "img.pgm", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[edges]\nk_max = 0\n")
    src = workspace / "data" / "img00000"
    assert run("build-graph", "--labels", src / "labels.pgm", "--image", src / "image.pgm", "--out", tmp_path / "o",
               "--config", bad) == 2


def test_train_outputs(workspace):
    assert (workspace / "ckpt" / "manifest.json").exists()
    lines = (workspace / "ckpt" / "epochs.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[-1])["val_acc"] is not None


def test_train_errors(workspace, tmp_path):
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "c") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ncluster_sizes = [2, 6]\n")
    assert run("train", "--data", workspace / "data", "--model-config", bad, "--out", tmp_path / "c") == 2


def test_train_zero_epochs_is_initialisation(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--model-config", workspace / "model.ini", "--out", tmp_path / "c",
               "--epochs", 0, "--seed", 2) == 0
    ckpt = load_checkpoint(tmp_path / "c")
    init = init_params(ckpt.model_cfg, np.random.default_rng(np.random.SeedSequence(2).spawn(3)[0]))
    assert all(np.array_equal(t.data, init[k].data) for k, t in ckpt.store.items())


def test_train_reproducible(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--model-config", workspace / "model.ini", "--out", tmp_path / "c",
               "--epochs", 2) == 0
    a = {k: v for k, v in tree_bytes(workspace / "ckpt").items() if k != "epochs.jsonl"}
    b = {k: v for k, v in tree_bytes(tmp_path / "c").items() if k != "epochs.jsonl"}
    assert a == b


def test_predict(workspace, capsys):
    assert run("predict", "--graph", workspace / "data" / "img00001", "--ckpt", workspace / "ckpt") == 0
    (line,) = capsys.readouterr().out.splitlines()
    rec = json.loads(line)
    assert len(rec["probabilities"]) == 3 and abs(sum(rec["probabilities"]) - 1) < 1e-9
    assert rec["class"] == int(np.argmax(rec["probabilities"]))


def test_predict_errors(workspace, tmp_path):
    assert run("predict", "--graph", workspace / "data" / "img00001", "--ckpt", tmp_path / "none") == 2
    assert run("predict", "--graph", tmp_path / "none", "--ckpt", workspace / "ckpt") == 2


def test_predict_group_by_image(workspace, tmp_path, capsys, monkeypatch):
    from cgcnet.graph import save_bundle

    g = load_bundle(workspace / "data" / "img00000")
    for i in range(3):
        g.meta["image_id"] = "slide"
        save_bundle(g, tmp_path / "patches" / f"p{i}")
    fixed = [np.array([0.8, 0.1, 0.1]), np.array([0.5, 0.3, 0.2]), np.array([0.1, 0.7, 0.2])]
    monkeypatch.setattr(cli, "predict", lambda graphs, ckpt: fixed[: len(graphs)])
    assert run("predict", "--graph", tmp_path / "patches", "--ckpt", workspace / "ckpt", "--group-by-image") == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [l["class"] for l in lines[:3]] == [0, 0, 1]
    assert lines[3] == {"image": "slide", "class": 0, "patches": 3}


def circles(path):
    root = ET.parse(path).getroot()
    return root.findall(f".//{SVG}circle")


def test_viz_clusters(workspace, tmp_path):
    graph_dir = workspace / "data" / "img00002"
    n = load_bundle(graph_dir).n
    for stage in (1, 2):
        out = tmp_path / f"s{stage}.svg"
        assert run("viz-clusters", "--graph", graph_dir, "--ckpt", workspace / "ckpt", "--stage", stage, "--out", out) == 0
        cs = circles(out)
        assert len(cs) == n
        assert all(c.get("fill") == cluster_color(int(c.get("data-cluster"))) for c in cs)
        assert run("viz-clusters", "--graph", graph_dir, "--ckpt", workspace / "ckpt", "--stage", stage,
                   "--out", tmp_path / "again.svg") == 0
        assert out.read_bytes() == (tmp_path / "again.svg").read_bytes()
    assert max(int(c.get("data-cluster")) for c in circles(tmp_path / "s2.svg")) < 2
    assert run("viz-clusters", "--graph", graph_dir, "--ckpt", workspace / "ckpt", "--stage", 3, "--out", tmp_path / "x.svg") == 2


def test_viz_single_cluster_model(workspace, tmp_path):
    (tmp_path / "one.ini").write_text("[model]\nhidden_dims = [4]\nlstm_hidden = 2\ncluster_sizes = [1]\n")
    assert run("train", "--data", workspace / "data", "--model-config", tmp_path / "one.ini", "--out", tmp_path / "c", "--epochs", 0) == 0
    assert run("viz-clusters", "--graph", workspace / "data" / "img00000", "--ckpt", tmp_path / "c", "--out", tmp_path / "o.svg") == 0
    assert len({c.get("fill") for c in circles(tmp_path / "o.svg")}) == 1


def test_cluster_colours_distinct_and_stable():
    cols = [cluster_color(i) for i in range(20)]
    assert len(set(cols)) == 20 and cols == [cluster_color(i) for i in range(20)]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cgcnet", "--print-config"], capture_output=True, text=True)
    assert res.returncode == 0 and "[model]" in res.stdout
