import hashlib
import json

import numpy as np
import pytest

from meshdeform.cli import main
from meshdeform.mesh import read_obj
from meshdeform.metrics import dice
from meshdeform.volume import read_rvol, voxelize

TINY = ["--filters", "4,4,8", "--block-dims", "8,6,4", "--subdivisions", "1"]


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--scenes", "3", "--val-scenes", "1", "--dims", "16", "--seed", "5", "--out", str(out)]) == 0
    return out


def test_gen_data_deterministic(tmp_path):
    args = ["gen-data", "--scenes", "4", "--structures", "2", "--dims", "32", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["split"] == {"train": [0, 1, 2], "val": [3]}


def test_convert_then_evaluate_matches_direct_voxelize(tmp_path, tiny_dataset):
    scene = tiny_dataset / "scene_0"
    out = tmp_path / "x.rvol"
    assert main(["convert", "--mesh", str(scene / "gt_s0.obj"), "--ref", str(scene / "image.rvol"), "--out", str(out)]) == 0
    report = tmp_path / "r.json"
    assert main(["evaluate", "--pred-mask", str(out), "--truth-mask", str(scene / "occupancy_s0.rvol"),
                 "--out", str(report)]) == 0
    direct = dice(voxelize(read_obj(scene / "gt_s0.obj"), read_rvol(scene / "image.rvol")),
                  read_rvol(scene / "occupancy_s0.rvol"))
    assert json.loads(report.read_text())["dice"] == pytest.approx(direct, abs=1e-12)
    mesh_out = tmp_path / "iso.obj"
    assert main(["convert", "--volume", str(scene / "occupancy.rvol"), "--iso", "0.5", "--out", str(mesh_out)]) == 0
    assert read_obj(mesh_out).is_watertight()


def test_exit_codes(tmp_path, tiny_dataset, capsys):
    assert main(["gen-data", "--scenes", "many"]) == 1
    assert main(["no-such-command"]) == 1
    assert main([]) == 1
    assert main(["convert", "--mesh", str(tmp_path / "missing.obj"), "--ref", "x", "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "meshdeform: error:" in err and ".py:" in err
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nf 1 2 3\n")
    assert main(["convert", "--mesh", str(bad), "--ref", str(tiny_dataset / "scene_0" / "image.rvol"),
                 "--out", str(tmp_path / "o.rvol")]) == 2
    assert main(["train", "--data", str(tiny_dataset), "--epochs", "2", "--lr", "1e30", "--quiet",
                 "--out", str(tmp_path / "nan"), *TINY]) == 3


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[global]\nseed = 3\n\n[gen-data]\nscenes = 2\nval-scenes = 1\ndims = 16\nstructures = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 3 and m["n_scenes"] == 2 and m["n_structures"] == 1
    assert main(["gen-data", "--config", str(cfg), "--scenes", "3", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["n_scenes"] == 3
    cfg.write_text("[gen-data]\nbogus = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 1


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("MESHDEFORM_OUT_DIR", str(tmp_path))
    assert main(["gen-data", "--scenes", "2", "--val-scenes", "1", "--dims", "16", "--structures", "1"]) == 0
    assert (tmp_path / "data" / "manifest.json").exists()
    monkeypatch.delenv("MESHDEFORM_OUT_DIR")
    assert main(["gen-data", "--scenes", "2", "--val-scenes", "1", "--dims", "16"]) == 1


def test_train_predict_evaluate_postprocess(tmp_path, tiny_dataset, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(tiny_dataset), "--epochs", "2", "--out", str(run), *TINY]) == 0
    assert (run / "best.ckpt").exists() and (run / "resolved_config.json").exists()
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["epochs"] == 2 and resolved["filters"] == [4, 4, 8]

    scene = tiny_dataset / "scene_2"
    pred = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--image", str(scene / "image.rvol"),
                 "--out", str(pred)]) == 0
    names = sorted(p.name for p in pred.iterdir())
    assert names == sorted([f"block{b}_s{k}.obj" for b in range(3) for k in range(2)]
                           + ["pred_s0.obj", "pred_s1.obj", "occupancy.rvol"])
    capsys.readouterr()
    csv = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", str(pred), "--scene", str(scene), "--csv", str(csv)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert len(report["structures"]) == 2 and 0 <= report["whole"]["dice"] <= 1
    assert len(csv.read_text().splitlines()) == 2

    post = tmp_path / "post"
    assert main(["postprocess", "--pred", str(pred), "--checkpoint", str(run / "best.ckpt"),
                 "--data", str(tiny_dataset), "--tau", "1.0", "--out", str(post)]) == 0
    assert (post / "adjacency.json").exists()
    for k in range(2):
        assert np.array_equal(read_obj(post / f"pred_s{k}.obj").faces, read_obj(pred / f"pred_s{k}.obj").faces)

    clean = tmp_path / "clean.rvol"
    assert main(["postprocess", "--mask", str(scene / "occupancy.rvol"), "--out", str(clean)]) == 0
    assert set(np.unique(read_rvol(clean).data)) <= {0, 1}


def test_search_lambdas_table(tmp_path, tiny_dataset, capsys):
    capsys.readouterr()
    assert main(["search-lambdas", "--data", str(tiny_dataset), "--seed", "1", "--epochs", "1", "--augment", "false",
                 *TINY]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 8
    weights = np.array([[float(x) for x in r[:4]] for r in rows])
    assert np.all((weights >= 0) & (weights <= 1))
    vals = [float(r[4]) for r in rows]
    assert [r[5] == "*" for r in rows] == [i == int(np.argmin(vals)) for i in range(8)]
