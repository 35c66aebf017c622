import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from artifact import cli
from artifact.cli import dispatch
from artifact.phantoms import Volume, generate_phantom, read_array, read_mask, read_pgm, read_volume, write_volume

SMOKE = {
    "seed": 0,
    "deterministic": True,
    "epochs": 1,
    "batch_size": 2,
    "seg_epochs": 2,
    "seg_batch_size": 2,
    "seg_patch": None,
    "geometry": {"grid_n": 16},
    "data": {"recon_train": 4, "recon_test": 2, "seg_train": 4, "seg_test": 2},
}


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain-seg -> train -> evaluate on the 16^3 smoke config."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "c.json"
    cfg_path.write_text(json.dumps(SMOKE))
    corpus, seg, run, ev = root / "corpus", root / "seg", root / "run", root / "eval"
    codes = [dispatch(["gen-data", "--config", str(cfg_path), "--out", str(corpus)])]
    common = ["--config", str(cfg_path), "--set", f"corpus=\"{corpus}\""]
    codes.append(dispatch(["pretrain-seg", *common, "--out", str(seg)]))
    with_seg = [*common, "--set", f"seg_checkpoint=\"{seg / 'segnet'}\""]
    codes.append(dispatch(["train", *with_seg, "--out", str(run)]))
    codes.append(dispatch(["evaluate", *with_seg, "--set", f"out_dir=\"{run}\"", "--out", str(ev)]))
    return {"root": root, "cfg": cfg_path, "corpus": corpus, "seg": seg, "run": run, "eval": ev,
            "codes": codes, "common": common, "with_seg": with_seg}


def test_pipeline_completes(pipeline):
    assert pipeline["codes"] == [0, 0, 0, 0]
    for stage in ("corpus", "seg", "run", "eval"):
        assert (pipeline[stage] / "resolved_config.json").exists(), stage
    assert (pipeline["corpus"] / "manifest.json").exists()
    assert (pipeline["seg"] / "segnet.json").exists()
    assert (pipeline["run"] / "checkpoints" / "epoch_0001.json").exists()
    assert (pipeline["run"] / "loss_log.png").stat().st_size > 0
    with open(pipeline["eval"] / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and rows[-1]["sample_id"] == "aggregate"
    assert (pipeline["eval"] / "metrics.png").exists()
    assert list((pipeline["eval"] / "previews").glob("*.pgm"))


def test_reconstruct_command(pipeline, tmp_path):
    corpus = pipeline["corpus"]
    man = json.loads((corpus / "manifest.json").read_text())
    files = man["splits"]["recon_test"][0]["files"]
    out = tmp_path / "rec"
    code = dispatch(["reconstruct", "--checkpoint", str(pipeline["run"] / "checkpoints" / "epoch_0001"),
                     "--x-ap", str(corpus / files["x_ap"]), "--x-lat", str(corpus / files["x_lat"]),
                     "--seg", str(pipeline["seg"] / "segnet"), "--out", str(out)])
    assert code == 0
    vol = read_volume(out / "volume")
    assert vol.data.shape == (16, 16, 16)
    assert vol.data.min() >= -1024 and vol.data.max() <= 3071
    assert set(np.unique(read_mask(out / "mask").data)) <= {0, 1, 2, 3}
    assert read_pgm(out / "volume_mid.pgm").shape == (16, 16)
    assert (out / "resolved_config.json").exists()


def test_reconstruct_wrong_projection_shape(pipeline, tmp_path):
    from artifact.phantoms import write_array

    write_array(tmp_path / "bad", np.zeros((10, 16)), "projection")
    code = dispatch(["reconstruct", "--checkpoint", str(pipeline["run"] / "checkpoints" / "epoch_0001"),
                     "--x-ap", str(tmp_path / "bad"), "--x-lat", str(tmp_path / "bad"), "--out", str(tmp_path / "o")])
    assert code == 1


def test_project_command(tmp_path):
    v, _ = generate_phantom(1, 16, 8)
    write_volume(v, tmp_path / "v")
    (tmp_path / "g.json").write_text(json.dumps({"grid_n": 16}))
    code = dispatch(["project", "--volume", str(tmp_path / "v"), "--geometry", str(tmp_path / "g.json"),
                     "--out", str(tmp_path / "p")])
    assert code == 0
    xa, _ = read_array(tmp_path / "p" / "x_ap")
    xl, _ = read_array(tmp_path / "p" / "x_lat")
    assert xa.shape == xl.shape == (115, 8)
    assert read_pgm(tmp_path / "p" / "x_ap.pgm").shape == (8, 115)
    assert (tmp_path / "p" / "x_lat.pgm").exists() and (tmp_path / "p" / "projections.png").exists()
    assert (tmp_path / "p" / "resolved_config.json").exists()


def test_project_grid_mismatch(tmp_path):
    write_volume(Volume(np.zeros((8, 8, 8))), tmp_path / "v")
    (tmp_path / "g.json").write_text(json.dumps({"grid_n": 16}))
    assert dispatch(["project", "--volume", str(tmp_path / "v"), "--geometry", str(tmp_path / "g.json"),
                     "--out", str(tmp_path / "p")]) == 1


def test_sweep_command(pipeline, tmp_path):
    out = tmp_path / "sweep"
    code = dispatch(["sweep", *pipeline["with_seg"], "--lambda-s", "0,2", "--lambda-p", "0,0.5", "--out", str(out)])
    assert code == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(float(r["lambda_s"]), float(r["lambda_p"])) for r in rows] == [(0, 0), (0, 0.5), (2, 0), (2, 0.5)]
    for r in rows:
        report = json.loads((out / r["run_id"] / "eval" / "metrics.json").read_text())
        assert report["weights"]["lambda_s"] == float(r["lambda_s"])
        assert report["weights"]["lambda_p"] == float(r["lambda_p"])
        with open(out / r["run_id"] / "eval" / "metrics.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 + 1
    assert (out / "sweep.png").exists() and (out / "resolved_config.json").exists()


def test_overwrite_refused_then_allowed(pipeline):
    args = ["gen-data", "--config", str(pipeline["cfg"]), "--out", str(pipeline["corpus"])]
    before = tree(pipeline["corpus"])
    assert dispatch(args) == 1
    assert tree(pipeline["corpus"]) == before


def test_idempotent_reruns(pipeline, tmp_path):
    corpus2 = tmp_path / "corpus"
    assert dispatch(["gen-data", "--config", str(pipeline["cfg"]), "--out", str(corpus2)]) == 0
    a, b = tree(pipeline["corpus"]), tree(corpus2)
    # the snapshot records its own corpus path; everything else must match byte for byte
    a.pop("resolved_config.json")
    b.pop("resolved_config.json")
    assert a == b
    seg_before = tree(pipeline["seg"])
    assert dispatch(["pretrain-seg", *pipeline["common"], "--out", str(pipeline["seg"]), "--overwrite"]) == 0
    assert tree(pipeline["seg"]) == seg_before
    run_before = tree(pipeline["run"])
    assert dispatch(["train", *pipeline["with_seg"], "--out", str(pipeline["run"]), "--overwrite"]) == 0
    assert tree(pipeline["run"]) == run_before


def test_train_resume_extends_run(pipeline, tmp_path):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(pipeline["run"], run)
    code = dispatch(["train", *pipeline["with_seg"], "--set", "epochs=2", "--out", str(run), "--resume"])
    assert code == 0
    assert (run / "checkpoints" / "epoch_0002.json").exists()
    code = dispatch(["train", *pipeline["with_seg"], "--set", "epochs=3", "--set", "lr_gan=0.1",
                     "--out", str(run), "--resume"])
    assert code == 1


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train"],
    ["gen-data", "--config", "missing.json", "--out", "x"],
    ["gen-data", "--config", "{cfg}", "--set", "bogus=1", "--out", "{tmp}/o"],
    ["gen-data", "--config", "{cfg}", "--set", "geometry.grid_n=-1", "--out", "{tmp}/o"],
    ["sweep", "--config", "{cfg}", "--lambda-s", "a,b", "--out", "{tmp}/o"],
    ["evaluate", "--config", "{cfg}", "--out", "{tmp}/o"],
])
def test_validation_errors_exit_1(argv, pipeline, tmp_path, capsys):
    argv = [a.format(cfg=pipeline["cfg"], tmp=tmp_path) for a in argv]
    assert dispatch(argv) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())


def test_runtime_failure_exit_2(monkeypatch, capsys):
    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "project", boom)
    assert dispatch(["project", "--volume", "v", "--out", "o"]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "artifact.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
