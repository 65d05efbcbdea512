import json
import subprocess
import sys

import pytest

from vital import cli
from vital.fingerprints import load_dataset

GEN = {"gen": {
    "buildings": [{"building_id": 0, "path_length": 7, "num_aps": 10, "shadowing_sigma": 1.0},
                  {"building_id": 1, "path_length": 5, "num_aps": 8, "shadowing_sigma": 1.0}],
    "base_profiles": [{"device_id": "a"}, {"device_id": "b", "gain_offset": 2.0}],
    "extended_profiles": [{"device_id": "c", "gain_offset": -2.0}],
    "samples_per_rp_per_device": 3,
}}
VIT = {"image_size": 16, "patch_size": 4, "embed_dim": 16, "num_heads": 2, "head_dim": 8,
       "encoder_mlp_dims": [32, 16]}
TRAIN = {"preset": "desk", "vit": VIT, "train": {"epochs": 4, "batch_size": 16},
         "data": {"devices": ["a", "b"]}}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    write(tmp_path / "g.json", GEN)
    write(tmp_path / "t.json", TRAIN)
    return tmp_path


def files(d):
    return sorted(p.name for p in d.iterdir())


def test_gen_train_eval_pipeline(workdir):
    w = workdir
    assert run("gen", "--config", w / "g.json", "--out", w / "data.csv") == 0
    assert run("train", "--data", w / "data.csv", "--config", w / "t.json", "--out", w / "m.ckpt") == 0
    assert run("eval", "--model", w / "m.ckpt", "--data", w / "data.csv", "--config", w / "t.json",
               "--out", w / "report.json") == 0
    report = json.loads((w / "report.json").read_text())
    assert report["overall"]["n"] == len(load_dataset(w / "data.csv").where(devices=["a", "b"]))
    assert (w / "report.csv").read_text().startswith("building_id,device_id,n,")
    profiles = json.loads((w / "data.csv.profiles.json").read_text())
    assert profiles["extended_devices"] == ["c"]
    manifest = json.loads((w / "m.ckpt.manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert set(manifest["inputs"]) == {"config", "data"}
    assert manifest["version"]


def test_rerun_is_byte_identical(workdir):
    w = workdir
    outs = {}
    for tag in ("1", "2"):
        run("gen", "--config", w / "g.json", "--out", w / f"data{tag}.csv", "--seed", 5)
        run("train", "--data", w / f"data{tag}.csv", "--config", w / "t.json", "--out", w / f"m{tag}.ckpt")
        run("eval", "--model", w / f"m{tag}.ckpt", "--data", w / f"data{tag}.csv", "--out", w / f"r{tag}.json")
        outs[tag] = [(w / f"data{tag}.csv").read_bytes(), (w / f"m{tag}.ckpt").read_bytes(),
                     (w / f"r{tag}.json").read_bytes(), (w / f"r{tag}.csv").read_bytes()]
    assert outs["1"] == outs["2"]


def test_seed_flag_changes_data(workdir):
    w = workdir
    run("gen", "--config", w / "g.json", "--out", w / "a.csv", "--seed", 1)
    run("gen", "--config", w / "g.json", "--out", w / "b.csv", "--seed", 2)
    assert (w / "a.csv").read_bytes() != (w / "b.csv").read_bytes()
    assert json.loads((w / "b.csv.manifest.json").read_text())["config"]["gen"]["seed"] == 2


def test_predict_recovers_training_rp(tmp_path):
    gen = {"gen": {**GEN["gen"], "buildings": [{"building_id": 0, "path_length": 4, "num_aps": 8,
                                                "shadowing_sigma": 1.0}]}}
    cfg = {**TRAIN, "train": {"epochs": 150, "batch_size": 8, "optimizer": {"lr": 3e-3}}}
    run("gen", "--config", write(tmp_path / "g.json", gen), "--out", tmp_path / "d.csv")
    assert run("train", "--data", tmp_path / "d.csv", "--config", write(tmp_path / "t.json", cfg),
               "--out", tmp_path / "m.ckpt") == 0
    manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert manifest["train_accuracy"] == 1.0
    rec = load_dataset(tmp_path / "d.csv").where(devices=["a"]).records[2]
    fp = {"readings": {ap: v.tolist() for ap, v in rec.readings.items()}, "device_id": "a"}
    assert run("predict", "--model", tmp_path / "m.ckpt", "--data", write(tmp_path / "fp.json", fp),
               "--out", tmp_path / "p.json") == 0
    pred = json.loads((tmp_path / "p.json").read_text())["predictions"][0]
    assert (pred["building_id"], pred["rp_id"]) == (0, rec.rp_id)
    assert pred["x_m"] == float(rec.rp_id)


def test_sweep_and_ablate(workdir):
    w = workdir
    run("gen", "--config", w / "g.json", "--out", w / "data.csv")
    sweep_cfg = {**TRAIN, "train": {"epochs": 1}, "sweep": {"grid": {"patch_size": [4, 8], "num_heads": [1, 2]}}}
    assert run("sweep", "--data", w / "data.csv", "--config", write(w / "s.json", sweep_cfg),
               "--out", w / "sweep.csv", "--jobs", 2) == 0
    lines = (w / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 and lines[0].startswith("patch_size,num_heads,mean_error")
    abl = {**TRAIN, "train": {"epochs": 1}, "data": {"devices": ["a", "b"], "extended_devices": ["c"]}}
    assert run("ablate", "--data", w / "data.csv", "--config", write(w / "a.json", abl), "--out", w / "ab.json") == 0
    out = json.loads((w / "ab.json").read_text())
    assert set(out["summary"]) == {"with_dam", "without_dam"}
    assert set(out["with_dam"]) == {"test", "extended"}


def test_unknown_flag_writes_nothing(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--out", str(tmp_path / "x.csv"), "--bogus", "1"])
    assert exc.value.code != 0
    assert "usage:" in capsys.readouterr().err
    assert files(tmp_path) == []


def test_console_script_unknown_flag(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vital.cli", "train", "--frobnicate", "--out", str(tmp_path / "m")],
                          capture_output=True, text=True)
    assert proc.returncode != 0 and "usage:" in proc.stderr
    assert files(tmp_path) == []


def _last_err(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_bad_config_category(workdir, capsys):
    w = workdir
    bad = write(w / "bad.json", {"gen": {"seeed": 1}})
    assert run("gen", "--config", bad, "--out", w / "x.csv") == 3
    assert _last_err(capsys).startswith("error=bad_config ")
    assert not (w / "x.csv").exists()
    assert run("gen", "--config", write(w / "bad2.json", {"colour": 1}), "--out", w / "x.csv") == 3
    (w / "bad3.json").write_text("{not json")
    assert run("gen", "--config", w / "bad3.json", "--out", w / "x.csv") == 3
    assert run("train", "--config", write(w / "bad4.json", {"vit": {"patch_size": 300}}),
               "--data", w / "nothing.csv", "--out", w / "m.ckpt") == 3


def test_missing_file_category(workdir, capsys):
    w = workdir
    assert run("train", "--data", w / "nope.csv", "--out", w / "m.ckpt") == 4
    assert _last_err(capsys).startswith("error=missing_file ")
    assert run("gen", "--config", w / "nope.json", "--out", w / "d.csv") == 4


def test_format_error_category(workdir, capsys):
    w = workdir
    run("gen", "--config", w / "g.json", "--out", w / "data.csv")
    (w / "m.ckpt").write_bytes(b"NOPE" + b"\0" * 40)
    assert run("eval", "--model", w / "m.ckpt", "--data", w / "data.csv", "--out", w / "r.json") == 5
    assert _last_err(capsys).startswith("error=format_error ")
    (w / "broken.csv").write_text("building_id,rp_id\n1,2\n")
    assert run("train", "--data", w / "broken.csv", "--out", w / "m2.ckpt") == 5
    assert not (w / "r.json").exists() and not (w / "m2.ckpt").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_category(workdir, capsys):
    w = workdir
    run("gen", "--config", w / "g.json", "--out", w / "data.csv")
    cfg = {**TRAIN, "train": {"epochs": 3, "optimizer": {"kind": "sgd", "lr": 1e30}}}
    assert run("train", "--data", w / "data.csv", "--config", write(w / "t2.json", cfg), "--out", w / "m.ckpt") == 6
    assert _last_err(capsys).startswith("error=training_divergence ")
    assert not (w / "m.ckpt").exists()


def test_empty_config_resolves_to_defaults():
    rc = cli.build_run_config({})
    assert rc.vit.image_size == 206 and rc.vit.patch_size == 20
    assert rc.train.epochs == 50 and rc.train.dam.image_size == 206
    assert len(rc.gen.buildings) == 4
    desk = cli.build_run_config({"preset": "desk"}, seed=7, mode="eval")
    assert desk.vit.image_size == 64 and desk.train.dam.mode == "eval" and desk.gen.seed == 7
